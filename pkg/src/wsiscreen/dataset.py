"""Bags of patch embeddings: on-disk formats, manifests, splits and a synthetic generator.

Embedding files (``EMB1``) are little-endian::

    b"EMB1" | uint32 rows | uint32 cols | rows*cols float32, row-major

The manifest is a UTF-8 CSV with header ``bag_id,path,label,split``. Paths are
stored relative to the manifest's directory. Synthetic datasets additionally
write a per-bag sidecar ``<bag_id>.labels.csv`` (``instance_index,y``) that only
evaluation code reads.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    EmbeddingFormatError,
    FileIOError,
    NonFiniteError,
    StratificationError,
    TruncatedFileError,
)

EMB_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
MANIFEST_VERSION = 1
MANIFEST_HEADER = ["bag_id", "path", "label", "split"]
SPLITS = ("train", "test")


def as_embedding_matrix(values) -> np.ndarray:
    """Validate and coerce to a C-contiguous float32 ``n x D`` array."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"embedding matrix must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"embedding matrix must have rows >= 1 and cols >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("embedding matrix contains NaN or Inf")
    return arr


def encode_matrix(arr: np.ndarray) -> bytes:
    """Dims header plus float32 little-endian payload (shared with PRM1)."""
    rows, cols = arr.shape
    return struct.pack("<II", rows, cols) + np.asarray(arr, dtype="<f4").tobytes(order="C")


def write_embedding_file(matrix, path) -> None:
    arr = as_embedding_matrix(matrix)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(EMB_MAGIC)
            fh.write(encode_matrix(arr))
    except OSError as exc:
        raise FileIOError(f"cannot write embedding file ({exc.strerror})", path) from exc


def read_embedding_file(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FileIOError(f"cannot read embedding file ({exc.strerror})", path) from exc
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"file is {len(data)} bytes, shorter than the 12-byte header", path)
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}", path)
    if rows == 0 or cols == 0:
        raise EmbeddingFormatError(f"zero dimension in header ({rows}x{cols})", path)
    expected = _HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise TruncatedFileError(
            f"declares {rows}x{cols} floats but payload holds {(len(data) - _HEADER.size) // 4}", path
        )
    if len(data) > expected:
        raise EmbeddingFormatError(f"{len(data) - expected} trailing bytes after payload", path)
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: non-finite value in embedding file")
    return arr


@dataclass(frozen=True)
class Bag:
    bag_id: str
    embeddings: np.ndarray
    label: int
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "embeddings", as_embedding_matrix(self.embeddings))
        if self.label not in (0, 1):
            raise DataError(f"bag {self.bag_id}: label must be 0 or 1, got {self.label!r}")
        if self.instance_labels is not None:
            y = np.asarray(self.instance_labels, dtype=np.int64)
            if y.shape != (self.embeddings.shape[0],):
                raise DataError(
                    f"bag {self.bag_id}: {y.shape[0]} instance labels for {self.embeddings.shape[0]} rows"
                )
            if int(y.max(initial=0)) != self.label:
                raise DataError(f"bag {self.bag_id}: label {self.label} != OR of instance labels")
            object.__setattr__(self, "instance_labels", y)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    bag_id: str
    path: str
    label: int
    split: str


def _sidecar_path(embedding_path: Path) -> Path:
    return embedding_path.with_name(embedding_path.stem + ".labels.csv")


@dataclass
class DatasetManifest:
    entries: list
    root: Path = field(default_factory=Path)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for e in self.entries:
            if e.bag_id in seen:
                raise DataError(f"duplicate bag_id {e.bag_id!r} in manifest")
            seen.add(e.bag_id)
            if e.label not in (0, 1):
                raise DataError(f"bag {e.bag_id}: label must be 0 or 1")
            if e.split not in SPLITS:
                raise DataError(f"bag {e.bag_id}: split must be one of {SPLITS}, got {e.split!r}")

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def select(self, split: Optional[str] = None) -> list:
        return [e for e in self.entries if split is None or e.split == split]

    def labels(self, split: Optional[str] = None) -> np.ndarray:
        return np.array([e.label for e in self.select(split)], dtype=np.int64)

    def load_bag(self, entry: ManifestEntry) -> Bag:
        # instance labels are deliberately not attached: training code only ever sees Bag
        # objects built here.
        return Bag(entry.bag_id, read_embedding_file(self.resolve(entry)), entry.label)

    def load_bags(self, split: Optional[str] = None) -> list:
        return [self.load_bag(e) for e in self.select(split)]

    def load_instance_labels(self, entry: ManifestEntry) -> np.ndarray:
        """Evaluation-only access to the synthetic sidecar for one bag."""
        return read_instance_labels(_sidecar_path(self.resolve(entry)))

    def validate_files(self) -> None:
        for e in self.entries:
            read_embedding_file(self.resolve(e))

    def with_entries(self, entries) -> "DatasetManifest":
        return DatasetManifest(list(entries), self.root, self.version)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        root = path.parent.resolve()
        rows = []
        for e in self.entries:
            full = self.resolve(e).resolve()
            try:
                rel = full.relative_to(root)
            except ValueError:
                rel = Path(os.path.relpath(full, root))
            rows.append([e.bag_id, rel.as_posix(), e.label, e.split])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            w.writerows(rows)
        return path

    @classmethod
    def load(cls, path, validate: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            fh = open(path, newline="", encoding="utf-8")
        except OSError as exc:
            raise FileIOError(f"cannot open manifest ({exc.strerror})", path) from exc
        with fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
            entries = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
                bag_id, rel, label, split = row
                if label not in ("0", "1"):
                    raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
                entries.append(ManifestEntry(bag_id, rel, int(label), split))
        manifest = cls(entries, root=path.parent)
        if validate:
            manifest.validate_files()
        return manifest


def write_instance_labels(y, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_index", "y"])
        w.writerows([i, int(v)] for i, v in enumerate(y))


def read_instance_labels(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FileIOError(f"cannot read instance-label sidecar ({exc.strerror})", path) from exc
    if not rows or rows[0] != ["instance_index", "y"]:
        raise DataError(f"{path}: sidecar header must be instance_index,y")
    body = [r for r in rows[1:] if r]
    y = np.zeros(len(body), dtype=np.int64)
    for i, (idx, v) in enumerate(body):
        if int(idx) != i:
            raise DataError(f"{path}: instance indices must be 0..n-1 in order")
        y[i] = int(v)
    return y


@dataclass(frozen=True)
class SyntheticSpec:
    n_bags: int = 200
    instances_per_bag: tuple = (48, 64)
    dim: int = 32
    positive_bag_fraction: float = 0.5
    planted_per_positive: tuple = (2, 6)
    separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "instances_per_bag", tuple(int(v) for v in self.instances_per_bag))
        object.__setattr__(self, "planted_per_positive", tuple(int(v) for v in self.planted_per_positive))
        self.validate()

    def validate(self) -> None:
        lo_n, hi_n = self.instances_per_bag
        lo_p, hi_p = self.planted_per_positive
        problems = []
        if self.n_bags < 1:
            problems.append("n_bags must be >= 1")
        if self.dim < 1:
            problems.append("dim must be >= 1")
        if not 0.0 <= self.positive_bag_fraction <= 1.0:
            problems.append("positive_bag_fraction must lie in [0, 1]")
        if lo_p < 1 or hi_p < lo_p:
            problems.append("planted_per_positive must be a range with lower bound >= 1")
        if hi_n < lo_n:
            problems.append("instances_per_bag must be an increasing range")
        if lo_n < hi_p:
            problems.append("instances_per_bag lower bound must be >= planted_per_positive upper bound")
        if not self.noise_sigma > 0:
            problems.append("noise_sigma must be > 0")
        if self.separation < 0:
            problems.append("separation must be >= 0")
        if problems:
            raise ConfigError("unsatisfiable synthetic spec: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a Gaussian-mixture MIL dataset under ``out_dir``.

    Normal instances are drawn around a seeded random mean; lesion instances are
    shifted by ``separation * noise_sigma`` along a seeded random unit direction.
    A bag is positive iff it has at least one planted lesion. Every bag is put in
    the ``train`` split; call :func:`split_dataset` to assign the test split.
    ``synthetic_meta.json`` records the mean and lesion direction for oracles.
    """
    spec.validate()
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    normal_mean = rng.standard_normal(spec.dim)
    direction = rng.standard_normal(spec.dim)
    direction /= np.linalg.norm(direction)
    shift = spec.separation * spec.noise_sigma * direction

    n_pos = int(math.floor(spec.positive_bag_fraction * spec.n_bags + 0.5))
    labels = np.zeros(spec.n_bags, dtype=np.int64)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)

    width = max(4, len(str(spec.n_bags - 1)))
    entries = []
    for i in range(spec.n_bags):
        n = int(rng.integers(spec.instances_per_bag[0], spec.instances_per_bag[1] + 1))
        x = normal_mean + spec.noise_sigma * rng.standard_normal((n, spec.dim))
        y = np.zeros(n, dtype=np.int64)
        if labels[i]:
            k = int(rng.integers(spec.planted_per_positive[0], spec.planted_per_positive[1] + 1))
            planted = rng.choice(n, size=k, replace=False)
            x[planted] += shift
            y[planted] = 1
        bag_id = f"bag{i:0{width}d}"
        emb_path = bag_dir / f"{bag_id}.emb"
        write_embedding_file(x.astype(np.float32), emb_path)
        write_instance_labels(y, _sidecar_path(emb_path))
        entries.append(ManifestEntry(bag_id, f"bags/{bag_id}.emb", int(labels[i]), "train"))

    meta = {
        "spec": asdict(spec),
        "normal_mean": normal_mean.tolist(),
        "lesion_direction": direction.tolist(),
    }
    (out_dir / "synthetic_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return DatasetManifest(entries, root=out_dir)


def allocate_per_class(counts: Sequence[int], fraction: float, keep_one_out: bool) -> list:
    """Largest-remainder split of ``round(fraction * total)`` across classes.

    With ``keep_one_out`` every class keeps between 1 and count-1 members on
    each side; otherwise each class gets at least one selected member.
    """
    total = sum(counts)
    target = int(math.floor(fraction * total + 0.5))
    quotas = [fraction * c for c in counts]
    alloc = [int(math.floor(q)) for q in quotas]
    remainder = target - sum(alloc)
    order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - alloc[i]), -counts[i], i))
    for i in order[: max(0, remainder)]:
        alloc[i] += 1
    if keep_one_out:
        return [min(max(a, 1), c - 1) for a, c in zip(alloc, counts)]
    return [min(max(a, 1), c) for a, c in zip(alloc, counts)]


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.7, seed: int = 0) -> DatasetManifest:
    """Stratified (per binary class) train/test split, deterministic given ``seed``."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class = {0: [], 1: []}
    for i, e in enumerate(manifest.entries):
        by_class[e.label].append(i)
    for label, members in by_class.items():
        if len(members) < 2:
            raise StratificationError(f"class {label} has {len(members)} bag(s); stratified split needs >= 2")
    n_train = allocate_per_class([len(by_class[0]), len(by_class[1])], train_fraction, keep_one_out=True)
    rng = np.random.default_rng(seed)
    train = set()
    for label in (0, 1):
        perm = rng.permutation(by_class[label])
        train.update(int(i) for i in perm[: n_train[label]])
    entries = [
        replace(e, split="train" if i in train else "test") for i, e in enumerate(manifest.entries)
    ]
    return manifest.with_entries(entries)

