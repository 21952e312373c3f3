"""Stage 2: contrastive training of a linear adapter on the filter corpus, and feature extraction.

Views are produced in embedding space (scale, Gaussian noise, coordinate
dropout) because the image encoder is not part of this package. Callers that
have real image-space augmentations can pre-extract both views and pass them
in through a paired-views CSV instead.
"""

from __future__ import annotations

import csv
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, ManifestEntry, read_embedding_file, write_embedding_file
from .errors import ConfigError, DataError, NumericError, ShapeError
from .mp_filter import FilterCorpus
from .nn import (
    LinearParams,
    cosine_anneal,
    info_nce_loss,
    linear_backward,
    linear_forward,
    load_params,
    save_params,
    sgd_momentum_step,
    sgd_state,
)

log = logging.getLogger(__name__)


class AdapterParams(LinearParams):
    """Square affine map D -> D appended after the frozen encoder."""

    def __post_init__(self):
        super().__post_init__()
        if self.d_in != self.d_out:
            raise ShapeError(f"adapter weight must be square, got {self.weight.shape}")

    @property
    def dim(self) -> int:
        return self.d_in

    @classmethod
    def identity(cls, dim) -> "AdapterParams":
        return cls(np.eye(dim), np.zeros(dim))

    def save(self, path):
        return save_params(path, "adapter", self.to_dict())

    @classmethod
    def load(cls, path) -> "AdapterParams":
        block, t = load_params(path)
        if block != "adapter":
            raise DataError(f"{path}: checkpoint block {block!r} is not an adapter")
        return cls(t["weight"], t["bias"].ravel())


@dataclass
class ProjectionParams:
    """Two-layer head ``relu(x W1^T + b1) W2^T + b2`` used only during training."""

    hidden: LinearParams
    out: LinearParams

    def __post_init__(self):
        if self.hidden.d_out != self.out.d_in:
            raise ShapeError("projection layers do not chain")

    @classmethod
    def init(cls, dim, hidden_dim, out_dim, rng) -> "ProjectionParams":
        return cls(LinearParams.init(dim, hidden_dim, rng), LinearParams.init(hidden_dim, out_dim, rng))

    def to_dict(self) -> dict:
        return {**self.hidden.to_dict("hidden."), **self.out.to_dict("out.")}

    @classmethod
    def from_dict(cls, d) -> "ProjectionParams":
        return cls(LinearParams.from_dict(d, "hidden."), LinearParams.from_dict(d, "out."))

    def save(self, path):
        return save_params(path, "projection", self.to_dict())

    @classmethod
    def load(cls, path) -> "ProjectionParams":
        block, t = load_params(path)
        if block != "projection":
            raise DataError(f"{path}: checkpoint block {block!r} is not a projection head")
        return cls(
            LinearParams(t["hidden.weight"], t["hidden.bias"].ravel()),
            LinearParams(t["out.weight"], t["out.bias"].ravel()),
        )


@dataclass(frozen=True)
class AugmentConfig:
    noise: float = 0.05  # Gaussian sigma as a fraction of the input RMS
    dropout: float = 0.1
    scale_min: float = 0.8
    scale_max: float = 1.2

    def __post_init__(self):
        if self.noise < 0 or not 0 <= self.dropout < 1 or self.scale_min > self.scale_max:
            raise ConfigError(f"invalid augmentation settings: {self}")


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source: tuple  # (bag_id, instance_index)


def _augment_rows(X, aug: AugmentConfig, rng):
    n, d = X.shape
    scale = rng.uniform(aug.scale_min, aug.scale_max, size=(n, 1))
    rms = np.sqrt(np.mean(X * X, axis=1, keepdims=True))
    noise = aug.noise * rms * rng.standard_normal((n, d))
    keep = rng.random((n, d)) >= aug.dropout
    return (X * scale + noise) * keep


def augment_batch(X, aug: AugmentConfig, rng):
    """Two independent stochastic views of every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    return _augment_rows(X, aug, rng), _augment_rows(X, aug, rng)


def augment_views(embedding, aug: AugmentConfig, rng, source=("", -1)) -> ViewPair:
    x = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot augment a non-finite embedding")
    a, b = augment_batch(x, aug, rng)
    return ViewPair(a[0], b[0], tuple(source))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DataError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def project(adapter: LinearParams, proj: ProjectionParams, X):
    """Forward pass ``G(adapter(X))`` returning all intermediates."""
    H = linear_forward(adapter, X)
    pre = linear_forward(proj.hidden, H)
    R = np.maximum(pre, 0.0)
    Z = linear_forward(proj.out, R)
    return H, pre, R, Z


def contrastive_loss_and_grad(adapter: LinearParams, proj: ProjectionParams, views, tau, pair=None):
    """InfoNCE loss of the interleaved ``views`` (2M x D) and grads for adapter and head."""
    H, pre, R, Z = project(adapter, proj, views)
    loss, dZ = info_nce_loss(Z, pair, tau)
    dR, dW2, db2 = linear_backward(proj.out, R, dZ)
    dpre = dR * (pre > 0)
    dH, dW1, db1 = linear_backward(proj.hidden, H, dpre)
    _, dWa, dba = linear_backward(adapter, views, dH)
    grads = {
        "adapter.weight": dWa,
        "adapter.bias": dba,
        "hidden.weight": dW1,
        "hidden.bias": db1,
        "out.weight": dW2,
        "out.bias": db2,
    }
    return loss, grads, Z


def _positive_pair_sim(Z):
    u = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    return float(np.mean(np.sum(u[0::2] * u[1::2], axis=1)))


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    batch_size: int = 64
    lr: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epochs: int = 100
    proj_hidden: int = 0  # 0 -> same as the embedding dim
    proj_dim: int = 128
    lr_min: float = 0.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


FULL_SCALE_CONTRASTIVE = ContrastiveConfig(batch_size=1024)


@dataclass
class AdapterTrainResult:
    adapter: AdapterParams
    projection: ProjectionParams
    log: list  # (epoch, loss, lr, positive_pair_mean_sim); epoch 0 is measured before any update

    def write_log(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "lr", "positive_pair_mean_sim"])
            for epoch, loss, lr, sim in self.log:
                w.writerow([epoch, repr(loss), repr(lr), repr(sim)])
        return path


def load_corpus_embeddings(corpus: FilterCorpus, manifest: DatasetManifest) -> np.ndarray:
    entries = {e.bag_id: e for e in manifest.entries}
    cache = {}
    rows = []
    for it in corpus.items:
        if it.bag_id not in entries:
            raise DataError(f"corpus references unknown bag {it.bag_id!r}")
        if it.bag_id not in cache:
            cache[it.bag_id] = read_embedding_file(manifest.resolve(entries[it.bag_id]))
        emb = cache[it.bag_id]
        if not 0 <= it.instance_index < emb.shape[0]:
            raise DataError(f"corpus index {it.instance_index} out of range for bag {it.bag_id}")
        rows.append(emb[it.instance_index])
    return np.asarray(rows, dtype=np.float64)


PAIRED_VIEWS_HEADER = ["bag_id", "instance_index", "view_a_path", "view_b_path", "row"]


def load_paired_views(path) -> list:
    """Read ``bag_id,instance_index,view_a_path,view_b_path,row`` rows into ViewPairs.

    ``row`` selects the row of each referenced EMB1 file; paths are relative to
    the CSV's directory.
    """
    path = Path(path)
    root = path.parent
    cache = {}

    def row_of(p, r):
        full = Path(p) if Path(p).is_absolute() else root / p
        if full not in cache:
            cache[full] = read_embedding_file(full)
        m = cache[full]
        if not 0 <= r < m.shape[0]:
            raise DataError(f"{full}: row {r} out of range")
        return m[r].astype(np.float64)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PAIRED_VIEWS_HEADER:
            raise DataError(f"{path}: header must be {','.join(PAIRED_VIEWS_HEADER)}")
        pairs = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields")
            bag_id, idx, pa, pb, r = rec
            a, b = row_of(pa, int(r)), row_of(pb, int(r))
            if a.shape != b.shape:
                raise DataError(f"{path}:{lineno}: views differ in dimension")
            pairs.append(ViewPair(a, b, (bag_id, int(idx))))
    if not pairs:
        raise DataError(f"{path}: no view pairs")
    return pairs


def _pack(params_a, params_g):
    return {
        **{"adapter." + k: v for k, v in params_a.to_dict().items()},
        **params_g.to_dict(),
    }


def _unpack(flat):
    adapter = AdapterParams(flat["adapter.weight"], flat["adapter.bias"])
    proj = ProjectionParams(
        LinearParams(flat["hidden.weight"], flat["hidden.bias"]),
        LinearParams(flat["out.weight"], flat["out.bias"]),
    )
    return adapter, proj


def train_adapter(corpus, manifest, config: ContrastiveConfig = ContrastiveConfig(), paired_views=None):
    """Train adapter + projection head with InfoNCE, SGD momentum and per-step cosine annealing.

    Source images come from ``corpus`` (augmented on the fly), or from
    ``paired_views`` (a list of :class:`ViewPair`, used as given) when supplied.
    A trailing batch with fewer than 2 images is skipped.
    """
    if paired_views is not None:
        fixed_a = np.array([p.view_a for p in paired_views], dtype=np.float64)
        fixed_b = np.array([p.view_b for p in paired_views], dtype=np.float64)
        n_items, dim = fixed_a.shape
    else:
        if corpus is None or len(corpus) == 0:
            raise DataError("empty filter corpus")
        X = load_corpus_embeddings(corpus, manifest)
        n_items, dim = X.shape
    M = config.batch_size
    if n_items < M:
        raise DataError(f"corpus has {n_items} images, fewer than the batch size {M}")

    rng = np.random.default_rng(config.seed)
    adapter = AdapterParams.identity(dim)
    proj = ProjectionParams.init(dim, config.proj_hidden or dim, config.proj_dim, rng)
    flat = _pack(adapter, proj)
    state = sgd_state(config.lr, config.momentum, config.weight_decay)

    starts = [s for s in range(0, n_items, M) if min(M, n_items - s) >= 2]
    total_steps = max(1, config.epochs * len(starts))

    def views_for(idx, r):
        if paired_views is not None:
            a, b = fixed_a[idx], fixed_b[idx]
        else:
            a, b = augment_batch(X[idx], config.augment, r)
        out = np.empty((2 * len(idx), dim))
        out[0::2], out[1::2] = a, b
        return out

    # epoch-0 row: one pass with the initial parameters on an independent stream
    eval_rng = np.random.default_rng([config.seed, 1])
    losses, sims = [], []
    for s in starts:
        idx = np.arange(s, min(s + M, n_items))
        v = views_for(idx, eval_rng)
        _, _, _, Z = project(adapter, proj, v)
        losses.append(info_nce_loss(Z, None, config.temperature, need_grad=False)[0])
        sims.append(_positive_pair_sim(Z))
    history = [(0, float(np.mean(losses)), config.lr, float(np.mean(sims)))]

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_items)
        losses, sims = [], []
        lr = config.lr
        for s in starts:
            idx = order[s : s + M]
            lr = cosine_anneal(config.lr, step, total_steps, config.lr_min)
            a_cur, g_cur = _unpack(flat)
            loss, grads, Z = contrastive_loss_and_grad(a_cur, g_cur, views_for(idx, rng), config.temperature)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite contrastive loss at epoch {epoch}")
            flat, state = sgd_momentum_step(flat, grads, state, lr=lr)
            losses.append(loss)
            sims.append(_positive_pair_sim(Z))
            step += 1
        history.append((epoch, float(np.mean(losses)), lr, float(np.mean(sims))))
        log.debug("contrastive epoch %d loss %.5f", epoch, history[-1][1])
    adapter, proj = _unpack(flat)
    return AdapterTrainResult(adapter, proj, history)


def apply_adapter(adapter: LinearParams, Z) -> np.ndarray:
    return linear_forward(adapter, Z)


def extract_features(adapter: LinearParams, manifest: DatasetManifest, out_dir, threads=1) -> DatasetManifest:
    """Map every bag through the adapter and write ``out_dir/bags/*.emb`` plus ``manifest.csv``.

    Instance-label sidecars are copied alongside so evaluation oracles keep working.
    """
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)

    def run(entry: ManifestEntry):
        src = manifest.resolve(entry)
        Z = read_embedding_file(src)
        if Z.shape[1] != adapter.d_in:
            raise ShapeError(f"bag {entry.bag_id} has dim {Z.shape[1]}, adapter expects {adapter.d_in}")
        rel = f"bags/{entry.bag_id}.emb"
        write_embedding_file(apply_adapter(adapter, Z).astype(np.float32), out_dir / rel)
        sidecar = src.with_name(src.stem + ".labels.csv")
        if sidecar.exists():
            shutil.copyfile(sidecar, out_dir / f"bags/{entry.bag_id}.labels.csv")
        return ManifestEntry(entry.bag_id, rel, entry.label, entry.split)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(run, manifest.entries))
    else:
        entries = [run(e) for e in manifest.entries]
    out = DatasetManifest(entries, root=out_dir)
    out.save(out_dir / "manifest.csv")
    return out
