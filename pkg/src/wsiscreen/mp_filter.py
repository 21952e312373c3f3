"""Stage 1: mean-pooling instance classifier, patch scoring and top-k corpus selection."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Bag, DatasetManifest, allocate_per_class
from .errors import ConfigError, DataError, NumericError, ShapeError
from .nn import LinearParams, adam_state, adam_step, bce_loss, sigmoid

log = logging.getLogger(__name__)

STRATEGIES = ("mp_topk", "random", "all")


@dataclass(frozen=True)
class ScoredPatch:
    bag_id: str
    instance_index: int
    score: float


@dataclass(frozen=True)
class MPConfig:
    epochs: int = 200
    lr: float = 0.05
    weight_decay: float = 0.1
    tol: float = 1e-7
    patience: int = 5
    seed: int = 0


def instance_logits(params: LinearParams, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != params.d_in:
        raise ShapeError(f"bag of shape {Z.shape} does not match classifier input dim {params.d_in}")
    return Z @ params.weight[0] + params.bias[0]


def bag_probability(params: LinearParams, Z) -> float:
    """Mean of the instance logits, squashed once."""
    return float(sigmoid(instance_logits(params, Z).mean()))


def _mp_loss_and_grad(params: LinearParams, bags):
    gw = np.zeros_like(params.weight)
    gb = np.zeros_like(params.bias)
    total = 0.0
    for Z, y in bags:
        prob = bag_probability(params, Z)
        loss, dprob = bce_loss(prob, y)
        ds = dprob * prob * (1.0 - prob)
        gw[0] += ds * Z.mean(axis=0)
        gb[0] += ds
        total += loss
    n = len(bags)
    return total / n, {"weight": gw / n, "bias": gb / n}


def train_mp_classifier(train_bags, config: MPConfig = MPConfig()) -> LinearParams:
    """Full-batch Adam on bag-level BCE; stops early once the loss plateaus."""
    bags = [(np.asarray(b.embeddings, dtype=np.float64), b.label) for b in train_bags]
    if not bags:
        raise ConfigError("no training bags for the mean-pooling classifier")
    if len({y for _, y in bags}) < 2:
        raise ConfigError("mean-pooling classifier needs both classes in the training set")
    dim = bags[0][0].shape[1]
    rng = np.random.default_rng(config.seed)
    params = LinearParams.init(dim, 1, rng).to_dict()
    state = adam_state(config.lr, config.weight_decay)
    prev, flat = np.inf, 0
    for epoch in range(config.epochs):
        loss, grads = _mp_loss_and_grad(LinearParams.from_dict(params), bags)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite mean-pooling loss at epoch {epoch}")
        params, state = adam_step(params, grads, state)
        flat = flat + 1 if abs(prev - loss) < config.tol else 0
        prev = loss
        log.debug("mp epoch %d loss %.6f", epoch + 1, loss)
        if flat >= config.patience:
            break
    return LinearParams.from_dict(params)


def score_patches(params: LinearParams, bag: Bag) -> list:
    scores = sigmoid(instance_logits(params, bag.embeddings))
    return [ScoredPatch(bag.bag_id, i, float(s)) for i, s in enumerate(scores)]


def select_topk(scores, k) -> list:
    """Indices of the ``k`` highest scores, descending, ties by lower index.

    ``scores`` is a list of :class:`ScoredPatch` or a plain sequence of floats.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(scores) == 0:
        raise DataError("cannot select from an empty score list")
    if isinstance(scores[0], ScoredPatch):
        values = np.array([s.score for s in scores])
        index = np.array([s.instance_index for s in scores])
    else:
        values = np.asarray(scores, dtype=np.float64)
        index = np.arange(values.size)
    order = np.lexsort((index, -values))
    return [int(i) for i in index[order[:k]]]


def select_random(bag_size, k, seed) -> list:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if bag_size < 1:
        raise DataError("cannot sample from an empty bag")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(bag_size, size=min(k, bag_size), replace=False)]


@dataclass(frozen=True)
class CorpusItem:
    bag_id: str
    instance_index: int
    score: Optional[float]


@dataclass
class FilterCorpus:
    items: list
    k: Optional[int]
    strategy: str
    seed: int
    source_fraction: float
    k_used: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    @property
    def bag_ids(self) -> list:
        return list(self.k_used)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(
                f"# k={self.k},strategy={self.strategy},seed={self.seed},source_fraction={self.source_fraction!r}\n"
            )
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bag_id", "instance_index", "score", "strategy"])
            for it in self.items:
                w.writerow([it.bag_id, it.instance_index, "" if it.score is None else repr(it.score), self.strategy])
        return path

    @classmethod
    def load(cls, path) -> "FilterCorpus":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise DataError(f"{path}: corpus file must start with a '# k=...' comment line")
            meta = dict(kv.split("=", 1) for kv in first[2:].strip().split(","))
            reader = csv.reader(fh)
            if next(reader, None) != ["bag_id", "instance_index", "score", "strategy"]:
                raise DataError(f"{path}: bad corpus header")
            items, k_used = [], {}
            for row in reader:
                if not row:
                    continue
                bag_id, idx, score, _ = row
                items.append(CorpusItem(bag_id, int(idx), float(score) if score else None))
                k_used[bag_id] = k_used.get(bag_id, 0) + 1
        k = None if meta["k"] == "None" else int(meta["k"])
        return cls(items, k, meta["strategy"], int(meta["seed"]), float(meta["source_fraction"]), k_used)


def _bag_seed(seed, position):
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def choose_source_bags(manifest: DatasetManifest, source_fraction, seed) -> list:
    """Stratified subset of train-split entries, returned in manifest order."""
    if not 0.0 < source_fraction <= 1.0:
        raise ConfigError(f"source_fraction must be in (0, 1], got {source_fraction}")
    train = manifest.select("train")
    if source_fraction == 1.0:
        return train
    by_class = {0: [], 1: []}
    for i, e in enumerate(train):
        by_class[e.label].append(i)
    counts = [len(by_class[0]), len(by_class[1])]
    take = allocate_per_class(counts, source_fraction, keep_one_out=False)
    rng = np.random.default_rng(seed)
    keep = set()
    for label in (0, 1):
        if counts[label]:
            keep.update(int(i) for i in rng.permutation(by_class[label])[: take[label]])
    return [e for i, e in enumerate(train) if i in keep]


def build_filter_corpus(
    manifest: DatasetManifest,
    params: Optional[LinearParams],
    k: Optional[int] = 50,
    strategy: str = "mp_topk",
    source_fraction: float = 0.8,
    seed: int = 0,
    threads: int = 1,
) -> FilterCorpus:
    """Flatten the selected patches of a fraction of the train split into one corpus."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown filter strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "mp_topk" and params is None:
        raise ConfigError("strategy mp_topk requires a trained mean-pooling classifier")
    if strategy != "all" and (k is None or k < 1):
        raise ConfigError(f"k must be >= 1, got {k}")
    entries = choose_source_bags(manifest, source_fraction, seed)

    def pick(position_entry):
        position, entry = position_entry
        bag = manifest.load_bag(entry)
        scores = None
        if params is not None:
            scores = sigmoid(instance_logits(params, bag.embeddings))
        if strategy == "mp_topk":
            chosen = select_topk(scores, k)
        elif strategy == "random":
            chosen = select_random(bag.size, k, _bag_seed(seed, position))
        else:
            chosen = list(range(bag.size))
        return [CorpusItem(entry.bag_id, i, None if scores is None else float(scores[i])) for i in chosen]

    jobs = list(enumerate(entries))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_bag = list(pool.map(pick, jobs))
    else:
        per_bag = [pick(j) for j in jobs]

    items, k_used = [], {}
    for entry, chosen in zip(entries, per_bag):
        items.extend(chosen)
        k_used[entry.bag_id] = len(chosen)
    if not items:
        raise DataError("filter produced an empty corpus")
    return FilterCorpus(items, None if strategy == "all" else k, strategy, seed, source_fraction, k_used)


def filter_recall(corpus: FilterCorpus, manifest: DatasetManifest) -> float:
    """Fraction of planted lesion instances of the corpus's positive bags that were selected.

    Reads the synthetic instance-label sidecars, so it is an evaluation oracle only.
    """
    entries = {e.bag_id: e for e in manifest.entries}
    chosen = {}
    for it in corpus.items:
        chosen.setdefault(it.bag_id, set()).add(it.instance_index)
    planted = hit = 0
    for bag_id in corpus.k_used:
        entry = entries[bag_id]
        if entry.label != 1:
            continue
        y = manifest.load_instance_labels(entry)
        lesions = set(np.flatnonzero(y).tolist())
        planted += len(lesions)
        hit += len(lesions & chosen.get(bag_id, set()))
    if planted == 0:
        raise DataError("corpus contains no positive bags with planted instances")
    return hit / planted
