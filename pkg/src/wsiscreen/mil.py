"""Embedding-based MIL heads (mean pool, max pool, gated attention) and their training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigError, DataError, NumericError, ShapeError
from .nn import (
    LinearParams,
    adam_state,
    adam_step,
    bce_loss,
    cosine_anneal,
    load_params,
    save_params,
    sigmoid,
)

log = logging.getLogger(__name__)

HEAD_KINDS = ("mean_pool", "max_pool", "gated_attention")


@dataclass
class AttentionParams:
    """Gated attention: ``e_i = w . (tanh(V z_i) * sigmoid(U z_i))``."""

    V: np.ndarray  # (L, D)
    U: np.ndarray  # (L, D)
    w: np.ndarray  # (L,)
    classifier: LinearParams  # D -> 1

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        L, D = self.V.shape
        if self.U.shape != (L, D) or self.w.shape != (L,):
            raise ShapeError(f"attention shapes disagree: V {self.V.shape}, U {self.U.shape}, w {self.w.shape}")
        if self.classifier.d_in != D or self.classifier.d_out != 1:
            raise ShapeError("classifier must map D -> 1")

    @property
    def dim(self) -> int:
        return self.V.shape[1]

    @classmethod
    def init(cls, dim, hidden, rng) -> "AttentionParams":
        """Random V, U; zero w and classifier.

        The head starts as mean pooling with p = 0.5 for every bag. A random
        classifier on features with a large shared mean sometimes locks the
        attention onto spurious instances early on.
        """
        bound = 1.0 / np.sqrt(dim)
        return cls(
            V=rng.uniform(-bound, bound, (hidden, dim)),
            U=rng.uniform(-bound, bound, (hidden, dim)),
            w=np.zeros(hidden),
            classifier=LinearParams.zeros(dim, 1),
        )

    def to_dict(self) -> dict:
        return {"V": self.V, "U": self.U, "w": self.w, **self.classifier.to_dict("classifier.")}

    @classmethod
    def from_dict(cls, d) -> "AttentionParams":
        return cls(d["V"], d["U"], d["w"], LinearParams.from_dict(d, "classifier."))


@dataclass
class MilHead:
    kind: str
    params: object  # LinearParams for pooling heads, AttentionParams for gated_attention

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        want = AttentionParams if self.kind == "gated_attention" else LinearParams
        if not isinstance(self.params, want):
            raise ConfigError(f"{self.kind} head needs {want.__name__}")
        if want is LinearParams and self.params.d_out != 1:
            raise ShapeError("pooling head classifier must map D -> 1")

    @property
    def dim(self) -> int:
        return self.params.dim if self.kind == "gated_attention" else self.params.d_in

    @classmethod
    def init(cls, kind, dim, rng, hidden=128) -> "MilHead":
        if kind == "gated_attention":
            return cls(kind, AttentionParams.init(dim, hidden, rng))
        return cls(kind, LinearParams.zeros(dim, 1))

    def to_dict(self) -> dict:
        return self.params.to_dict()

    def with_dict(self, d) -> "MilHead":
        if self.kind == "gated_attention":
            return MilHead(self.kind, AttentionParams.from_dict(d))
        return MilHead(self.kind, LinearParams.from_dict(d))

    def save(self, path):
        return save_params(path, f"mil:{self.kind}", self.to_dict())

    @classmethod
    def load(cls, path) -> "MilHead":
        block, tensors = load_params(path)
        if not block.startswith("mil:"):
            raise DataError(f"{path}: checkpoint block {block!r} is not a MIL head")
        kind = block[4:]
        if kind == "gated_attention":
            params = AttentionParams(
                tensors["V"], tensors["U"], tensors["w"].ravel(), LinearParams.from_dict(tensors, "classifier.")
            )
        else:
            params = LinearParams.from_dict(tensors)
        return cls(kind, params)


def _bag_matrix(Z, dim):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise DataError(f"bag must be a non-empty (n, D) matrix, got shape {Z.shape}")
    if Z.shape[1] != dim:
        raise ShapeError(f"bag has dimension {Z.shape[1]}, head expects {dim}")
    return Z


def _classify(clf: LinearParams, m):
    return float(m @ clf.weight[0] + clf.bias[0])


def mean_pool_head_forward(head: MilHead, Z) -> float:
    Z = _bag_matrix(Z, head.dim)
    return float(sigmoid(_classify(head.params, Z.mean(axis=0))))


def max_pool_head_forward(head: MilHead, Z) -> float:
    Z = _bag_matrix(Z, head.dim)
    return float(sigmoid(_classify(head.params, Z.max(axis=0))))


def _attention_scores(p: AttentionParams, Z):
    A = np.tanh(Z @ p.V.T)
    B = sigmoid(Z @ p.U.T)
    e = (A * B) @ p.w
    e = e - e.max()
    a = np.exp(e)
    a /= a.sum()
    return A, B, a


def gated_attention_forward(params: AttentionParams, Z):
    """Return ``(probability, attention weights)`` for one bag."""
    Z = _bag_matrix(Z, params.dim)
    _, _, a = _attention_scores(params, Z)
    return float(sigmoid(_classify(params.classifier, a @ Z))), a


def bag_embedding(head: MilHead, Z) -> np.ndarray:
    Z = _bag_matrix(Z, head.dim)
    if head.kind == "mean_pool":
        return Z.mean(axis=0)
    if head.kind == "max_pool":
        return Z.max(axis=0)
    return _attention_scores(head.params, Z)[2] @ Z


def predict(head: MilHead, Z):
    """Bag probability and attention weights (None for pooling heads)."""
    if head.kind == "gated_attention":
        return gated_attention_forward(head.params, Z)
    if head.kind == "mean_pool":
        return mean_pool_head_forward(head, Z), None
    return max_pool_head_forward(head, Z), None


def head_loss_and_grad(head: MilHead, Z, y):
    """BCE loss of one bag and gradients for every tensor in ``head.to_dict()``."""
    Z = _bag_matrix(Z, head.dim)
    if head.kind == "gated_attention":
        p = head.params
        A, B, a = _attention_scores(p, Z)
        m = a @ Z
        clf = p.classifier
    else:
        clf = head.params
        if head.kind == "mean_pool":
            m = Z.mean(axis=0)
        else:
            arg = Z.argmax(axis=0)
            m = Z[arg, np.arange(Z.shape[1])]
    prob = float(sigmoid(_classify(clf, m)))
    loss, dprob = bce_loss(prob, y)
    ds = dprob * prob * (1.0 - prob)
    grads = {"weight": ds * m[None, :], "bias": np.array([ds])}
    if head.kind != "gated_attention":
        return loss, prob, grads

    dm = ds * clf.weight[0]
    da = Z @ dm
    de = a * (da - a @ da)
    H = A * B
    dH = np.outer(de, p.w)
    d_pre_v = dH * B * (1.0 - A * A)
    d_pre_u = dH * A * B * (1.0 - B)
    return loss, prob, {
        "V": d_pre_v.T @ Z,
        "U": d_pre_u.T @ Z,
        "w": H.T @ de,
        "classifier.weight": grads["weight"],
        "classifier.bias": grads["bias"],
    }


@dataclass(frozen=True)
class MilConfig:
    head: str = "gated_attention"
    epochs: int = 50
    lr: float = 2e-4
    weight_decay: float = 1e-5
    hidden: int = 128
    lr_min: float = 0.0
    seed: int = 0


@dataclass
class MilTrainResult:
    head: MilHead
    log: list = field(default_factory=list)  # (epoch, mean loss, lr)
    best_epoch: int = 0


def train_mil(bags, config: MilConfig) -> MilTrainResult:
    """Adam, one bag per step, cosine-annealed per epoch; keeps the best-train-loss head.

    ``bags`` is a list of :class:`~wsiscreen.dataset.Bag` (only ``embeddings``
    and ``label`` are read) or a manifest, in which case its train split is used.
    """
    if isinstance(bags, DatasetManifest):
        bags = bags.load_bags("train")
    if not bags:
        raise ConfigError("no training bags")
    if len({b.label for b in bags}) < 2:
        raise ConfigError("MIL training set must contain both classes")
    rng = np.random.default_rng(config.seed)
    dim = bags[0].embeddings.shape[1]
    head = MilHead.init(config.head, dim, rng, hidden=config.hidden)
    result = MilTrainResult(head)
    if config.epochs == 0:
        return result

    data = [(np.asarray(b.embeddings, dtype=np.float64), b.label) for b in bags]
    params = head.to_dict()
    state = adam_state(config.lr, config.weight_decay)
    best_loss = np.inf
    for epoch in range(config.epochs):
        lr = cosine_anneal(config.lr, epoch, config.epochs, config.lr_min)
        total = 0.0
        for i in rng.permutation(len(data)):
            Z, y = data[i]
            loss, _, grads = head_loss_and_grad(head.with_dict(params), Z, y)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite MIL loss at epoch {epoch}")
            params, state = adam_step(params, grads, state, lr=lr)
            total += loss
        mean_loss = total / len(data)
        result.log.append((epoch + 1, mean_loss, lr))
        log.debug("mil epoch %d loss %.6f lr %.3g", epoch + 1, mean_loss, lr)
        if mean_loss < best_loss:
            best_loss = mean_loss
            result.head = head.with_dict({k: v.copy() for k, v in params.items()})
            result.best_epoch = epoch + 1
    return result
