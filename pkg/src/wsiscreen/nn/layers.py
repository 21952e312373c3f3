"""Parameter blocks, affine layers and activations with hand-written backward passes.

All computation is float64; embeddings are upcast on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteError, ShapeError

ACTIVATIONS = ("sigmoid", "tanh", "relu", "softmax_over_rows")


def uniform_init(shape, fan_in, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LinearParams:
    """Affine map ``x -> x @ weight.T + bias`` with weight of shape (d_out, d_in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent linear shapes: weight {self.weight.shape}, bias {self.bias.shape}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NonFiniteError("linear parameters contain non-finite values")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, d_in, d_out, rng) -> "LinearParams":
        return cls(uniform_init((d_out, d_in), d_in, rng), uniform_init((d_out,), d_in, rng))

    @classmethod
    def zeros(cls, d_in, d_out) -> "LinearParams":
        return cls(np.zeros((d_out, d_in)), np.zeros(d_out))

    def to_dict(self, prefix="") -> dict:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}

    @classmethod
    def from_dict(cls, d, prefix="") -> "LinearParams":
        return cls(d[prefix + "weight"], d[prefix + "bias"])

    def copy(self) -> "LinearParams":
        return LinearParams(self.weight.copy(), self.bias.copy())


def _as_2d(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {x.shape}")
    return x


def linear_forward(params: LinearParams, x) -> np.ndarray:
    x = _as_2d(x)
    if x.shape[1] != params.d_in:
        raise ShapeError(f"input has {x.shape[1]} columns, layer expects {params.d_in}")
    return x @ params.weight.T + params.bias


def linear_backward(params: LinearParams, x, dy):
    """Return (dx, dweight, dbias) for ``y = linear_forward(params, x)``."""
    x = _as_2d(x)
    dy = _as_2d(dy, "dy")
    return dy @ params.weight, dy.T @ x, dy.sum(axis=0)


def sigmoid(x):
    # exp(-log(1 + exp(-x))) never overflows
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def softmax_rows(x):
    x = _as_2d(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activation(kind, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite input to {kind}")
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "softmax_over_rows":
        return softmax_rows(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(kind, x, y, dy):
    """Gradient w.r.t. the input, given input ``x``, output ``y`` and upstream ``dy``."""
    dy = np.asarray(dy, dtype=np.float64)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "relu":
        return dy * (np.asarray(x) > 0)
    if kind == "softmax_over_rows":
        y = _as_2d(y)
        dy = _as_2d(dy)
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))
    raise ValueError(f"unknown activation {kind!r}")
