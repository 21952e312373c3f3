"""SGD with momentum, Adam, and a cosine learning-rate schedule.

Parameters and gradients are plain ``{name: ndarray}`` dicts. Step functions are
pure: they return fresh parameter dicts and a fresh state and never mutate
their inputs. Weight decay is coupled L2 (added to the gradient before the
momentum / moment updates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)


def sgd_state(lr=0.6, momentum=0.9, weight_decay=1e-6) -> OptimizerState:
    return OptimizerState("sgd_momentum", lr, momentum=momentum, weight_decay=weight_decay)


def adam_state(lr=2e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8) -> OptimizerState:
    return OptimizerState("adam", lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)


def _check(params, grads):
    if params.keys() != grads.keys():
        raise ShapeError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ShapeError(f"{name}: gradient shape {np.shape(grads[name])} != parameter shape {np.shape(p)}")


def sgd_momentum_step(params, grads, state: OptimizerState, lr=None):
    """Classical (non-Nesterov) momentum: ``v = mu*v + (g + wd*theta)``, ``theta -= lr*v``."""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    new_params, buffers = {}, {}
    for name, theta in params.items():
        g = grads[name] + state.weight_decay * theta
        v = state.momentum * state.buffers.get("v:" + name, np.zeros_like(theta)) + g
        buffers["v:" + name] = v
        new_params[name] = theta - lr * v
    return new_params, replace(state, step=state.step + 1, buffers=buffers)


def adam_step(params, grads, state: OptimizerState, lr=None):
    _check(params, grads)
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    t = state.step + 1
    new_params, buffers = {}, {}
    for name, theta in params.items():
        g = grads[name] + state.weight_decay * theta
        m = state.buffers.get("m:" + name, np.zeros_like(theta))
        v = state.buffers.get("v:" + name, np.zeros_like(theta))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        buffers["m:" + name] = m
        buffers["v:" + name] = v
    return new_params, replace(state, step=t, buffers=buffers)


def optimizer_step(params, grads, state: OptimizerState, lr=None):
    if state.kind == "sgd_momentum":
        return sgd_momentum_step(params, grads, state, lr)
    if state.kind == "adam":
        return adam_step(params, grads, state, lr)
    raise ConfigError(f"unknown optimizer kind {state.kind!r}")


def cosine_anneal(lr0, t, total, lr_min=0.0):
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi * t / total)) / 2`` for ``0 <= t <= total``."""
    if total < 1:
        raise ValueError(f"total steps must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))
