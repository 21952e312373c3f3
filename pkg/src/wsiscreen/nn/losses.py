"""Binary cross-entropy and the InfoNCE contrastive loss."""

from __future__ import annotations

import numpy as np

from ..errors import DataError, ShapeError

BCE_EPS = 1e-7


def bce_loss(y_hat, y, eps=BCE_EPS):
    """Negative Bernoulli log-likelihood of ``y`` under probability ``y_hat``.

    Returns ``(loss, dloss/dy_hat)``. ``y_hat`` is clamped to ``[eps, 1 - eps]``;
    the gradient is zero where the clamp is active.
    """
    if y not in (0, 1):
        raise DataError(f"bce target must be 0 or 1, got {y!r}")
    p_raw = float(y_hat)
    p = min(max(p_raw, eps), 1.0 - eps)
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    if p != p_raw:
        return float(loss), 0.0
    grad = -y / p + (1 - y) / (1.0 - p)
    return float(loss), float(grad)


def adjacent_pairing(n):
    """Partner index for interleaved views: 0<->1, 2<->3, ..."""
    if n % 2:
        raise ShapeError(f"need an even number of views, got {n}")
    return np.arange(n) ^ 1


def _check_pairing(pair, n):
    pair = np.asarray(pair, dtype=np.int64)
    if pair.shape != (n,):
        raise DataError(f"pairing has shape {pair.shape}, expected ({n},)")
    if np.any(pair < 0) or np.any(pair >= n):
        raise DataError("pairing index out of range")
    idx = np.arange(n)
    if np.any(pair == idx) or np.any(pair[pair] != idx):
        raise DataError("pairing must be a fixed-point-free involution")
    return pair


def info_nce_loss(z, pair=None, tau=0.5, need_grad=True):
    """InfoNCE over ``2M`` projections with cosine similarity and temperature ``tau``.

    ``pair[j]`` is the index of the other view of the same source image
    (defaults to adjacent interleaving). Returns ``(loss, dz)``; ``dz`` is None
    when ``need_grad`` is false.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeError(f"need a (2M, D') matrix with 2M >= 2, got shape {z.shape}")
    n = z.shape[0]
    if tau <= 0:
        raise DataError("temperature must be > 0")
    pair = adjacent_pairing(n) if pair is None else _check_pairing(pair, n)

    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise DataError("zero-norm projection vector; cosine similarity undefined")
    u = z / norms[:, None]
    logits = (u @ u.T) / tau
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - row_max)
    denom = e.sum(axis=1)
    rows = np.arange(n)
    log_prob_pos = logits[rows, pair] - row_max[:, 0] - np.log(denom)
    loss = -log_prob_pos.mean()
    if not need_grad:
        return float(loss), None

    p = e / denom[:, None]
    p[rows, pair] -= 1.0
    ds = p / n
    du = (ds + ds.T) @ u / tau
    dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms[:, None]
    return float(loss), dz
