"""Central finite-difference oracle for hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (parameter name, index tuple)

    def ok(self, tol=1e-4) -> bool:
        return self.max_rel_error < tol


def numeric_gradient(loss_fn, params, eps=1e-3):
    """Central differences of ``loss_fn(params)`` for every coordinate of every array."""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            f_plus = loss_fn(work)
            arr[idx] = orig - eps
            f_minus = loss_fn(work)
            arr[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {name}{list(idx)}")
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
        out[name] = g
    return out


def grad_check(loss_fn, params, analytic, eps=1e-3) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences.

    Relative error per coordinate is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    numeric = numeric_gradient(loss_fn, params, eps)
    worst_err, worst = 0.0, ("", ())
    for name, gn in numeric.items():
        ga = np.asarray(analytic[name], dtype=np.float64).reshape(gn.shape)
        rel = np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
        i = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        if rel.size and rel[i] > worst_err:
            worst_err, worst = float(rel[i]), (name, tuple(int(v) for v in i))
    return GradCheckReport(worst_err, worst)
