"""ROC/AUC and threshold metrics, including specificity at a minimum sensitivity.

Convention: a bag is predicted positive iff ``score >= threshold``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    accuracy: float
    threshold: float
    auc: Optional[float] = None
    constraint: Optional[float] = None
    precision_undefined: bool = False
    constraint_met: bool = True


def _validate(scores, labels, need_both=True):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        raise DataError("no scores given")
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if need_both and (labels.min() == labels.max()):
        raise DataError("both classes must be present")
    return scores, labels


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    scores, labels = _validate(scores, labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = midranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(P*N) pair counting. Kept as the reference for :func:`auc`."""
    scores, labels = _validate(scores, labels)
    p = scores[labels == 1]
    n = scores[labels == 0]
    wins = 0.0
    for s in p:
        wins += float(np.sum(s > n)) + 0.5 * float(np.sum(s == n))
    return float(wins / (p.size * n.size))


def roc_curve(scores, labels) -> RocCurve:
    """ROC points from (0, 0) at threshold +inf down through every distinct score."""
    scores, labels = _validate(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(1 - y)[last_of_run]
    n_pos, n_neg = tp[-1], fp[-1]
    return RocCurve(
        fpr=np.r_[0.0, fp / n_neg],
        tpr=np.r_[0.0, tp / n_pos],
        thresholds=np.r_[np.inf, s[last_of_run]],
    )


def confusion_at_threshold(scores, labels, t, auc_value=None, constraint=None) -> MetricsReport:
    scores, labels = _validate(scores, labels, need_both=False)
    pred = scores >= t
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    undefined = tp + fp == 0
    prec = 0.0 if undefined else tp / (tp + fp)
    f1 = 0.0 if prec + sens == 0 else 2 * prec * sens / (prec + sens)
    acc = (tp + tn) / labels.size
    return MetricsReport(
        sensitivity=sens,
        specificity=spec,
        precision=prec,
        f1=f1,
        accuracy=acc,
        threshold=float(t),
        auc=auc_value,
        constraint=constraint,
        precision_undefined=undefined,
    )


def spec_at_min_sens(scores, labels, s_min) -> MetricsReport:
    """Metrics at the largest threshold whose sensitivity is at least ``s_min``.

    Candidate thresholds are +inf and every distinct score. If none qualifies
    (only possible for ``s_min > 1``) the threshold is -inf and
    ``constraint_met`` is False.
    """
    scores, labels = _validate(scores, labels)
    a = auc(scores, labels)
    for t in np.r_[np.inf, np.unique(scores)[::-1]]:
        rep = confusion_at_threshold(scores, labels, t, auc_value=a, constraint=s_min)
        if rep.sensitivity >= s_min:
            return rep
    rep = confusion_at_threshold(scores, labels, -np.inf, auc_value=a, constraint=s_min)
    return MetricsReport(**{**rep.__dict__, "constraint_met": False})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "inf" if v == math.inf else "-inf" if v == -math.inf else repr(v)
    return str(v)


def metrics_rows(scores, labels, s_min_list=(0.90, 0.95), threshold=0.5):
    """Rows of ``(metric, value, constraint)`` for the metrics CSV."""
    a = auc(scores, labels)
    rows = [("auc", a, "")]
    reports = [(f"threshold={threshold:g}", confusion_at_threshold(scores, labels, threshold, a))]
    reports += [(f"sens>={s:.2f}", spec_at_min_sens(scores, labels, s)) for s in s_min_list]
    for tag, rep in reports:
        for name in ("sensitivity", "specificity", "precision", "f1", "accuracy", "threshold"):
            rows.append((name, getattr(rep, name), tag))
        rows.append(("precision_undefined", rep.precision_undefined, tag))
        if rep.constraint is not None:
            rows.append(("constraint_met", rep.constraint_met, tag))
    return rows


def write_metrics_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "constraint"])
        for metric, value, constraint in rows:
            w.writerow([metric, _fmt(value), constraint])
    return path


def write_roc_csv(path, curve: RocCurve) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in curve.points:
            w.writerow([_fmt(f), _fmt(t), _fmt(th)])
    return path
