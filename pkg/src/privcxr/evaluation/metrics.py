"""Classification metrics, bootstrap spread and the parity statistic."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from privcxr.rng import stream


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (e.g. only one class present)."""


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype != bool:
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be boolean or 0/1")
        y = y.astype(bool)
    return y


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + P(s+ == s-) / 2."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)  # average ranks; exact halves
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class YoudenResult:
    threshold: float
    j: float
    degenerate: bool  # best J <= 0, the score carries no usable ranking


def youden_threshold(scores, labels) -> YoudenResult:
    """Threshold maximising TPR - FPR (predict positive when score >= threshold).

    Candidates are -inf, the midpoints between adjacent distinct scores and
    +inf; ties go to the smallest candidate.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"Youden threshold undefined with {n_pos} positives and {n_neg} negatives")
    u = np.unique(s)
    cands = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    # candidate k (k >= 1, finite) admits exactly the scores >= u[k]
    lower = np.concatenate([[-np.inf], u[1:], [np.inf]])
    tp = n_pos - np.searchsorted(pos_sorted, lower, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, lower, side="left")
    j = tp / n_pos - fp / n_neg
    k = int(np.argmax(j))  # first maximum = smallest threshold
    return YoudenResult(float(cands[k]), float(j[k]), bool(j[k] <= 0))


@dataclass(frozen=True)
class Confusion:
    accuracy: float
    sensitivity: float
    specificity: float


def confusion_metrics(scores, labels, threshold: float) -> Confusion:
    s, y = _check(scores, labels)
    if s.size == 0:
        raise UndefinedMetricError("no samples")
    pred = s >= threshold
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"sensitivity/specificity need both classes ({n_pos} pos, {n_neg} neg)")
    tp = int(np.count_nonzero(pred & y))
    tn = int(np.count_nonzero(~pred & ~y))
    return Confusion((tp + tn) / y.size, tp / n_pos, tn / n_neg)


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    spread: float
    redraws: int
    rejected: int
    values: np.ndarray


def bootstrap(
    metric: Callable[..., float],
    data: Sequence[np.ndarray],
    redraws: int = 1000,
    seed: int = 0,
    *,
    max_undefined: float = 0.5,
) -> BootstrapResult:
    """Resample rows (shared across ``data`` arrays) with replacement.

    Redraws where ``metric`` raises ``UndefinedMetricError`` are rejected and
    drawn again from a fresh substream. Returns the mean and standard
    deviation over accepted redraws. ``metric`` may also return an array,
    in which case mean and spread are per component.
    """
    arrays = [np.asarray(a) for a in data]
    n = len(arrays[0])
    if n == 0:
        raise ValueError("bootstrap needs nonempty data")
    if any(len(a) != n for a in arrays):
        raise ValueError("all bootstrap arrays must share their leading dimension")
    if redraws < 1:
        raise ValueError("redraws must be >= 1")
    values = []
    rejected = 0
    for r in range(redraws):
        attempt = 0
        while True:
            idx = stream(seed, "bootstrap", r, attempt).integers(0, n, size=n)
            try:
                values.append(metric(*(a[idx] for a in arrays)))
                break
            except UndefinedMetricError:
                rejected += 1
                attempt += 1
                if rejected > max_undefined * (rejected + len(values)) and rejected >= 10:
                    raise UndefinedMetricError(
                        f"metric undefined in {rejected} of {rejected + len(values)} bootstrap draws; aborting"
                    ) from None
    v = np.asarray(values, dtype=np.float64)
    return BootstrapResult(v.mean(axis=0), v.std(axis=0), redraws, rejected, v)


def pearson_r(x, y) -> float:
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("x and y differ in length")
    if a.size < 2:
        raise UndefinedMetricError("Pearson's r needs at least 2 points")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("Pearson's r undefined for zero variance")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def spearman_rho(x, y) -> float:
    return pearson_r(rankdata(x), rankdata(y))


def statistical_parity_difference(correct, minority) -> float:
    """P(correct | minority) - P(correct | majority); negative disfavours the minority."""
    c = np.asarray(correct, dtype=bool)
    m = np.asarray(minority, dtype=bool)
    if c.shape != m.shape:
        raise ValueError("correct and group flags must have the same shape")
    if not m.any() or m.all():
        raise UndefinedMetricError("both the minority and the majority group must be nonempty")
    return float(c[m].mean() - c[~m].mean())
