"""Direct-formula reference implementations, deliberately naive."""
import numpy as np


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def youden_sweep(scores, labels) -> tuple[float, float]:
    """Best J and its smallest threshold over all candidates."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    u = sorted(set(s.tolist()))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [np.inf]
    best_j, best_t = -np.inf, None
    for t in cands:
        pred = s >= t
        j = (pred & y).sum() / y.sum() - (pred & ~y).sum() / (~y).sum()
        if j > best_j:
            best_j, best_t = j, t
    return best_j, best_t


def pearson_formula(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def parity(correct, minority) -> float:
    mn = [c for c, m in zip(correct, minority) if m]
    mj = [c for c, m in zip(correct, minority) if not m]
    return sum(mn) / len(mn) - sum(mj) / len(mj)
