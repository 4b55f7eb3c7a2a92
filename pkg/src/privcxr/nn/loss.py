"""Label-weighted binary cross-entropy on sigmoid outputs."""
from __future__ import annotations

import numpy as np

from privcxr.nn.model import sigmoid

PROB_CLAMP = 1e-7


def inverse_frequency_weights(targets: np.ndarray) -> np.ndarray:
    """Positive-class weights #negatives / #positives per label.

    Labels without positives (or without negatives) fall back to weight 1.
    """
    t = np.asarray(targets, dtype=bool)
    pos = t.sum(axis=0).astype(float)
    neg = t.shape[0] - pos
    w = np.ones(t.shape[1])
    ok = (pos > 0) & (neg > 0)
    w[ok] = neg[ok] / pos[ok]
    return w


def _check(probs: np.ndarray, targets: np.ndarray, pos_weights: np.ndarray) -> None:
    if probs.shape != targets.shape:
        raise ValueError(f"probabilities {probs.shape} and targets {targets.shape} differ in shape")
    if pos_weights.shape != (probs.shape[1],):
        raise ValueError(f"need one positive weight per label ({probs.shape[1]}), got {pos_weights.shape}")
    if np.any(pos_weights <= 0):
        raise ValueError("positive-class weights must be > 0")


def weighted_bce(
    probs: np.ndarray, targets: np.ndarray, pos_weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss and per-sample losses (each averaged over labels).

    term = -[w * y * log(p) + (1 - y) * log(1 - p)], p clamped to [1e-7, 1 - 1e-7].
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(pos_weights, dtype=np.float64)
    _check(probs, y, w)
    p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    terms = -(w * y * np.log(p) + (1 - y) * np.log1p(-p))
    per_sample = terms.mean(axis=1)
    return float(per_sample.mean()), per_sample


def weighted_bce_logit_grad(
    logits: np.ndarray, targets: np.ndarray, pos_weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d(loss_i)/d(logits_i) for every sample i.

    Row i is the gradient of sample i's own loss (mean over labels), not of
    the batch mean. Where the clamp is active the gradient is zero.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(pos_weights, dtype=np.float64)
    p = sigmoid(z)
    _, per_sample = weighted_bce(p, y, w)
    grad = (-w * y * (1 - p) + (1 - y) * p) / z.shape[1]
    clamped = (p < PROB_CLAMP) | (p > 1 - PROB_CLAMP)
    grad[clamped] = 0.0
    return per_sample, grad
