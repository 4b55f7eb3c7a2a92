"""The private gradient step: Poisson sampling, per-sample clipping, noising.

Noise convention: Gaussian noise with std ``sigma * C`` is added to the SUM of
clipped per-sample gradients and the result is divided by the expected batch
size ``L = q * N``, never by the realised batch size.
"""
from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from privcxr import kernels
from privcxr.accountant import DpSgdConfig, RdpAccountant
from privcxr.nn.layers import NumericalError
from privcxr.nn.loss import weighted_bce_logit_grad
from privcxr.nn.model import ResNet9
from privcxr.nn.optim import NAdamState, nadam_step


@dataclass(frozen=True)
class PerSampleGradients:
    values: np.ndarray  # (B, P)

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"per-sample gradients must be a (B, P) matrix, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def param_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PrivatizedGradient:
    values: np.ndarray
    noise_std_applied: float
    realized_batch_size: int
    rng_stream_id: int


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices 0..n-1 each kept independently with probability ``q`` (ascending)."""
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    return np.flatnonzero(rng.random(n) < q)


def _check_finite(values: np.ndarray) -> None:
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        raise NumericalError(f"non-finite gradient entries in sample {int(np.flatnonzero(bad)[0])}")


def clip_per_sample(grads: PerSampleGradients, clip_norm: float) -> PerSampleGradients:
    if not clip_norm > 0:
        raise ValueError(f"clip norm must be > 0, got {clip_norm}")
    _check_finite(grads.values)
    clipped, _ = kernels.clip_rows(grads.values, float(clip_norm))
    return PerSampleGradients(clipped)


def privatize(
    grads: PerSampleGradients,
    clip_norm: float,
    noise_multiplier: float,
    expected_batch_size: float,
    rng: np.random.Generator,
    rng_stream_id: int = 0,
) -> PrivatizedGradient:
    """(sum_i clip(g_i) + N(0, sigma^2 C^2 I)) / L."""
    if not expected_batch_size > 0:
        raise ValueError(f"expected batch size must be > 0, got {expected_batch_size}")
    if noise_multiplier < 0:
        raise ValueError("noise multiplier must be >= 0")
    if not clip_norm > 0:
        raise ValueError(f"clip norm must be > 0, got {clip_norm}")
    # fused clip + row-ordered sum; a non-finite entry shows up as a non-finite norm
    total, norms = kernels.clip_sum(grads.values, float(clip_norm))
    if not np.isfinite(norms).all():
        _check_finite(grads.values)
        raise NumericalError(f"gradient norm overflow in sample {int(np.flatnonzero(~np.isfinite(norms))[0])}")
    std = noise_multiplier * clip_norm
    noise = rng.normal(0.0, std, size=grads.param_count) if std > 0 else np.zeros(grads.param_count)
    values = (total + noise) / expected_batch_size
    return PrivatizedGradient(values, std / expected_batch_size, grads.batch_size, rng_stream_id)


def per_sample_gradients(
    model: ResNet9,
    x: np.ndarray,
    y: np.ndarray,
    pos_weights: np.ndarray,
    *,
    chunk_size: int | None = None,
    workers: int = 1,
) -> tuple[PerSampleGradients, np.ndarray]:
    """Per-sample gradient matrix and per-sample losses.

    The batch is cut into chunks (default: one per worker); with
    ``workers > 1`` the chunks run on replicas of ``model`` in a thread pool.
    Rows are assembled in sample order and each row depends only on its own
    sample (one GEMM per sample), so the result is bitwise identical for
    every worker count and chunking.
    """
    n = x.shape[0]
    if n == 0:
        return PerSampleGradients(np.zeros((0, model.num_parameters))), np.zeros(0)
    if chunk_size is None:
        chunk_size = -(-n // max(workers, 1))
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def run(replica: ResNet9, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        logits = replica.forward(x[lo:hi])
        losses, dlogits = weighted_bce_logit_grad(logits, y[lo:hi], pos_weights)
        mat = np.empty((hi - lo, replica.num_parameters))
        replica.backward(dlogits, mat)
        return replica.per_sample_grad_matrix(mat), losses

    if workers <= 1 or len(bounds) == 1:
        parts = [run(model, lo, hi) for lo, hi in bounds]
    else:
        # replica r owns chunks r, r + W, r + 2W, ...; layer caches are per replica
        nrep = min(workers, len(bounds))
        replicas = [copy.deepcopy(model) for _ in range(nrep)]

        def run_many(r: int) -> list[tuple[int, tuple[np.ndarray, np.ndarray]]]:
            return [(i, run(replicas[r], *bounds[i])) for i in range(r, len(bounds), nrep)]

        results: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        with ThreadPoolExecutor(max_workers=nrep) as pool:
            for fut in [pool.submit(run_many, r) for r in range(nrep)]:
                results.update(fut.result())
        parts = [results[i] for i in range(len(bounds))]
    if len(parts) == 1:
        return PerSampleGradients(parts[0][0]), parts[0][1]
    grads = np.concatenate([p[0] for p in parts], axis=0)
    losses = np.concatenate([p[1] for p in parts])
    return PerSampleGradients(grads), losses


@dataclass
class StepResult:
    loss: float
    batch_size: int
    noise_std: float


def private_training_step(
    model: ResNet9,
    x: np.ndarray,
    y: np.ndarray,
    pos_weights: np.ndarray,
    config: DpSgdConfig,
    opt_state: NAdamState,
    accountant: RdpAccountant,
    noise_rng: np.random.Generator,
    expected_batch_size: float,
    *,
    workers: int = 1,
    rng_stream_id: int = 0,
) -> StepResult:
    """One DP-SGD/NAdam update on an already Poisson-sampled batch (may be empty)."""
    grads, losses = per_sample_gradients(model, x, y, pos_weights, workers=workers)
    if grads.batch_size == 0:
        grads = PerSampleGradients(np.zeros((0, model.num_parameters)))
    priv = privatize(
        grads, config.clip_norm, config.noise_multiplier, expected_batch_size, noise_rng, rng_stream_id
    )
    model.set_flat(nadam_step(model.get_flat(), priv.values, opt_state))
    accountant.step(config.noise_multiplier, config.sampling_rate)
    loss = float(losses.mean()) if losses.size else float("nan")
    return StepResult(loss, grads.batch_size, priv.noise_std_applied)


def non_private_training_step(
    model: ResNet9,
    x: np.ndarray,
    y: np.ndarray,
    pos_weights: np.ndarray,
    opt_state: NAdamState,
    *,
    per_sample: bool = False,
    workers: int = 1,
) -> StepResult:
    """Plain NAdam step on the batch-mean gradient.

    ``per_sample=True`` averages explicit per-sample rows in row order (the
    exact counterpart of a noiseless, unclipped private step); the default
    uses batch-summed conv gradients, which is faster.
    """
    if x.shape[0] == 0:
        return StepResult(float("nan"), 0, 0.0)
    if per_sample:
        grads, losses = per_sample_gradients(model, x, y, pos_weights, workers=workers)
        _check_finite(grads.values)
        mean = kernels.sum_rows(grads.values) / grads.batch_size
    else:
        model.set_per_sample(False)
        try:
            logits = model.forward(x)
            losses, dlogits = weighted_bce_logit_grad(logits, y, pos_weights)
            model.backward(dlogits)
            mean = model.summed_grad() / x.shape[0]
        finally:
            model.set_per_sample(True)
    model.set_flat(nadam_step(model.get_flat(), mean, opt_state))
    return StepResult(float(losses.mean()), x.shape[0], 0.0)
