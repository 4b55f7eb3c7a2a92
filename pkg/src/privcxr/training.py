"""Training loops for private (DP-SGD) and non-private runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from privcxr.accountant import DpSgdConfig, RdpAccountant
from privcxr.data.preprocess import augment
from privcxr.dp_engine import non_private_training_step, poisson_sample, private_training_step
from privcxr.nn.model import ResNet9
from privcxr.nn.optim import NAdamState
from privcxr.rng import STREAMS, stream

log = logging.getLogger(__name__)


class BudgetExceededError(RuntimeError):
    def __init__(self, step: int, epsilon: float, target: float) -> None:
        super().__init__(f"privacy budget exceeded at step {step}: epsilon {epsilon:.6g} > target {target:.6g}")
        self.step, self.epsilon, self.target = step, epsilon, target


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)
    steps: int = 0


def train_private(
    model: ResNet9,
    x: np.ndarray,
    y: np.ndarray,
    pos_weights: np.ndarray,
    config: DpSgdConfig,
    *,
    lr: float,
    seed: int,
    target_epsilon: float | None = None,
    workers: int = 1,
    accountant: RdpAccountant | None = None,
    callback: Callable[[int, TrainLog], None] | None = None,
) -> tuple[TrainLog, RdpAccountant]:
    """Run ``config.steps`` DP-SGD steps with Poisson batches of expected size q*N.

    Step t draws its batch from the ``sampling`` substream (seed, t) and its
    noise from the ``noise`` substream (seed, t). If ``target_epsilon`` is set,
    the run aborts as soon as the accountant's epsilon exceeds it.
    """
    n = x.shape[0]
    expected = config.sampling_rate * n
    acc = accountant if accountant is not None else RdpAccountant()
    state = NAdamState.fresh(model.num_parameters, lr)
    tlog = TrainLog()
    for t in range(config.steps):
        idx = poisson_sample(n, config.sampling_rate, stream(seed, "sampling", t))
        res = private_training_step(
            model, x[idx], y[idx], pos_weights, config, state, acc,
            stream(seed, "noise", t), expected, workers=workers, rng_stream_id=STREAMS["noise"],
        )
        tlog.losses.append(res.loss)
        tlog.batch_sizes.append(res.batch_size)
        tlog.steps += 1
        if target_epsilon is not None and config.noise_multiplier > 0:
            eps = acc.get_epsilon(config.target_delta)
            if eps > target_epsilon:
                raise BudgetExceededError(t + 1, eps, target_epsilon)
        if callback is not None:
            callback(t, tlog)
    return tlog, acc


def train_non_private(
    model: ResNet9,
    images: np.ndarray,
    y: np.ndarray,
    pos_weights: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    augmentation: bool,
    to_input: Callable[[np.ndarray], np.ndarray],
    workers: int = 1,
    callback: Callable[[int, TrainLog], None] | None = None,
) -> TrainLog:
    """Shuffled mini-batch NAdam. ``images`` are (N, H, W) preprocessed images;
    augmentation is applied per sample with the (seed, epoch, index) substream."""
    n = images.shape[0]
    state = NAdamState.fresh(model.num_parameters, lr)
    tlog = TrainLog()
    for epoch in range(epochs):
        order = stream(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if augmentation:
                batch = np.stack([augment(images[i], stream(seed, "augment", epoch, int(i)), True) for i in idx])
            else:
                batch = images[idx]
            res = non_private_training_step(model, to_input(batch), y[idx], pos_weights, state, workers=workers)
            tlog.losses.append(res.loss)
            tlog.batch_sizes.append(res.batch_size)
            tlog.steps += 1
            if callback is not None:
                callback(tlog.steps - 1, tlog)
    return tlog


def predict_scores(model: ResNet9, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    if x.shape[0] == 0:
        return np.zeros((0, model.config.num_labels))
    return np.concatenate([model.predict_proba(x[s : s + chunk]) for s in range(0, x.shape[0], chunk)])
