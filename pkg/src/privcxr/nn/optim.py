"""NAdam on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class NAdamState:
    """Moment estimates and schedule state; defaults follow the usual NAdam settings."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_decay: float = 4e-3
    step: int = 0
    mu_product: float = 1.0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, num_params: int, lr: float, **kwargs) -> NAdamState:
        return cls(lr=lr, m=np.zeros(num_params), v=np.zeros(num_params), **kwargs)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "momentum_decay", "step")}


def nadam_step(params: np.ndarray, grad: np.ndarray, state: NAdamState) -> np.ndarray:
    """Apply one NAdam update; mutates ``state`` and returns the new parameters.

    mu_t = beta1 * (1 - 0.5 * 0.96 ** (t * momentum_decay)); the bias
    correction of the first moment uses the running product of mu_t.
    """
    if params.shape != grad.shape:
        raise ValueError(f"parameter shape {params.shape} != gradient shape {grad.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ValueError("optimizer state does not match the parameter vector")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    mu = b1 * (1.0 - 0.5 * 0.96 ** (t * state.momentum_decay))
    mu_next = b1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * state.momentum_decay))
    state.mu_product *= mu
    mu_product_next = state.mu_product * mu_next

    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    denom = np.sqrt(state.v / (1.0 - b2**t)) + state.eps

    out = params - state.lr * (1.0 - mu) / (1.0 - state.mu_product) * grad / denom
    out = out - state.lr * mu_next / (1.0 - mu_product_next) * state.m / denom
    return out
