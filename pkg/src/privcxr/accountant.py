"""RDP accounting for the Poisson-subsampled Gaussian mechanism.

The per-step bound follows the sampled Gaussian mechanism analysis used by
the common DP-SGD libraries: for integer orders the moment ``A_alpha`` is a
finite binomial sum, for fractional orders it is a two-sided series with
Gaussian tail factors. Everything is evaluated in log space.

Conversion to ``(epsilon, delta)`` uses the tightened bound

    eps = rdp - (log(delta) + log(alpha)) / (alpha - 1) + log((alpha - 1) / alpha)

minimised over the order grid.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "DEFAULT_ORDERS",
    "CalibrationError",
    "DpSgdConfig",
    "PrivacyBudget",
    "RdpAccountant",
    "RdpCurve",
    "calibrate_sigma",
    "compose",
    "epsilon_for",
    "rdp_subsampled_gaussian",
    "to_epsilon",
]

# dense low orders, then every integer up to 64
DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75, 2.0, 2.5) + tuple(
    float(a) for a in range(3, 65)
)


class CalibrationError(ValueError):
    """Raised when no noise multiplier in the search bracket hits the target."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    order: float | None = None

    def __post_init__(self) -> None:
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RdpCurve:
    """Renyi divergence bounds ``values[i]`` at ``orders[i]``."""

    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        orders = tuple(float(a) for a in self.orders)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "values", values)
        if len(orders) != len(values):
            raise ValueError("orders and values must have equal length")
        if any(a <= 1 for a in orders):
            raise ValueError("all RDP orders must be > 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("orders must be strictly increasing")
        if any(not v >= 0 for v in values):
            raise ValueError("RDP values must be nonnegative")

    def __len__(self) -> int:
        return len(self.orders)

    def __add__(self, other: RdpCurve) -> RdpCurve:
        if not isinstance(other, RdpCurve):
            return NotImplemented
        if self.orders != other.orders:
            raise ValueError("can only compose curves over identical orders")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.values, other.values)))

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.orders, dtype=float), np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class DpSgdConfig:
    """Mechanism parameters of one private training run."""

    sampling_rate: float
    noise_multiplier: float
    clip_norm: float
    steps: int
    target_delta: float

    def __post_init__(self) -> None:
        if not 0 < self.sampling_rate <= 1:
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not 0 < self.target_delta < 1:
            raise ValueError(f"target_delta must lie in (0, 1), got {self.target_delta}")


def _log_add(logx: float, logy: float) -> float:
    a, b = min(logx, logy), max(logx, logy)
    if a == -math.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_sub(logx: float, logy: float) -> float:
    if logx < logy:
        raise ValueError("log-space subtraction would go negative")
    if logy == -math.inf:
        return logx
    if logx == logy:
        return -math.inf
    try:
        return math.log(math.expm1(logx - logy)) + logy
    except OverflowError:
        return logx


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=float)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # two tails split at z0; the series converges once both terms drop below e^-30
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30:
            break
    return _log_add(log_a0, log_a1)


def _rdp_single(q: float, sigma: float, alpha: float) -> float:
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a / (alpha - 1), 0.0)


def rdp_subsampled_gaussian(
    q: float, sigma: float, orders: Iterable[float] = DEFAULT_ORDERS
) -> RdpCurve:
    """Per-step RDP of the Gaussian mechanism under Poisson sampling at rate ``q``.

    ``sigma`` is the noise multiplier (noise std over l2 sensitivity).
    """
    orders = tuple(float(a) for a in orders)
    if not sigma > 0:
        raise ValueError("noise multiplier must be > 0; sigma = 0 has unbounded privacy loss")
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must lie in (0, 1], got {q}")
    if any(a <= 1 for a in orders):
        raise ValueError("all RDP orders must be > 1")
    return _rdp_cached(float(q), float(sigma), orders)


@functools.lru_cache(maxsize=256)
def _rdp_cached(q: float, sigma: float, orders: tuple[float, ...]) -> RdpCurve:
    return RdpCurve(orders, tuple(_rdp_single(q, sigma, a) for a in orders))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    """Self-compose ``curve`` ``steps`` times (RDP adds linearly)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def _epsilons(orders: np.ndarray, values: np.ndarray, delta: float) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        return (
            values
            - (math.log(delta) + np.log(orders)) / (orders - 1)
            + np.log((orders - 1) / orders)
        )


def to_epsilon(curve: RdpCurve, delta: float) -> PrivacyBudget:
    """Best ``(epsilon, delta)`` guarantee implied by ``curve`` over its orders.

    Negative conversions (possible for a nearly vacuous curve with ``delta``
    close to 1) are clamped to zero.
    """
    if len(curve) == 0:
        raise ValueError("cannot convert an empty RDP curve")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    orders, values = curve.as_arrays()
    eps = _epsilons(orders, values, delta)
    if np.isnan(eps).all():
        return PrivacyBudget(math.inf, delta, None)
    idx = int(np.nanargmin(eps))
    return PrivacyBudget(max(float(eps[idx]), 0.0), delta, float(orders[idx]))


def epsilon_for(
    q: float,
    sigma: float,
    steps: int,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> PrivacyBudget:
    return to_epsilon(compose(rdp_subsampled_gaussian(q, sigma, orders), steps), delta)


def calibrate_sigma(
    target_epsilon: float,
    q: float,
    steps: int,
    delta: float,
    *,
    orders: Sequence[float] = DEFAULT_ORDERS,
    tol: float = 1e-3,
    sigma_bounds: tuple[float, float] = (1e-2, 1e4),
    max_iter: int = 200,
) -> float:
    """Smallest-found noise multiplier whose epsilon lands in ``[target*(1-tol), target]``.

    Bisects in log(sigma). The returned sigma always satisfies the target;
    it is never rounded towards less noise.
    """
    if not target_epsilon > 0:
        raise ValueError(f"target epsilon must be > 0, got {target_epsilon}")
    lo, hi = sigma_bounds

    def eps(sigma: float) -> float:
        return epsilon_for(q, sigma, steps, delta, orders).epsilon

    eps_hi = eps(hi)
    if eps_hi > target_epsilon:
        raise CalibrationError(
            f"target epsilon {target_epsilon} unreachable: sigma={hi:g} still gives {eps_hi:.6g}"
        )
    if target_epsilon * (1 - tol) <= eps_hi:
        return hi
    eps_lo = eps(lo)
    if eps_lo <= target_epsilon:
        if eps_lo >= target_epsilon * (1 - tol):
            return lo
        raise CalibrationError(
            f"target epsilon {target_epsilon} unreachable: sigma={lo:g} already gives {eps_lo:.6g}"
        )
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        e = eps(mid)
        if e <= target_epsilon:
            hi = mid
            if e >= target_epsilon * (1 - tol):
                return mid
        else:
            lo = mid
    raise CalibrationError(
        f"bisection did not reach relative tolerance {tol} for epsilon {target_epsilon}"
    )


@dataclass
class RdpAccountant:
    """Running privacy ledger of a training run.

    Each entry in ``history`` is ``[noise_multiplier, sampling_rate, steps]``;
    consecutive steps with identical mechanism parameters are merged.
    """

    orders: tuple[float, ...] = DEFAULT_ORDERS
    history: list[list[float]] = field(default_factory=list)

    def step(self, noise_multiplier: float, sampling_rate: float) -> None:
        if self.history and self.history[-1][:2] == [noise_multiplier, sampling_rate]:
            self.history[-1][2] += 1
        else:
            self.history.append([noise_multiplier, sampling_rate, 1])

    @property
    def steps(self) -> int:
        return int(sum(h[2] for h in self.history))

    def curve(self) -> RdpCurve:
        total = RdpCurve(self.orders, (0.0,) * len(self.orders))
        for sigma, q, steps in self.history:
            if sigma == 0:
                # noiseless steps: no finite guarantee
                return RdpCurve(self.orders, (math.inf,) * len(self.orders))
            total = total + compose(rdp_subsampled_gaussian(q, sigma, self.orders), int(steps))
        return total

    def get_privacy_spent(self, delta: float) -> PrivacyBudget:
        if not self.history:
            return PrivacyBudget(0.0, delta, None)
        return to_epsilon(self.curve(), delta)

    def get_epsilon(self, delta: float) -> float:
        return self.get_privacy_spent(delta).epsilon
