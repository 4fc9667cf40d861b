"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Per-step RDP at integer order ``a`` with sampling rate ``q`` and noise
multiplier ``sigma``::

    1/(a-1) * log( sum_k C(a,k) (1-q)^(a-k) q^k exp((k^2 - k) / (2 sigma^2)) )

evaluated in log space. Steps compose additively per order; the (eps, delta)
conversion is ``eps = min_a rdp(a) + log(1/delta) / (a - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import CalibrationError, ParameterError

DEFAULT_ORDERS: Tuple[int, ...] = tuple(range(2, 65)) + (128, 256)


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _logsumexp(terms: Sequence[float]) -> float:
    m = max(terms)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(t - m) for t in terms))


def _check(q: float, sigma: float, alpha: int) -> None:
    if not (0.0 <= q <= 1.0):
        raise ParameterError(f"sampling rate must lie in [0, 1], got {q}")
    if int(alpha) != alpha or alpha < 2:
        raise ParameterError(f"RDP order must be an integer >= 2, got {alpha}")
    if q > 0 and not sigma > 0:
        raise ParameterError(f"noise multiplier must be > 0 when q > 0, got {sigma}")


@lru_cache(maxsize=65536)
def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    _check(q, sigma, alpha)
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    two_var = 2.0 * sigma ** 2
    terms = [_log_comb(alpha, k) + k * log_q + (alpha - k) * log_1mq + (k * k - k) / two_var
             for k in range(alpha + 1)]
    # the sum is >= 1 mathematically (k=0,1 terms alone give 1); clamp rounding
    return max(0.0, _logsumexp(terms) / (alpha - 1))


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    return np.array([rdp_subsampled_gaussian(float(q), float(sigma), int(a)) for a in orders])


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    best_order: int


@dataclass
class RdpAccountant:
    """Append-only history of ``(sigma, q, steps)`` records."""

    orders: Tuple[int, ...] = DEFAULT_ORDERS
    history: List[Tuple[float, float, int]] = field(default_factory=list)

    def __post_init__(self):
        self.orders = tuple(int(a) for a in self.orders)
        if not self.orders or min(self.orders) < 2 or list(self.orders) != sorted(set(self.orders)):
            raise ParameterError("orders must be ascending distinct integers >= 2")

    def step(self, noise_multiplier: float, sample_rate: float, num_steps: int = 1) -> None:
        if num_steps < 0:
            raise ParameterError("num_steps must be non-negative")
        _check(sample_rate, noise_multiplier, self.orders[0])
        if self.history and self.history[-1][:2] == (noise_multiplier, sample_rate):
            s, q, n = self.history[-1]
            self.history[-1] = (s, q, n + num_steps)
        else:
            self.history.append((float(noise_multiplier), float(sample_rate), int(num_steps)))

    @property
    def steps(self) -> int:
        return sum(n for _, _, n in self.history)

    def rdp(self) -> np.ndarray:
        return compose(self)

    def get_privacy_spent(self, delta: float) -> PrivacyBudget:
        return to_epsilon(self.rdp(), delta, self.orders)

    def get_epsilon(self, delta: float) -> float:
        return self.get_privacy_spent(delta).epsilon


def compose(acct: RdpAccountant) -> np.ndarray:
    total = np.zeros(len(acct.orders))
    for sigma, q, n in sorted(acct.history):
        if n:
            total += n * rdp_curve(q, sigma, acct.orders)
    return total


def to_epsilon(rdp: Sequence[float], delta: float,
               orders: Sequence[int] = DEFAULT_ORDERS) -> PrivacyBudget:
    if not (0.0 < delta < 1.0):
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    rdp = np.asarray(rdp, dtype=np.float64)
    orders = np.asarray(orders, dtype=np.float64)
    if rdp.shape != orders.shape:
        raise ParameterError(f"{rdp.size} RDP values for {orders.size} orders")
    if np.any(rdp < 0) or not np.all(np.isfinite(rdp)):
        raise ParameterError("RDP curve must be finite and non-negative")
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return PrivacyBudget(float(max(eps[i], 0.0)), float(delta), int(orders[i]))


def epsilon_for(sigma: float, q: float, steps: int, delta: float,
                orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    return to_epsilon(steps * rdp_curve(q, sigma, orders), delta, orders).epsilon


def get_noise_multiplier(target_epsilon: float, delta: float, sample_rate: float, steps: int,
                         orders: Sequence[int] = DEFAULT_ORDERS, sigma_min: float = 0.01,
                         sigma_max: float = 100.0, tol: float = 1e-3) -> float:
    """Smallest sigma (to within ``tol``) whose spent epsilon is at most the target.

    The returned sigma satisfies ``eps(sigma) <= target < eps(sigma - tol)``
    unless it is ``sigma_min`` itself.
    """
    if not target_epsilon > 0:
        raise ParameterError("target epsilon must be > 0")

    def eps(s):
        return epsilon_for(s, sample_rate, steps, delta, orders)

    if eps(sigma_max) > target_epsilon:
        raise CalibrationError(f"target epsilon {target_epsilon} unreachable: "
                               f"eps at sigma_max={sigma_max} is {eps(sigma_max):.6g}")
    if eps(sigma_min) <= target_epsilon:
        return sigma_min
    lo, hi = sigma_min, sigma_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def epsilon_trace(records: Iterable[Tuple[float, float]], delta: float,
                  orders: Sequence[int] = DEFAULT_ORDERS,
                  every: int = 1) -> List[Tuple[int, float, float, float, int]]:
    """Running ``(step, sigma, q, epsilon, best_order)`` rows for a per-step ``(sigma, q)`` sequence."""
    total = np.zeros(len(orders))
    rows = []
    records = list(records)
    for step, (sigma, q) in enumerate(records, start=1):
        total = total + rdp_curve(q, sigma, orders)
        if step % every == 0 or step == len(records):
            b = to_epsilon(total, delta, orders)
            rows.append((step, sigma, q, b.epsilon, b.best_order))
    return rows
