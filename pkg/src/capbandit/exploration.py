"""Uniform exploration: per-player estimators, service probabilities and
the exploration-length formulas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import Instance
from .offline import tails_for_players


@dataclass
class EstimatorState:
    """One player's running sums during exploration.

    ``tail_counts[m, d-1]`` counts rounds in which at least ``d`` requests
    arrived at arm ``m``. Arrivals are public, so every player holds the same
    tail counts; reward sums differ through each player's own service history.
    """

    num_arms: int
    d_max: int
    reward_sums: NDArray[np.float64] = field(init=False)
    serve_counts: NDArray[np.int_] = field(init=False)
    rounds_elapsed: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.reward_sums = np.zeros(self.num_arms)
        self.serve_counts = np.zeros(self.num_arms, dtype=np.int64)
        # arrival histogram; tail counts are its reverse cumulative sum
        self._arrival_counts = np.zeros((self.num_arms, self.d_max), dtype=np.int64)
        self._rows = np.arange(self.num_arms)

    @property
    def tail_counts(self) -> NDArray[np.int_]:
        return np.cumsum(self._arrival_counts[:, ::-1], axis=1)[:, ::-1]

    def update(self, arm: int, arrivals: NDArray[np.int_], reward: float | None) -> "EstimatorState":
        if reward is not None and not math.isnan(reward):
            self.reward_sums[arm] += reward
            self.serve_counts[arm] += 1
        self._arrival_counts[self._rows, np.asarray(arrivals) - 1] += 1
        self.rounds_elapsed += 1
        return self

    def finalize(self) -> "Estimates":
        if self.rounds_elapsed == 0:
            raise ValueError("no exploration rounds recorded")
        with np.errstate(invalid="ignore", divide="ignore"):
            mu_hat = np.where(self.serve_counts > 0, self.reward_sums / self.serve_counts, np.nan)
        return Estimates(mu_hat=mu_hat, tail_hat=self.tail_counts / self.rounds_elapsed)


@dataclass
class Estimates:
    """``mu_hat[m]`` is NaN for arms the player was never served at."""

    mu_hat: NDArray[np.float64]
    tail_hat: NDArray[np.float64]

    @property
    def missing(self) -> NDArray[np.bool_]:
        return np.isnan(self.mu_hat)

    def greedy_inputs(self, num_players: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Means (missing treated as 0) and a ``(M, K)`` tail matrix for the greedy optimizer."""
        return np.nan_to_num(self.mu_hat, nan=0.0), tails_for_players(self.tail_hat, num_players)


def service_probability(inst: Instance, m: int) -> float:
    """Chance that a uniformly exploring player is served at arm ``m`` in a round.

    The player picks ``m`` with probability ``1/M``; the other ``K-1``
    players land there as a Binomial(K-1, 1/M) count ``n``, and with ``d``
    requests each of the ``n+1`` players is served with probability
    ``min(1, d/(n+1))``.
    """
    M, K = inst.num_arms, inst.num_players
    n = np.arange(K)
    q = 1.0 / M
    weights = np.array([math.comb(K - 1, int(i)) * q**i * (1 - q) ** (K - 1 - i) for i in n])
    d = np.arange(1, inst.d_max + 1)
    serve = np.minimum(1.0, d[:, None] / (n[None, :] + 1))
    return float(q * inst.pmf_matrix[m] @ serve @ weights)


def service_probabilities(inst: Instance) -> NDArray[np.float64]:
    return np.array([service_probability(inst, m) for m in range(inst.num_arms)])


@dataclass(frozen=True)
class ConfidenceParams:
    delta1: float
    delta2: float
    t0: int
    service_probs: NDArray[np.float64]
    eps_tail: float
    eps_mean: NDArray[np.float64]
    success_lower_bound: float


def confidence_bounds(
    delta1: float,
    delta2: float,
    t0: int,
    service_probs: Sequence[float] | NDArray[np.float64],
    num_players: int,
) -> ConfidenceParams:
    """Deviation radii for tail and mean estimates after ``t0`` exploration rounds,
    with the probability lower bound that all of them hold for every player."""
    if not (0 < delta1 < 1 and 0 < delta2 < 1):
        raise ValueError("delta1 and delta2 must lie in (0, 1)")
    if t0 < 1:
        raise ValueError("t0 must be >= 1")
    c = np.asarray(service_probs, dtype=float)
    M, K = c.size, num_players
    eps_tail = math.sqrt(math.log(1 / delta1) / (2 * t0))
    eps_mean = np.sqrt(math.log(1 / delta2) / (c * t0))
    success = 1 - M * K * delta1 - M * K * delta2 - K * float(np.exp(-t0 * c / 8).sum())
    return ConfidenceParams(delta1, delta2, t0, c, eps_tail, eps_mean, success)


def _ceil(x: float) -> int:
    # absorb rounding noise such as 160.00000000000003
    return math.ceil(x - 1e-9 * max(1.0, abs(x)))


def _t0_for_arm(log1: float, log2: float, gamma: float, c: float) -> float:
    """Smallest real T0 with eps_mean + eps_tail + eps_mean * eps_tail <= gamma / 2.

    Algebraically identical to the printed closed form
    ``(2/c) L1 L2 / (sqrt(0.5 L1 + L2/c + (2+2g)(2c)^-1/2 sqrt(L1 L2)) - sqrt(0.5 L1) - sqrt(L2/c))^2``
    but written without the cancelling square-root difference.
    """
    if math.isinf(gamma):
        return 0.0
    a = math.sqrt(0.5 * log1)
    b = math.sqrt(log2 / c)
    s = a + b
    return ((s + math.sqrt(s * s + 2 * gamma * a * b)) / gamma) ** 2


def _check_gap(gamma: float, c: NDArray[np.float64]) -> None:
    if not gamma > 0:
        raise ValueError(f"exploration length needs gamma > 0, got {gamma}")
    if np.any(c <= 0):
        raise ValueError("service probabilities must be positive")


def exploration_length(
    delta1: float, delta2: float, gamma: float, service_probs: Sequence[float] | NDArray[np.float64]
) -> int:
    c = np.asarray(service_probs, dtype=float)
    _check_gap(gamma, c)
    log1, log2 = math.log(1 / delta1), math.log(1 / delta2)
    return _ceil(max(_t0_for_arm(log1, log2, gamma, cm) for cm in c))


def exploration_length_log(horizon: int, gamma: float, service_probs: Sequence[float] | NDArray[np.float64]) -> int:
    """Exploration length giving logarithmic regret (both confidences set to 1/T)."""
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    c = np.asarray(service_probs, dtype=float)
    _check_gap(gamma, c)
    log_t = math.log(horizon)
    accuracy = max(_t0_for_arm(log_t, log_t, gamma, cm) for cm in c)
    coverage = float(np.max(8 * log_t / c))
    return _ceil(max(accuracy, coverage))
