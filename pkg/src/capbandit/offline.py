"""Offline optimisation of the arm pulling profile.

Expected utilities, marginal gains, the greedy optimizer, an exhaustive
oracle and the gap analysis around the K-th largest gain.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import ArmSpec, Instance, Profile

BRUTE_FORCE_LIMIT = 10**6
UTILITY_RTOL = 1e-12


def expected_utility_arm(n: int, arm: ArmSpec) -> float:
    """Expected reward collected by ``n`` players sharing ``arm``: ``mu * E[min(n, D)]``."""
    if n < 0:
        raise ValueError("player count must be non-negative")
    if n == 0:
        return 0.0
    pmf = np.asarray(arm.pmf, dtype=float)
    d = np.arange(1, pmf.size + 1)
    return arm.expected_reward * float(np.dot(pmf, np.minimum(n, d)))


def utility_table(inst: Instance, max_players: int | None = None) -> NDArray[np.float64]:
    """``(M, max_players + 1)`` table of per-arm expected utilities for 0..max_players players."""
    kmax = inst.num_players if max_players is None else max_players
    n = np.arange(kmax + 1)
    d = np.arange(1, inst.d_max + 1)
    expected_served = inst.pmf_matrix @ np.minimum(n[None, :], d[:, None])
    return inst.means[:, None] * expected_served


def expected_utility_profile(profile: Sequence[int], inst: Instance) -> float:
    counts = [int(c) for c in profile]
    if len(counts) != inst.num_arms:
        raise ValueError(f"profile has {len(counts)} entries, instance has {inst.num_arms} arms")
    if any(c < 0 for c in counts) or sum(counts) != inst.num_players:
        raise ValueError(f"profile {tuple(counts)} does not place exactly K={inst.num_players} players")
    return float(sum(expected_utility_arm(c, arm) for c, arm in zip(counts, inst.arms)))


def marginal_gain(m: int, n: int, inst: Instance) -> float:
    """Gain from adding an (n+1)-th player to arm ``m``: ``mu_m * P[D_m >= n+1]``."""
    if not 0 <= n <= inst.num_players - 1:
        raise ValueError(f"n must lie in [0, K-1], got {n}")
    tail = inst.tail_matrix[m]
    return float(inst.means[m] * (tail[n] if n < tail.size else 0.0))


def tails_for_players(tails: NDArray[np.float64], num_players: int) -> NDArray[np.float64]:
    """Crop or zero-pad a tail matrix to ``num_players`` columns (``P_{m,1..K}``)."""
    tails = np.asarray(tails, dtype=float)
    out = np.zeros((tails.shape[0], num_players))
    width = min(num_players, tails.shape[1])
    out[:, :width] = tails[:, :width]
    return out


@dataclass(frozen=True)
class GainTable:
    """Entry ``gains[m, n]`` is the marginal gain of the (n+1)-th player on arm ``m``."""

    gains: NDArray[np.float64]

    @property
    def num_arms(self) -> int:
        return self.gains.shape[0]

    @property
    def num_players(self) -> int:
        return self.gains.shape[1]


def gain_table_from(means: NDArray[np.float64], tails: NDArray[np.float64], num_players: int) -> GainTable:
    return GainTable(np.asarray(means, dtype=float)[:, None] * tails_for_players(tails, num_players))


def build_gain_table(inst: Instance) -> GainTable:
    return gain_table_from(inst.means, inst.tail_matrix, inst.num_players)


def greedy_profile(
    means: Sequence[float] | NDArray[np.float64],
    tails: NDArray[np.float64],
    num_players: int,
    arm_order: Sequence[int] | None = None,
    trace: list[tuple[int, float, int]] | None = None,
) -> Profile:
    """Add players one at a time to the arm with the largest marginal gain.

    Args:
        means: mean reward per arm.
        tails: tail matrix with ``tails[m, j] = P[D_m >= j + 1]``; missing
            columns are treated as zero.
        num_players: K.
        arm_order: tie-breaking priority, earliest wins. Defaults to the
            smallest arm index, which every player must share for their
            outputs to coincide.
        trace: if given, receives ``(arm, gain, candidates_scanned)`` per step.
    """
    mu = np.asarray(means, dtype=float)
    ptilde = tails_for_players(tails, num_players)
    num_arms = mu.size
    order = np.arange(num_arms) if arm_order is None else np.asarray(arm_order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(num_arms)):
        raise ValueError("arm_order must be a permutation of the arm indices")

    counts = np.zeros(num_arms, dtype=np.int64)
    current = mu * ptilde[:, 0] if num_players > 0 else mu.copy()
    for _ in range(num_players):
        pick = int(order[np.argmax(current[order])])
        gain = float(current[pick])
        counts[pick] += 1
        n = counts[pick]
        current[pick] = mu[pick] * ptilde[pick, n] if n < num_players else 0.0
        if trace is not None:
            trace.append((pick, gain, num_arms))
    return tuple(int(c) for c in counts)


def optimal_profile(inst: Instance) -> Profile:
    return greedy_profile(inst.means, inst.tail_matrix, inst.num_players)


def _compositions(total: int, parts: int):
    # stars and bars
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        out = []
        for b in bars:
            out.append(b - prev - 1)
            prev = b
        out.append(total + parts - 1 - prev - 1)
        yield tuple(out)


def brute_force_optimal(inst: Instance, limit: int = BRUTE_FORCE_LIMIT) -> tuple[float, set[Profile]]:
    """Enumerate every profile; return the optimum and all profiles attaining it.

    Profiles within a relative ``1e-12`` of the best utility count as optimal,
    since sums over different arms are computed in different orders.
    """
    size = math.comb(inst.num_arms + inst.num_players - 1, inst.num_arms - 1)
    if size > limit:
        raise ValueError(f"{size} profiles exceed the enumeration limit {limit}")
    table = utility_table(inst)
    arms = np.arange(inst.num_arms)
    profiles = list(_compositions(inst.num_players, inst.num_arms))
    values = np.array([table[arms, list(p)].sum() for p in profiles])
    best = float(values.max())
    tol = UTILITY_RTOL * max(1.0, abs(best))
    return best, {p for p, v in zip(profiles, values) if best - v <= tol}


@dataclass(frozen=True)
class RankedGains:
    sorted: NDArray[np.float64]
    kth_value: float
    ell_minus: int
    ell_plus: int
    gamma: float
    borderline: frozenset[tuple[int, int]]


def ranked_gains(table: GainTable, num_players: int | None = None) -> RankedGains:
    """Rank all ``K * M`` gains and describe the ties and gap around rank K.

    Borderline elements are reported as ``(arm, count)`` where ``count = n + 1``
    is the number of players on the arm once that slot is filled. Ties use
    exact equality. When no gain exists below the tied block the lower gap
    uses 0; when none exists above it the upper gap is infinite.
    """
    k = table.num_players if num_players is None else num_players
    flat = np.sort(table.gains.ravel())[::-1]
    if not 1 <= k <= flat.size:
        raise ValueError(f"rank K={k} outside 1..{flat.size}")
    kth = float(flat[k - 1])
    ell_minus = int(np.count_nonzero(flat[k:] == kth))
    ell_plus = int(np.count_nonzero(flat[: k - 1] == kth))
    below = k + ell_minus  # 0-based index of rank K + ell_minus + 1
    lower = float(flat[below]) if below < flat.size else 0.0
    above = k - ell_plus - 2  # 0-based index of rank K - ell_plus - 1
    upper = float(flat[above]) if above >= 0 else math.inf
    gamma = min(kth - lower, upper - kth)
    arms, slots = np.nonzero(table.gains == kth)
    borderline = frozenset((int(m), int(n) + 1) for m, n in zip(arms, slots))
    return RankedGains(flat, kth, ell_minus, ell_plus, gamma, borderline)
