"""Arms, players, requests and the platform's allocation semantics.

Arms are indexed ``0..M-1`` and request counts live on ``1..d_max``; a pmf
is stored as a vector whose entry ``d - 1`` is ``P[D = d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

REWARD_FAMILIES = ("normal", "point", "bernoulli")
PMF_ATOL = 1e-9

Profile = tuple[int, ...]
AllocationPolicy = Callable[[NDArray[np.int_], NDArray[np.int_], np.random.Generator], NDArray[np.bool_]]


class InvalidInstance(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _std_normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _std_normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ArmSpec:
    """One arm: request-count pmf plus the per-request reward law.

    ``reward_mean`` is the location of the reward family (the normal's mean,
    the point mass, or the Bernoulli success probability). Samples are
    clamped into ``[0, 1]``, so for a wide normal near a boundary the actual
    mean reward differs slightly from the location; use ``expected_reward``
    wherever the true mean is needed.
    """

    pmf: tuple[float, ...]
    reward_mean: float
    reward_family: str = "point"
    reward_spread: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "pmf", tuple(float(p) for p in self.pmf))
        object.__setattr__(self, "reward_mean", float(self.reward_mean))
        object.__setattr__(self, "reward_spread", float(self.reward_spread))

    @classmethod
    def point_mass(cls, requests: int, reward: float, d_max: int | None = None) -> "ArmSpec":
        """Arm with a deterministic request count and deterministic reward."""
        width = d_max if d_max is not None else requests
        pmf = [0.0] * width
        pmf[requests - 1] = 1.0
        return cls(pmf=tuple(pmf), reward_mean=reward, reward_family="point")

    @property
    def expected_reward(self) -> float:
        mu, sigma = self.reward_mean, self.reward_spread
        if self.reward_family == "bernoulli":
            return mu
        if self.reward_family == "point" or sigma == 0.0:
            return min(1.0, max(0.0, mu))
        # mean of clip(N(mu, sigma^2), 0, 1)
        lo, hi = (0.0 - mu) / sigma, (1.0 - mu) / sigma
        inside = mu * (_std_normal_cdf(hi) - _std_normal_cdf(lo)) - sigma * (
            _std_normal_pdf(hi) - _std_normal_pdf(lo)
        )
        return inside + (1.0 - _std_normal_cdf(hi))


@dataclass(frozen=True)
class Instance:
    """The bandit world: M arms, K players, horizon T, request support 1..d_max."""

    arms: tuple[ArmSpec, ...]
    num_players: int
    horizon: int
    d_max: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "arms", tuple(self.arms))

    @property
    def num_arms(self) -> int:
        return len(self.arms)

    @cached_property
    def pmf_matrix(self) -> NDArray[np.float64]:
        """``(M, d_max)`` matrix with entry ``[m, d-1] = p_{m,d}``."""
        out = np.zeros((self.num_arms, self.d_max))
        for m, arm in enumerate(self.arms):
            width = min(len(arm.pmf), self.d_max)
            out[m, :width] = arm.pmf[:width]
        return out

    @cached_property
    def cdf_matrix(self) -> NDArray[np.float64]:
        return np.cumsum(self.pmf_matrix, axis=1)

    @cached_property
    def tail_matrix(self) -> NDArray[np.float64]:
        """``(M, d_max + 1)`` matrix with entry ``[m, d-1] = P[D_m >= d]``."""
        return np.vstack([tail_mass(row) for row in self.pmf_matrix])

    @cached_property
    def means(self) -> NDArray[np.float64]:
        return np.array([arm.expected_reward for arm in self.arms])

    @cached_property
    def _reward_params(self) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.int_]]:
        loc = np.array([arm.reward_mean for arm in self.arms])
        spread = np.array([arm.reward_spread for arm in self.arms])
        family = np.array([REWARD_FAMILIES.index(arm.reward_family) for arm in self.arms])
        return loc, spread, family


def validate_instance(inst: Instance) -> list[str]:
    """Return every violated invariant; an empty list means the instance is valid."""
    problems: list[str] = []
    if inst.num_arms < 1:
        problems.append("instance needs at least one arm (M >= 1)")
    if inst.num_players < 1:
        problems.append(f"num_players must be >= 1, got {inst.num_players}")
    if inst.horizon < 1:
        problems.append(f"horizon must be >= 1, got {inst.horizon}")
    if inst.d_max < 1:
        problems.append(f"d_max must be >= 1, got {inst.d_max}")
    for m, arm in enumerate(inst.arms):
        pmf = np.asarray(arm.pmf, dtype=float)
        if pmf.size == 0:
            problems.append(f"arm {m}: empty pmf")
            continue
        if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
            problems.append(f"arm {m}: pmf has negative or non-finite entries")
        total = float(pmf.sum())
        if abs(total - 1.0) > PMF_ATOL:
            problems.append(f"arm {m}: pmf sums to {total:.12g}, expected 1")
        if pmf.size > inst.d_max and np.any(pmf[inst.d_max:] > 0):
            problems.append(f"arm {m}: pmf has mass beyond d_max={inst.d_max}")
        if not 0.0 <= arm.reward_mean <= 1.0:
            problems.append(f"arm {m}: reward_mean {arm.reward_mean} outside [0, 1]")
        if arm.reward_family not in REWARD_FAMILIES:
            problems.append(f"arm {m}: unknown reward family {arm.reward_family!r}")
        if arm.reward_spread < 0 or not math.isfinite(arm.reward_spread):
            problems.append(f"arm {m}: reward_spread must be finite and >= 0")
    return problems


def check_instance(inst: Instance) -> Instance:
    problems = validate_instance(inst)
    if problems:
        raise InvalidInstance(problems)
    return inst


def tail_mass(pmf: Sequence[float] | NDArray[np.float64]) -> NDArray[np.float64]:
    """Tail probabilities ``P[D >= d]`` for ``d = 1..d_max+1``.

    The first entry is pinned to 1 (support starts at one request) and the
    last is 0.
    """
    p = np.asarray(pmf, dtype=float)
    tail = np.zeros(p.size + 1)
    tail[:-1] = np.cumsum(p[::-1])[::-1]
    tail[0] = 1.0
    return np.minimum(tail, 1.0)


def sample_arrivals(inst: Instance, rng: np.random.Generator, size: int | None = None) -> NDArray[np.int_]:
    """Draw request counts for every arm by inverse-CDF sampling.

    Returns shape ``(M,)``, or ``(size, M)`` when ``size`` rounds are drawn at once.
    """
    cdf = inst.cdf_matrix
    if size is None:
        u = rng.random(inst.num_arms)
        d = (cdf <= u[:, None]).sum(axis=1) + 1
    else:
        u = rng.random((size, inst.num_arms))
        d = (cdf[None, :, :] <= u[:, :, None]).sum(axis=2) + 1
    # a cdf that tops out at 1 - eps must not push a draw past d_max
    return np.minimum(d, inst.d_max)


def uniform_allocation(
    actions: NDArray[np.int_], arrivals: NDArray[np.int_], rng: np.random.Generator
) -> NDArray[np.bool_]:
    """Serve ``min(n, d)`` of the ``n`` players at each arm, chosen uniformly without replacement."""
    k = actions.size
    keys = rng.random(k)
    order = np.lexsort((keys, actions))
    sorted_arms = actions[order]
    rank = np.arange(k) - np.searchsorted(sorted_arms, sorted_arms, side="left")
    served = np.empty(k, dtype=bool)
    served[order] = rank < arrivals[sorted_arms]
    return served


def sample_rewards(inst: Instance, arms: NDArray[np.int_], rng: np.random.Generator) -> NDArray[np.float64]:
    """One IID reward per entry of ``arms`` from that arm's law, clamped to [0, 1]."""
    loc, spread, family = inst._reward_params
    loc, spread, family = loc[arms], spread[arms], family[arms]
    z = rng.standard_normal(arms.size)
    u = rng.random(arms.size)
    out = np.where(
        family == 0,
        loc + spread * z,
        np.where(family == 2, (u < loc).astype(float), loc),
    )
    return np.clip(out, 0.0, 1.0)


@dataclass
class RoundOutcome:
    """Public and private information produced by one round.

    ``rewards[k]`` is NaN when player ``k`` was idle; a served player with a
    zero reward carries ``0.0``.
    """

    arrivals: NDArray[np.int_]
    pulls: NDArray[np.int_]
    rewards: NDArray[np.float64]
    served_per_arm: NDArray[np.int_]
    actions: NDArray[np.int_] = field(repr=False, default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def served(self) -> NDArray[np.bool_]:
        return ~np.isnan(self.rewards)

    def reward_of(self, player: int) -> float | None:
        r = self.rewards[player]
        return None if np.isnan(r) else float(r)

    @property
    def total_reward(self) -> float:
        return float(np.nansum(self.rewards))


def allocate_and_reward(
    inst: Instance,
    arrivals: NDArray[np.int_],
    actions: Sequence[int] | NDArray[np.int_],
    rng: np.random.Generator,
    policy: AllocationPolicy = uniform_allocation,
) -> RoundOutcome:
    actions = np.asarray(actions, dtype=np.int64)
    arrivals = np.asarray(arrivals, dtype=np.int64)
    if actions.size and (actions.min() < 0 or actions.max() >= inst.num_arms):
        raise ValueError(f"actions must be arm indices in [0, {inst.num_arms})")
    pulls = np.bincount(actions, minlength=inst.num_arms)
    served = policy(actions, arrivals, rng)
    rewards = np.full(actions.size, np.nan)
    rewards[served] = sample_rewards(inst, actions[served], rng)
    return RoundOutcome(
        arrivals=arrivals,
        pulls=pulls,
        rewards=rewards,
        served_per_arm=np.minimum(arrivals, pulls),
        actions=actions,
    )


def fixed_profile_rewards(
    inst: Instance, profile: Sequence[int], rounds: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Total realized reward per round when the pull profile never changes.

    Which players get served is irrelevant to the total, so only the served
    count ``min(n_m, D_m)`` per arm is drawn.
    """
    counts = np.asarray(profile, dtype=np.int64)
    if rounds <= 0:
        return np.zeros(0)
    arrivals = sample_arrivals(inst, rng, size=rounds)
    served = np.minimum(arrivals, counts[None, :])
    per_round = served.sum(axis=1)
    arm_ids = np.repeat(np.tile(np.arange(inst.num_arms), rounds), served.ravel())
    rewards = sample_rewards(inst, arm_ids, rng)
    round_ids = np.repeat(np.arange(rounds), per_round)
    return np.bincount(round_ids, weights=rewards, minlength=rounds)


def profile_of(actions: Sequence[int] | NDArray[np.int_], num_arms: int) -> Profile:
    return tuple(int(c) for c in np.bincount(np.asarray(actions, dtype=np.int64), minlength=num_arms))


def three_arm_example() -> Instance:
    """Three arms, two players; two/two/one requests with rewards 0.2/0.2/0.3."""
    return Instance(
        arms=(
            ArmSpec.point_mass(2, 0.2, d_max=2),
            ArmSpec.point_mass(2, 0.2, d_max=2),
            ArmSpec.point_mass(1, 0.3, d_max=2),
        ),
        num_players=2,
        horizon=500,
        d_max=2,
    )
