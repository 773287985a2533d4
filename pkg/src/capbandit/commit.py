"""Distributed commit protocol.

Every uncommitted player draws an arm in proportion to how many players
the arm still lacks. A player commits to its arm as soon as the published
count at that arm does not exceed the target, and never moves again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import Instance, Profile, RoundOutcome, allocate_and_reward, profile_of, sample_arrivals


class ProtocolViolation(RuntimeError):
    """An uncommitted player found no arm lacking players."""


@dataclass
class CommitState:
    target: NDArray[np.int_]
    committed_arm: int | None = None
    committed_counts: NDArray[np.int_] = field(default=None)  # type: ignore[assignment]
    start_round: int = 0

    def __post_init__(self) -> None:
        self.target = np.asarray(self.target, dtype=np.int64)
        if self.committed_counts is None:
            self.committed_counts = np.zeros_like(self.target)

    @property
    def deficits(self) -> NDArray[np.int_]:
        return self.target - self.committed_counts

    @property
    def total_deficit(self) -> int:
        return int(self.deficits.sum())

    @property
    def committed(self) -> bool:
        return self.committed_arm is not None

    def select_action(self, rng: np.random.Generator) -> int:
        if self.committed_arm is not None:
            return self.committed_arm
        lacking = self.deficits
        total = int(lacking.sum())
        if total <= 0:
            raise ProtocolViolation("uncommitted player sees no arm lacking players")
        u = rng.random() * total
        return int(np.searchsorted(np.cumsum(lacking), u, side="right"))

    def update(self, action: int, pulls: Sequence[int] | NDArray[np.int_]) -> "CommitState":
        pulls = np.asarray(pulls, dtype=np.int64)
        if self.committed_arm is None and pulls[action] <= self.target[action]:
            self.committed_arm = int(action)
        fits = pulls <= self.target
        self.committed_counts = np.where(fits, pulls, self.committed_counts)
        return self


def expected_commit_bound(target: Sequence[int], num_players: int) -> float:
    """Closed-form bound on the expected number of rounds until everyone commits."""
    if sum(target) != num_players:
        raise ValueError("target must place exactly K players")
    total = 0.0
    k = num_players
    for n in target:
        n = int(n)
        q = n / k
        # Python evaluates 0.0 ** 0 as 1.0, matching the 0^0 = 1 convention
        prob = math.comb(k, n) * q**n * (1.0 - q) ** (k - n)
        total += 1.0 / prob
    return total


@dataclass
class CommitResult:
    rounds: int
    completed: bool
    profile: Profile
    outcomes: list[RoundOutcome]
    committed_log: list[NDArray[np.int_]]
    violations: int = 0


def run_commit_phase(
    inst: Instance,
    states: Sequence[CommitState],
    rng: np.random.Generator,
    player_rngs: Sequence[np.random.Generator] | None = None,
    max_rounds: int | None = None,
    strict: bool = True,
) -> CommitResult:
    """Run the protocol until every player has committed or ``max_rounds`` elapse.

    ``rng`` drives arrivals and allocation; each player draws its own arm from
    ``player_rngs[k]`` (or from ``rng`` when none are given). With
    ``strict=False`` a player hitting a :class:`ProtocolViolation` (possible
    only when players hold different targets) pulls a uniformly random arm.
    """
    limit = inst.horizon if max_rounds is None else max_rounds
    draws = player_rngs if player_rngs is not None else [rng] * len(states)
    outcomes: list[RoundOutcome] = []
    committed_log: list[NDArray[np.int_]] = []
    violations = 0
    rounds = 0
    while rounds < limit and not all(s.committed for s in states):
        actions = np.empty(len(states), dtype=np.int64)
        for k, state in enumerate(states):
            try:
                actions[k] = state.select_action(draws[k])
            except ProtocolViolation:
                if strict:
                    raise
                violations += 1
                actions[k] = draws[k].integers(inst.num_arms)
        outcome = allocate_and_reward(inst, sample_arrivals(inst, rng), actions, rng)
        for k, state in enumerate(states):
            state.update(int(actions[k]), outcome.pulls)
        outcomes.append(outcome)
        committed_log.append(np.bincount(
            [s.committed_arm for s in states if s.committed_arm is not None], minlength=inst.num_arms
        ))
        rounds += 1
    completed = all(s.committed for s in states)
    if outcomes:
        profile = profile_of(outcomes[-1].actions, inst.num_arms)
    else:
        profile = profile_of([s.committed_arm for s in states if s.committed_arm is not None], inst.num_arms)
    return CommitResult(rounds, completed, profile, outcomes, committed_log, violations)
