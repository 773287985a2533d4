"""Consensus on one optimal profile in exactly M signalling rounds.

In round ``r`` each player pulls arm ``estimate[r] mod M``, so the published
pull counts reveal whether players disagree on arm ``r``. Optimal profiles
differ by at most one player per arm, so a disagreement shows up either as
two adjacent occupied arms or, when the counts straddle a multiple of M, as
the first and last arm. Players then drop the disputed slots and add the
same number back on the highest-indexed disputed arms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import Instance, Profile, RoundOutcome, allocate_and_reward, sample_arrivals

log = logging.getLogger(__name__)


class ConsensusError(RuntimeError):
    pass


@dataclass
class ConsensusState:
    estimate: NDArray[np.int_]
    board_arms: list[int] = field(default_factory=list)
    board_elems: set[tuple[int, int]] = field(default_factory=set)
    removed_count: int = 0

    def __post_init__(self) -> None:
        self.estimate = np.array(self.estimate, dtype=np.int64)

    @property
    def num_arms(self) -> int:
        return self.estimate.size

    def action(self, r: int) -> int:
        """Arm that encodes this player's count for arm ``r``."""
        return int(self.estimate[r] % self.num_arms)

    def observe(self, r: int, pulls: Sequence[int] | NDArray[np.int_]) -> "ConsensusState":
        occupied = np.flatnonzero(np.asarray(pulls) > 0)
        if occupied.size > 2:
            log.debug("consensus round %d: %d distinct counts for one arm", r, occupied.size)
        lo, hi = int(occupied[0]), int(occupied[-1])
        span = hi - lo
        if span == 0:
            return self
        own = self.action(r)
        # adjacent: the lower encoded arm holds the smaller count;
        # wraparound: the last arm holds the smaller count
        smaller_side = lo if span == 1 else hi
        self.board_arms.append(r)
        self.board_elems.add((r, int(self.estimate[r]) + int(own == smaller_side)))
        return self

    def finalize(self) -> Profile:
        estimate = self.estimate.copy()
        removed = 0
        for m in range(self.num_arms):
            if (m, int(estimate[m])) in self.board_elems:
                estimate[m] -= 1
                removed += 1
        if removed > len(self.board_arms):
            raise ConsensusError(f"removed {removed} slots but only {len(self.board_arms)} arms disputed")
        for m in sorted(self.board_arms, reverse=True)[:removed]:
            estimate[m] += 1
        self.removed_count = removed
        return tuple(int(c) for c in estimate)


@dataclass
class ConsensusResult:
    profiles: list[Profile]
    rounds: int
    outcomes: list[RoundOutcome]
    states: list[ConsensusState]

    @property
    def agreed(self) -> bool:
        return len(set(self.profiles)) == 1


def run_consensus_phase(
    inst: Instance, estimates: Sequence[Sequence[int]], rng: np.random.Generator
) -> ConsensusResult:
    """Play the M signalling rounds for all players and finalize each estimate.

    ``rng`` drives arrivals and allocation; the signalling rounds are real
    pulls and earn (unoptimised) rewards.
    """
    if inst.num_arms < 3:
        raise ValueError(f"consensus needs at least 3 arms, got M={inst.num_arms}")
    if len(estimates) != inst.num_players:
        raise ValueError("need one estimate per player")
    states = [ConsensusState(e) for e in estimates]
    for s in states:
        if int(s.estimate.sum()) != inst.num_players or s.num_arms != inst.num_arms:
            raise ValueError(f"estimate {tuple(s.estimate)} is not a profile of K={inst.num_players} players")
    outcomes = []
    for r in range(inst.num_arms):
        actions = np.array([s.action(r) for s in states], dtype=np.int64)
        outcome = allocate_and_reward(inst, sample_arrivals(inst, rng), actions, rng)
        for s in states:
            s.observe(r, outcome.pulls)
        outcomes.append(outcome)
    profiles = [s.finalize() for s in states]
    if len({s.removed_count for s in states}) > 1:
        log.info("players removed different numbers of borderline slots")
    if len(set(profiles)) > 1:
        log.info("consensus failed: %d distinct profiles", len(set(profiles)))
    return ConsensusResult(profiles, inst.num_arms, outcomes, states)
