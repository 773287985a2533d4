import contextlib
import time

import numpy as np
import pytest

from capbandit.model import ArmSpec, Instance, check_instance, sample_arrivals, three_arm_example
from capbandit.offline import brute_force_optimal

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record one acceptance criterion; the body fills ``info['detail']``."""
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        detail = info["detail"] or f"{type(exc).__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[number] = (title, False, f"{detail} [{time.perf_counter() - start:.1f}s]")
        raise
    ACCEPTANCE[number] = (title, True, f"{info['detail']} [{time.perf_counter() - start:.1f}s]")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} -- {detail}")


def random_pmf(rng: np.random.Generator, d_max: int, full_support: bool = False) -> tuple[float, ...]:
    w = rng.random(d_max)
    if not full_support:
        w[rng.random(d_max) < 0.3] = 0.0
        if w.sum() == 0:
            w[rng.integers(d_max)] = 1.0
    return tuple(w / w.sum())


def random_instance(
    rng: np.random.Generator,
    num_arms: int,
    num_players: int,
    d_max: int,
    horizon: int = 1000,
    full_support: bool = False,
) -> Instance:
    arms = tuple(
        ArmSpec(random_pmf(rng, d_max, full_support), float(rng.random())) for _ in range(num_arms)
    )
    return check_instance(Instance(arms, num_players, horizon, d_max))


def tied_instance(rng: np.random.Generator) -> tuple[Instance, list[tuple[int, ...]]]:
    """Instance with several optimal profiles, plus its brute-force optimal set.

    Some arm appears in identical copies. Full-support pmfs keep the positive
    part of every gain row strictly decreasing, and K never exceeds the
    M * d_max positive gains, so ties at rank K only come from the copies.
    """
    while True:
        num_arms = int(rng.integers(3, 6))
        d_max = int(rng.integers(1, 4))
        copies = int(rng.integers(2, num_arms + 1))
        base = ArmSpec(random_pmf(rng, d_max, True), float(rng.uniform(0.3, 1.0)))
        others = [ArmSpec(random_pmf(rng, d_max, True), float(rng.random())) for _ in range(num_arms - copies)]
        arms = [base] * copies + others
        order = rng.permutation(num_arms)
        num_players = int(rng.integers(1, min(6, num_arms * d_max) + 1))
        inst = check_instance(Instance(tuple(arms[i] for i in order), num_players, 1000, d_max))
        optima = sorted(brute_force_optimal(inst)[1])
        if len(optima) > 1:
            return inst, optima


def served_frequency(inst, m, rounds, rng):
    """Simulated probability that one uniformly exploring player is served at arm m."""
    K, M = inst.num_players, inst.num_arms
    choice = rng.integers(M, size=(rounds, K))
    d = sample_arrivals(inst, rng, size=rounds)[:, m]
    mine = choice[:, 0] == m
    others = (choice[:, 1:] == m).sum(axis=1)
    # the player's position in a uniformly random order of the n+1 players at m
    rank = np.floor(rng.random(rounds) * (others + 1))
    return float(np.mean(mine & (rank < d)))


@pytest.fixture
def toy() -> Instance:
    return three_arm_example()
