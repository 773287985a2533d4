"""End-to-end runs: explore, estimate, agree, commit, stick; plus the two
average-reward baselines, regret traces and Monte Carlo aggregation."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .commit import CommitState, run_commit_phase
from .consensus import run_consensus_phase
from .exploration import EstimatorState, exploration_length_log, service_probabilities
from .model import (
    ArmSpec,
    Instance,
    Profile,
    allocate_and_reward,
    check_instance,
    fixed_profile_rewards,
    sample_arrivals,
)
from .offline import build_gain_table, greedy_profile, optimal_profile, ranked_gains, utility_table

log = logging.getLogger(__name__)

ALGORITHMS = ("etc", "maxavg", "softmax")
_T0_FRACTION = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*T\s*$")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Experiment parameters; defaults reproduce the full-scale setup.

    ``t0`` is an integer round count, a fraction of the horizon written
    like ``"0.1T"``, or ``"auto"`` for the logarithmic-regret length computed
    from the true instance.
    """

    num_arms: int = 50
    num_players: int = 150
    horizon: int = 10_000
    d_max: int = 50
    sigma: float = 0.1
    t0: int | str = "0.1T"
    algo: str = "all"
    repeats: int = 120
    seed: int = 0
    delta1: float = 0.01
    delta2: float = 0.01
    temperature: float = 1.0
    workers: int = 1
    instance: Instance | None = field(default=None, repr=False, compare=False)

    @property
    def algorithms(self) -> tuple[str, ...]:
        return ALGORITHMS if self.algo == "all" else (self.algo,)

    def build_instance(self) -> Instance:
        if self.instance is not None:
            return self.instance
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0,)))
        return generate_instance(self.num_arms, self.num_players, self.horizon, self.d_max, self.sigma, rng)

    def fixed_t0(self) -> int | None:
        """T0 when it does not depend on the instance, else None."""
        if isinstance(self.t0, bool):
            raise ConfigError(f"t0: expected an integer, a fraction like 0.1T, or auto; got {self.t0!r}")
        if isinstance(self.t0, (int, np.integer)):
            return int(self.t0)
        text = str(self.t0).strip()
        if text == "auto":
            return None
        match = _T0_FRACTION.match(text)
        if match:
            return int(round(float(match.group(1)) * self.horizon))
        if text.isdigit():
            return int(text)
        raise ConfigError(f"t0: expected an integer, a fraction like 0.1T, or auto; got {self.t0!r}")

    def resolve_t0(self, inst: Instance | None = None) -> int:
        t0 = self.fixed_t0()
        if t0 is not None:
            return t0
        inst = inst if inst is not None else self.build_instance()
        gamma = ranked_gains(build_gain_table(inst)).gamma
        if not gamma > 0:
            raise ConfigError("t0=auto needs a positive gain gap; this instance has none")
        return exploration_length_log(inst.horizon, gamma, service_probabilities(inst))

    def problems(self) -> list[str]:
        out = []
        for name in ("num_arms", "num_players", "horizon", "d_max", "repeats", "workers"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.sigma < 0:
            out.append(f"sigma: must be >= 0, got {self.sigma}")
        if self.algo not in ALGORITHMS + ("all",):
            out.append(f"algo: must be one of {', '.join(ALGORITHMS + ('all',))}, got {self.algo!r}")
        if not 0 < self.delta1 < 1 or not 0 < self.delta2 < 1:
            out.append("delta1/delta2: must lie in (0, 1)")
        if self.temperature <= 0:
            out.append(f"temperature: must be > 0, got {self.temperature}")
        if self.seed < 0 or self.seed >= 2**64:
            out.append(f"seed: must be an unsigned 64-bit integer, got {self.seed}")
        try:
            t0 = self.fixed_t0()
        except ConfigError as exc:
            out.append(str(exc))
        else:
            if t0 is not None:
                if t0 < 0:
                    out.append(f"t0: must be >= 0, got {t0}")
                elif t0 == 0 and "etc" in self.algorithms:
                    out.append("t0: the etc algorithm needs at least one exploration round")
                if "etc" in self.algorithms and t0 + self.num_arms >= self.horizon:
                    out.append(f"t0: T0 + M = {t0 + self.num_arms} must be < T = {self.horizon}")
            if "etc" in self.algorithms and self.num_arms < 3:
                out.append("num_arms: the etc algorithm needs M >= 3")
        return out

    def validated(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "instance"}


def generate_instance(
    num_arms: int, num_players: int, horizon: int, d_max: int, sigma: float, rng: np.random.Generator
) -> Instance:
    """Random instance: uniform mean rewards, normalised uniform request pmfs, clamped normal rewards."""
    means = rng.random(num_arms)
    arms = []
    for m in range(num_arms):
        weights = rng.random(d_max)
        arms.append(ArmSpec(tuple(weights / weights.sum()), float(means[m]), "normal", sigma))
    return check_instance(Instance(tuple(arms), num_players, horizon, d_max))


@dataclass
class RegretTrace:
    """Per-round record of one run.

    Regret uses the analytic expected utility of the profile actually played
    each round; ``reward`` is the realized total reward and is noisy.
    """

    algorithm: str
    expected_utility: NDArray[np.float64]
    optimal_utility: float
    reward: NDArray[np.float64]
    phases: list[tuple[str, int]]
    final_profile: Profile
    t0: int = 0
    commit_rounds: int | None = None
    commit_completed: bool | None = None
    targets_agreed: bool | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def gaps(self) -> NDArray[np.float64]:
        return self.optimal_utility - self.expected_utility

    @property
    def cum_regret(self) -> NDArray[np.float64]:
        return np.cumsum(self.gaps)

    @property
    def cum_reward(self) -> NDArray[np.float64]:
        return np.cumsum(self.reward)

    @property
    def regret(self) -> float:
        return regret_of(self)

    def phase_labels(self) -> list[str]:
        return [label for label, n in self.phases for _ in range(n)]

    def phase_end(self, label: str) -> int | None:
        """Number of rounds elapsed when phase ``label`` ends."""
        t = 0
        for name, n in self.phases:
            t += n
            if name == label:
                return t
        return None


def regret_of(trace: RegretTrace) -> float:
    return float(np.sum(trace.optimal_utility - trace.expected_utility))


def _streams(config: ExperimentConfig, algorithm: str, repeat: int, players: int):
    ss = np.random.SeedSequence(config.seed, spawn_key=(1, ALGORITHMS.index(algorithm), repeat))
    env_ss, *player_ss = ss.spawn(1 + players)
    return np.random.default_rng(env_ss), [np.random.default_rng(s) for s in player_ss]


class _Recorder:
    def __init__(self, inst: Instance):
        self.table = utility_table(inst)
        self.arm_index = np.arange(inst.num_arms)
        self.utility = np.zeros(inst.horizon)
        self.reward = np.zeros(inst.horizon)
        self.t = 0

    def utility_of(self, profile) -> float:
        return float(self.table[self.arm_index, np.asarray(profile)].sum())

    def round(self, outcome) -> None:
        self.utility[self.t] = self.utility_of(outcome.pulls)
        self.reward[self.t] = outcome.total_reward
        self.t += 1

    def fixed(self, profile, rewards: NDArray[np.float64]) -> None:
        n = rewards.size
        self.utility[self.t : self.t + n] = self.utility_of(profile)
        self.reward[self.t : self.t + n] = rewards
        self.t += n


def _true_optimum(inst: Instance) -> tuple[Profile, float]:
    n_star = optimal_profile(inst)
    table = utility_table(inst)
    return n_star, float(table[np.arange(inst.num_arms), list(n_star)].sum())


def run_etc(
    config: ExperimentConfig,
    repeat: int = 0,
    instance: Instance | None = None,
    known_model: bool = False,
) -> RegretTrace:
    """One run of explore / estimate / consensus / commit / stick.

    With ``known_model=True`` exploration is skipped and every player plugs the
    true means and tails into the greedy optimizer (a test hook).
    """
    inst = instance if instance is not None else config.build_instance()
    M, K, T = inst.num_arms, inst.num_players, inst.horizon
    if M < 3:
        raise ValueError("etc needs at least 3 arms")
    t0 = 0 if known_model else config.resolve_t0(inst)
    if t0 + M >= T:
        raise ValueError(f"T0 + M = {t0 + M} leaves no room in horizon T = {T}")
    env, players = _streams(config, "etc", repeat, K)
    rec = _Recorder(inst)
    n_star, u_star = _true_optimum(inst)

    if known_model:
        targets = [greedy_profile(inst.means, inst.tail_matrix, K)] * K
    else:
        estimators = [EstimatorState(M, inst.d_max) for _ in range(K)]
        choices = np.stack([p.integers(M, size=t0) for p in players], axis=1)
        for t in range(t0):
            outcome = allocate_and_reward(inst, sample_arrivals(inst, env), choices[t], env)
            rec.round(outcome)
            for k, est in enumerate(estimators):
                est.update(int(choices[t, k]), outcome.arrivals, outcome.rewards[k])
        targets = []
        missing = 0
        for est in estimators:
            estimates = est.finalize()
            missing += int(estimates.missing.sum())
            targets.append(greedy_profile(*estimates.greedy_inputs(K), K))

    consensus = run_consensus_phase(inst, targets, env)
    for outcome in consensus.outcomes:
        rec.round(outcome)

    states = [CommitState(target=p, start_round=t0 + M) for p in consensus.profiles]
    commit = run_commit_phase(inst, states, env, players, max_rounds=T - t0 - M, strict=False)
    for outcome in commit.outcomes:
        rec.round(outcome)
    remaining = T - rec.t
    rec.fixed(commit.profile, fixed_profile_rewards(inst, commit.profile, remaining, env))

    diagnostics = {
        "distinct_estimates": len(set(targets)),
        "protocol_violations": commit.violations,
    }
    if not known_model:
        diagnostics["missing_means"] = missing
    if not commit.completed:
        log.warning("commit phase did not finish within the horizon (repeat %d)", repeat)
    return RegretTrace(
        algorithm="etc",
        expected_utility=rec.utility,
        optimal_utility=u_star,
        reward=rec.reward,
        phases=[("explore", t0), ("consensus", M), ("commit", commit.rounds), ("committed", remaining)],
        final_profile=commit.profile,
        t0=t0,
        commit_rounds=commit.rounds,
        commit_completed=commit.completed,
        targets_agreed=consensus.agreed,
        diagnostics=diagnostics,
    )


def _update_averages(averages, sums, counts, actions, outcome):
    """Fold served rewards into per-player averages; idle rounds give no sample."""
    who = np.flatnonzero(outcome.served)
    arm = actions[who]
    sums[who, arm] += outcome.rewards[who]
    counts[who, arm] += 1
    averages[who, arm] = sums[who, arm] / counts[who, arm]
    return who, arm


def run_baseline_maxavg(config: ExperimentConfig, repeat: int = 0, instance: Instance | None = None) -> RegretTrace:
    """Every player pulls the arm with its largest average served reward.

    Players first spend M rounds visiting arms round-robin from offset
    ``k mod M``. Idle rounds yield no sample, unsampled arms average 0,
    ties go to the smallest index.
    """
    inst = instance if instance is not None else config.build_instance()
    M, K, T = inst.num_arms, inst.num_players, inst.horizon
    env, _ = _streams(config, "maxavg", repeat, 0)
    rec = _Recorder(inst)
    _, u_star = _true_optimum(inst)
    sums, counts, averages = np.zeros((K, M)), np.zeros((K, M)), np.zeros((K, M))
    players = np.arange(K)
    warmup = min(M, T)
    for t in range(T):
        if t < warmup:
            actions = (players + t) % M
        else:
            actions = np.argmax(averages, axis=1)
        outcome = allocate_and_reward(inst, sample_arrivals(inst, env), actions, env)
        rec.round(outcome)
        _update_averages(averages, sums, counts, actions, outcome)
    return RegretTrace(
        algorithm="maxavg",
        expected_utility=rec.utility,
        optimal_utility=u_star,
        reward=rec.reward,
        phases=[("init", warmup), ("greedy", T - warmup)],
        final_profile=tuple(int(c) for c in outcome.pulls),
    )


def _categorical(weights: NDArray[np.float64], rng: np.random.Generator) -> NDArray[np.int_]:
    """One draw per row, proportional to the row's non-negative weights."""
    cum = np.cumsum(weights, axis=1)
    u = rng.random(weights.shape[0]) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=1), weights.shape[1] - 1)


def softmax_choices(averages: NDArray[np.float64], temperature: float, rng: np.random.Generator) -> NDArray[np.int_]:
    """Draw one arm per row with probability proportional to ``exp(avg / temperature)``."""
    return _categorical(np.exp((averages - averages.max(axis=1, keepdims=True)) / temperature), rng)


def run_baseline_softmax(config: ExperimentConfig, repeat: int = 0, instance: Instance | None = None) -> RegretTrace:
    inst = instance if instance is not None else config.build_instance()
    M, K, T = inst.num_arms, inst.num_players, inst.horizon
    env, (choice_rng,) = _streams(config, "softmax", repeat, 1)
    rec = _Recorder(inst)
    _, u_star = _true_optimum(inst)
    sums, counts, averages = np.zeros((K, M)), np.zeros((K, M)), np.zeros((K, M))
    tau = config.temperature
    # averages stay in [0, 1], so unshifted weights cannot overflow for moderate tau
    incremental = tau >= 0.01
    weights = np.ones((K, M))
    for _ in range(T):
        if incremental:
            actions = _categorical(weights, choice_rng)
        else:
            actions = softmax_choices(averages, tau, choice_rng)
        outcome = allocate_and_reward(inst, sample_arrivals(inst, env), actions, env)
        rec.round(outcome)
        who, arm = _update_averages(averages, sums, counts, actions, outcome)
        if incremental:
            weights[who, arm] = np.exp(averages[who, arm] / tau)
    return RegretTrace(
        algorithm="softmax",
        expected_utility=rec.utility,
        optimal_utility=u_star,
        reward=rec.reward,
        phases=[("softmax", T)],
        final_profile=tuple(int(c) for c in outcome.pulls),
    )


RUNNERS = {"etc": run_etc, "maxavg": run_baseline_maxavg, "softmax": run_baseline_softmax}


def run_algorithm(config: ExperimentConfig, algorithm: str, repeat: int = 0, instance: Instance | None = None) -> RegretTrace:
    return RUNNERS[algorithm](config, repeat, instance)


@dataclass
class Aggregate:
    """Across-repeat means and standard errors of the cumulative series."""

    algorithm: str
    repeats: int
    cum_regret_mean: NDArray[np.float64]
    cum_regret_se: NDArray[np.float64]
    reward_mean: NDArray[np.float64]
    reward_se: NDArray[np.float64]
    phase: list[str]
    optimal_utility: float
    final_regret: NDArray[np.float64]
    final_reward: NDArray[np.float64]
    t0: int
    commit_rounds: list[int] | None = None
    commit_completed: list[bool] | None = None
    final_profiles: list[Profile] = field(default_factory=list)


def _mean_se(x: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    mean = x.mean(axis=0)
    if x.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])


def aggregate(traces: Sequence[RegretTrace]) -> Aggregate:
    regret = np.stack([t.cum_regret for t in traces])
    reward = np.stack([t.cum_reward for t in traces])
    regret_mean, regret_se = _mean_se(regret)
    reward_mean, reward_se = _mean_se(reward)
    first = traces[0]
    commit_rounds = None
    completed = None
    if first.algorithm == "etc":
        commit_rounds = [int(t.commit_rounds) for t in traces]
        completed = [bool(t.commit_completed) for t in traces]
        T = first.expected_utility.size
        explore, consensus = first.t0, first.phase_end("consensus") - first.t0
        commit = min(max(commit_rounds), T - explore - consensus)
        phase = (
            ["explore"] * explore
            + ["consensus"] * consensus
            + ["commit"] * commit
            + ["committed"] * (T - explore - consensus - commit)
        )
    else:
        phase = first.phase_labels()
    return Aggregate(
        algorithm=first.algorithm,
        repeats=len(traces),
        cum_regret_mean=regret_mean,
        cum_regret_se=regret_se,
        reward_mean=reward_mean,
        reward_se=reward_se,
        phase=phase,
        optimal_utility=first.optimal_utility,
        final_regret=regret[:, -1].copy(),
        final_reward=reward[:, -1].copy(),
        t0=first.t0,
        commit_rounds=commit_rounds,
        commit_completed=completed,
        final_profiles=[t.final_profile for t in traces],
    )


def _run_job(job: tuple[ExperimentConfig, str, int, Instance]) -> RegretTrace:
    config, algorithm, repeat, inst = job
    return run_algorithm(config, algorithm, repeat, inst)


def monte_carlo(
    config: ExperimentConfig,
    algorithm: str | None = None,
    instance: Instance | None = None,
    workers: int | None = None,
) -> Aggregate:
    """Run ``config.repeats`` independent repeats and aggregate them in repeat order."""
    algorithm = algorithm if algorithm is not None else config.algorithms[0]
    inst = instance if instance is not None else config.build_instance()
    n_workers = config.workers if workers is None else workers
    jobs = [(config, algorithm, r, inst) for r in range(config.repeats)]
    if n_workers <= 1 or config.repeats == 1:
        traces = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            traces = list(pool.map(_run_job, jobs))
    return aggregate(traces)
