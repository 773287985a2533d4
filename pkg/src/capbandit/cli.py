"""Command-line front end: parse a flat config, run the Monte Carlo
experiment for each algorithm and write CSV traces plus a JSON summary.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .commit import expected_commit_bound
from .engine import ALGORITHMS, Aggregate, ConfigError, ExperimentConfig, monte_carlo
from .exploration import confidence_bounds, service_probabilities
from .offline import optimal_profile, utility_table

log = logging.getLogger(__name__)

CSV_HEADER = ("t", "cum_regret_mean", "cum_regret_se", "reward_mean", "reward_se", "phase")
ALIASES = {"M": "num_arms", "K": "num_players", "T": "horizon", "T0": "t0", "algorithm": "algo"}
_FIELD_TYPES = {
    "num_arms": int,
    "num_players": int,
    "horizon": int,
    "d_max": int,
    "sigma": float,
    "t0": (int, str),
    "algo": str,
    "repeats": int,
    "seed": int,
    "delta1": float,
    "delta2": float,
    "temperature": float,
    "workers": int,
}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _coerce(name: str, value: Any, where: str) -> Any:
    expected = _FIELD_TYPES[name]
    if isinstance(value, bool):
        raise ConfigError(f"{where}: {name} must not be a boolean")
    if expected is int:
        if isinstance(value, int):
            return value
        raise ConfigError(f"{where}: {name} must be an integer, got {value!r}")
    if expected is float:
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"{where}: {name} must be a number, got {value!r}")
    if expected is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: {name} must be a string, got {value!r}")
    if isinstance(value, (int, str)):
        return value
    raise ConfigError(f"{where}: {name} must be an integer, a fraction like 0.1T, or auto; got {value!r}")


def _read_config_file(path: Path) -> tuple[dict[str, Any], dict[str, int]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{line}: malformed config: {getattr(exc, 'problem', exc)}") from exc
    if root is None:
        return {}, {}
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{path}:{root.start_mark.line + 1}: config must be a flat mapping of keys to values")
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for key_node, value_node in root.value:
        line = key_node.start_mark.line + 1
        key = str(key_node.value)
        name = ALIASES.get(key, key)
        if name not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{line}: unknown key {key!r}")
        if name in lines:
            raise ConfigError(f"{path}:{line}: {key!r} repeats the key on line {lines[name]}")
        if not isinstance(value_node, yaml.ScalarNode):
            raise ConfigError(f"{path}:{line}: {key} must be a single value, not a nested structure")
        values[name] = _coerce(name, data[key], f"{path}:{line}")
        lines[name] = line
    return values, lines


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Build a validated config: defaults, then file values, then flag overrides."""
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    if path is not None:
        values, lines = _read_config_file(Path(path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        name = ALIASES.get(key, key)
        values[name] = _coerce(name, value, f"--{key}")
        lines.pop(name, None)
    config = ExperimentConfig(**values)
    problems = config.problems()
    if problems:
        located = []
        for problem in problems:
            name = problem.split(":", 1)[0].split("/")[0]
            if name in lines:
                located.append(f"{path}:{lines[name]}: {problem}")
            else:
                located.append(problem)
        raise ConfigError("; ".join(located))
    return config


def export(agg: Aggregate, path: str | Path) -> Path:
    """Write one aggregate as CSV; ``reward_*`` columns are cumulative realized reward."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for t in range(agg.cum_regret_mean.size):
            writer.writerow((
                t + 1,
                _fmt(agg.cum_regret_mean[t]),
                _fmt(agg.cum_regret_se[t]),
                _fmt(agg.reward_mean[t]),
                _fmt(agg.reward_se[t]),
                agg.phase[t],
            ))
    return path


def read_csv(path: str | Path) -> dict[str, list]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        cols: dict[str, list] = {name: [] for name in CSV_HEADER}
        for row in reader:
            cols["t"].append(int(row["t"]))
            for name in CSV_HEADER[1:-1]:
                cols[name].append(float(row[name]))
            cols["phase"].append(row["phase"])
    return cols


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def summarize(aggregates: dict[str, Aggregate], config: ExperimentConfig) -> dict[str, Any]:
    inst = config.build_instance()
    n_star = optimal_profile(inst)
    table = utility_table(inst)
    summary: dict[str, Any] = {
        "optimal_profile": list(n_star),
        "optimal_utility": float(table[np.arange(inst.num_arms), list(n_star)].sum()),
        "t_commit_bound": expected_commit_bound(n_star, inst.num_players),
        "algorithms": {},
    }
    for name, agg in aggregates.items():
        entry: dict[str, Any] = {
            "repeats": agg.repeats,
            "final_regret_mean": float(agg.final_regret.mean()),
            "final_regret_se": _se(agg.final_regret),
            "final_reward_mean": float(agg.final_reward.mean()),
            "final_reward_se": _se(agg.final_reward),
        }
        if agg.commit_rounds is not None:
            rounds = np.asarray(agg.commit_rounds, dtype=float)
            entry.update(
                t0=agg.t0,
                commit_rounds_mean=float(rounds.mean()),
                commit_rounds_min=int(rounds.min()),
                commit_rounds_max=int(rounds.max()),
                commit_completed_fraction=float(np.mean(agg.commit_completed)),
            )
            if agg.t0 >= 1:
                bounds = confidence_bounds(
                    config.delta1, config.delta2, agg.t0, service_probabilities(inst), inst.num_players
                )
                entry.update(eps_tail=bounds.eps_tail, estimation_success_lower_bound=bounds.success_lower_bound)
        summary["algorithms"][name] = entry
    return summary


def write_summary(summary: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path


def load_summary(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())


@dataclass
class RunManifest:
    config: dict[str, Any]
    build: str
    seed: int
    timestamp: str
    outputs: dict[str, str]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, check=True, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        rev = "unknown"
    return f"capbandit {__version__} ({rev})"


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> RunManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inst = config.build_instance()
    resolved = config.to_dict()
    if "etc" in config.algorithms:
        resolved["t0"] = config.resolve_t0(inst)
        if resolved["t0"] + inst.num_arms >= inst.horizon:
            raise ConfigError(f"t0: resolved T0 = {resolved['t0']} leaves no room in horizon T = {inst.horizon}")
    outputs: dict[str, str] = {}
    aggregates: dict[str, Aggregate] = {}
    for name in config.algorithms:
        log.info("running %s: %d repeats", name, config.repeats)
        aggregates[name] = monte_carlo(config, name, inst)
        outputs[name] = export(aggregates[name], out / f"{name}.csv").name
    outputs["summary"] = write_summary(summarize(aggregates, config), out / "summary.json").name
    config_path = out / "config.yaml"
    config_path.write_text(yaml.safe_dump(resolved, sort_keys=True))
    outputs["config"] = config_path.name
    manifest = RunManifest(
        config=resolved,
        build=_build_id(),
        seed=config.seed,
        timestamp=datetime.now(timezone.utc).isoformat(),
        outputs=outputs,
    )
    manifest.write(out / "manifest.json")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capbandit",
        description="Monte Carlo regret experiments for multi-player bandits with shared stochastic arm capacities.",
    )
    parser.add_argument("--config", type=Path, help="flat YAML config file (key: value per line)")
    parser.add_argument("--replay", type=Path, help="rerun the configuration recorded in a manifest.json")
    parser.add_argument("--algo", choices=ALGORITHMS + ("all",))
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--T0", dest="t0", help="exploration rounds: integer, fraction like 0.1T, or auto")
    parser.add_argument("--workers", type=int, help="processes used for repeats")
    parser.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _t0_flag(text: str | None) -> int | str | None:
    if text is None:
        return None
    return int(text) if text.strip().isdigit() else text.strip()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {
        "algo": args.algo,
        "seed": args.seed,
        "repeats": args.repeats,
        "t0": _t0_flag(args.t0),
        "workers": args.workers,
    }
    try:
        if args.replay is not None:
            try:
                recorded = RunManifest.read(args.replay).config
            except (OSError, ValueError, TypeError) as exc:
                raise ConfigError(f"{args.replay}: cannot read manifest: {exc}") from exc
            config = parse_config(None, {**recorded, **{k: v for k, v in overrides.items() if v is not None}})
        else:
            config = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        manifest = run_experiment(config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    for name, file in manifest.outputs.items():
        print(f"{name}: {Path(args.out) / file}")
    return 0
