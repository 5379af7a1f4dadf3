"""Command-line entry point: train, analyze, grid and compare."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .analysis import analyze_run, write_report
from .loop import (
    METHODS,
    ConfigError,
    Environment,
    ExperimentConfig,
    Models,
    RunAborted,
    TrajectoryLog,
    evaluations_per_step,
    initial_models,
    run_experiment,
)
from .params import derive_seed

logger = logging.getLogger("zopro")

SEED_FIELDS = ("env_seed", "init_seed", "rollout_seed", "judge_seed", "noise_seed", "shuffle_seed")
GRID_FIELDS = ["eta", "epsilon", "final_reward_delta", "collapsed_flag", "status"]
COMPARE_FIELDS = ["method", "step", "evaluations", "wall_ms", "mean_reward"]
# a run whose mean reward falls this far below its start is marked collapsed
COLLAPSE_DROP = 1.0


def _code_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    started: str
    seeds: dict
    status: str = "running"
    finished: str | None = None
    extra: dict = field(default_factory=dict)

    def write(self, run_dir) -> None:
        atomic_write_text(Path(run_dir) / "manifest.json",
                          json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / "manifest.json").read_text()))


def apply_seed_override(config: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    """Replace every seed in ``config`` by a value derived from ``seed``."""
    if seed is None:
        return config
    return config.replace(**{name: int(derive_seed(seed, i) % 2**31)
                             for i, name in enumerate(SEED_FIELDS)})


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    config = ExperimentConfig.load(path) if path else ExperimentConfig()
    return apply_seed_override(config, seed_override)


class _LogFile:
    """Attach a log.txt handler to the package logger for the duration of a run."""

    def __init__(self, path: Path):
        self.handler = logging.FileHandler(path, mode="w")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))

    def __enter__(self):
        root = logging.getLogger("zopro")
        root.addHandler(self.handler)
        self._level = root.level
        root.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        root = logging.getLogger("zopro")
        root.removeHandler(self.handler)
        root.setLevel(self._level)
        self.handler.close()


def train(config: ExperimentConfig, out_dir, models: Models | None = None) -> tuple[int, TrajectoryLog]:
    """Run one persisted experiment; returns ``(exit status, log)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config.to_text())
    manifest = RunManifest(config.digest(), _code_version(), _now(),
                           {name: getattr(config, name) for name in SEED_FIELDS})
    manifest.write(out)
    with _LogFile(out / "log.txt"):
        try:
            log = run_experiment(config, out, models)
            code = 0
        except RunAborted as exc:
            log = exc.log
            logger.error("%s", exc)
            print(f"error: {exc}", file=sys.stderr)
            code = 1
    manifest.status = log.status
    manifest.finished = _now()
    manifest.write(out)
    return code, log


def cmd_train(config_path, out_dir, seed_override: int | None = None) -> int:
    try:
        config = load_config(config_path, seed_override)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    code, _ = train(config, out_dir)
    return code


def cmd_analyze(run_dir, out_dir=None) -> int:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "analysis"
    try:
        report = analyze_run(run_dir)
    except (FileNotFoundError, ValueError) as exc:
        ck = run_dir / "checkpoints"
        found = sorted(p.name for p in ck.glob("*.ckpt")) if ck.is_dir() else []
        print(f"error: {exc}\ninventory of {ck}: {', '.join(found) or 'none'}", file=sys.stderr)
        return 2
    write_report(report, out_dir)
    return 0


def final_reward_delta(log: TrajectoryLog) -> float:
    rewards = [s.mean_reward for s in log.steps if np.isfinite(s.mean_reward)]
    if not rewards:
        return math.nan
    return rewards[-1] - log.initial_reward


def is_collapsed(log: TrajectoryLog) -> bool:
    if log.status != "completed" or any(s.flag == "skipped" for s in log.steps):
        return True
    rewards = [s.mean_reward for s in log.steps]
    return bool(rewards) and min(rewards) < log.initial_reward - COLLAPSE_DROP


def _fmt_tag(x: float) -> str:
    return f"{x:g}"


def grid(config: ExperimentConfig, etas, epsilons, out_dir) -> list[dict]:
    if not etas or not epsilons:
        raise ValueError("eta and epsilon lists must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = Environment.build(config)
    models = initial_models(config, env)
    rows = []
    for eta in etas:
        for eps in epsilons:
            sub = config.replace(eta=float(eta), epsilon=float(eps))
            _, log = train(sub, out / f"eta{_fmt_tag(eta)}_eps{_fmt_tag(eps)}", models)
            rows.append({"eta": repr(float(eta)), "epsilon": repr(float(eps)),
                         "final_reward_delta": repr(final_reward_delta(log)),
                         "collapsed_flag": int(is_collapsed(log)), "status": log.status})
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, GRID_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_grid(config_path, eta_list, epsilon_list, out_dir, seed_override: int | None = None) -> int:
    try:
        config = load_config(config_path, seed_override)
        grid(config, eta_list, epsilon_list, out_dir)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def compare(config: ExperimentConfig, methods, out_dir) -> dict[str, list[dict]]:
    """Run each method from the same initial models; returns per-method series."""
    unknown = [m for m in methods if m not in METHODS]
    if not methods or unknown:
        raise ValueError(f"unsupported methods {unknown}; choose from {', '.join(METHODS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = Environment.build(config)
    models = initial_models(config, env)
    series: dict[str, list[dict]] = {}
    for method in methods:
        _, log = train(config.replace(method=method), out / method, models)
        per = evaluations_per_step(method)
        rows = [{"method": method, "step": 0, "evaluations": 0, "wall_ms": 0.0,
                 "mean_reward": log.initial_reward}]
        wall = 0.0
        for n, s in enumerate(log.steps, start=1):
            wall += s.wall_ms
            rows.append({"method": method, "step": n, "evaluations": n * per,
                         "wall_ms": wall, "mean_reward": s.mean_reward})
        series[method] = rows
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARE_FIELDS)
        w.writeheader()
        for rows in series.values():
            for r in rows:
                w.writerow({**r, "wall_ms": f"{r['wall_ms']:.3f}", "mean_reward": repr(r["mean_reward"])})
    return series


def evaluations_to_threshold(rows: list[dict], threshold: float) -> int | None:
    """First evaluation count at which the series reaches ``threshold``."""
    for r in rows:
        if r["mean_reward"] >= threshold:
            return r["evaluations"]
    return None


def cmd_compare(config_path, methods, out_dir, seed_override: int | None = None) -> int:
    try:
        config = load_config(config_path, seed_override)
        compare(config, methods, out_dir)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _method_list(text: str) -> list[str]:
    return [m.strip() for m in text.split(",") if m.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zopro", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the iterative policy/reward loop")
    p.add_argument("--config", help="config file (defaults are used when omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed-override", type=int)

    p = sub.add_parser("analyze", help="trajectory analytics of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default: RUN_DIR/analysis)")

    p = sub.add_parser("grid", help="sweep eta x epsilon")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--eta-list", type=_float_list, default=[1e-3, 1e-4, 1e-5])
    p.add_argument("--epsilon-list", type=_float_list, default=[1e-3, 1e-4, 1e-5])
    p.add_argument("--seed-override", type=int)

    p = sub.add_parser("compare", help="run several methods from the same start")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--methods", type=_method_list, default=list(METHODS))
    p.add_argument("--seed-override", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed_override)
    if args.command == "analyze":
        return cmd_analyze(args.run_dir, args.out)
    if args.command == "grid":
        return cmd_grid(args.config, args.eta_list, args.epsilon_list, args.out, args.seed_override)
    return cmd_compare(args.config, args.methods, args.out, args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
