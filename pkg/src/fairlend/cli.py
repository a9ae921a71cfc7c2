"""Command line entry points: ``train``, ``decompose`` and ``sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import decompose, expected_utility
from .config import PRESETS, load_config
from .counterfactual import adjusted_parity
from .env import ConfigError
from .harness import ExperimentSpec, REPORT_COLUMNS, report_csv, run_experiment
from .policy import PolicyParams, load_policy
from .trainer import ALGOS, MODES

log = logging.getLogger("fairlend")

# CLI flag -> TrainConfig field
_OVERRIDES = {
    "mode": "mode",
    "beta_kl": "beta_kl",
    "beta_c": "beta_c",
    "beta_lambda": "beta_lambda",
    "epsilon": "epsilon",
    "iterations": "iterations",
    "episodes": "episodes_per_iter",
    "lr": "learning_rate",
}
_SWEEPABLE = ("beta_kl", "beta_c", "beta_lambda", "epsilon", "learning_rate")


def _seeds(text: str) -> list[int]:
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use e.g. 0,1,2 or 0-4") from None


def _add_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON config file")
    src.add_argument("--preset", choices=PRESETS, help="built-in configuration")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=_seeds, default=[0], help="e.g. 0,1,2 or 0-4 (default 0)")
    p.add_argument("--algo", choices=ALGOS, action="append", help="repeat for side-by-side runs")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta-kl", type=float)
    p.add_argument("--beta-c", type=float)
    p.add_argument("--beta-lambda", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--episodes", type=int, help="episodes per iteration")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--adjusted", action="store_true", help="train against the baseline-adjusted parity")
    p.add_argument("--workers", type=int, default=1, help="parallel seed workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairlend", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more algorithms over several seeds")
    _add_source(p)
    _add_train_flags(p)

    p = sub.add_parser("decompose", help="decompose the parity gap of a saved policy")
    _add_source(p)
    p.add_argument("--policy", help="policy file written by train (default: always deny)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out", help="write the report as a one-row CSV instead of printing JSON")

    p = sub.add_parser("sweep", help="train over a grid of one hyperparameter")
    _add_source(p)
    _add_train_flags(p)
    p.add_argument("--param", required=True, choices=[s.replace("_", "-") for s in _SWEEPABLE])
    p.add_argument("--values", required=True, help="comma separated values")
    return parser


def _load(args):
    if args.config:
        return load_config(args.config)
    return load_config(args.preset or "setting1")


def _train_cfg(args, base):
    changes = {}
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    return base.replace(**changes)


def _spec(args, env, cfg, variants=None) -> ExperimentSpec:
    return ExperimentSpec(
        env_cfg=env,
        train_cfg=cfg,
        seeds=args.seeds,
        out_dir=Path(args.out),
        algos=tuple(args.algo or ("ppo", "ppo-c")),
        adjusted=args.adjusted,
        variants=variants or {},
        workers=args.workers,
    )


def cmd_train(args) -> int:
    env, base = _load(args)
    manifest = run_experiment(_spec(args, env, _train_cfg(args, base)))
    for path in manifest["averages"]:
        print(path)
    return 0


def cmd_sweep(args) -> int:
    env, base = _load(args)
    name = args.param.replace("-", "_")
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError:
        raise ConfigError(f"--values: expected numbers, got {args.values!r}") from None
    variants = {f"{name}{v:g}": {name: v} for v in values}
    manifest = run_experiment(_spec(args, env, _train_cfg(args, base), variants))
    for path in manifest["averages"]:
        print(path)
    return 0


def cmd_decompose(args) -> int:
    env, base = _load(args)
    epsilon = args.epsilon if args.epsilon is not None else base.epsilon
    if args.policy:
        params = load_policy(args.policy)
    else:
        params = PolicyParams.always_deny(env.num_levels)
    report = decompose(params, env, epsilon)
    if args.out:
        report_csv(report, args.out)
        print(args.out)
    else:
        doc = {c: getattr(report, c) for c in REPORT_COLUMNS}
        doc["utility"] = expected_utility(params, env)
        doc["adjusted_c_pi"] = adjusted_parity(params, env)
        print(json.dumps(doc, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"train": cmd_train, "decompose": cmd_decompose, "sweep": cmd_sweep}[args.command]
    try:
        return handler(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"fairlend: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
