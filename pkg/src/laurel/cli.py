"""``laurel`` command line: param-count, gradcheck, train, compare, sweep-rank."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from laurel import experiments
from laurel.data import IDXError
from laurel.experiments import ConfigError, ExperimentConfig

COMMANDS = {
    "param-count": experiments.cmd_param_count,
    "gradcheck": experiments.cmd_gradcheck,
    "train": experiments.cmd_train,
    "compare": experiments.cmd_compare,
    "sweep-rank": experiments.cmd_sweep_rank,
}


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds needs at least one seed")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laurel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gradcheck":
            # negative-control hook: CASE:GROUP whose analytic gradient gets corrupted
            p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seeds:
            cfg = cfg.with_seeds(args.seeds)
        out = args.out or (Path(cfg.out) if cfg.out else Path("runs") / args.command)
        if args.command == "gradcheck" and args.corrupt:
            case, _, group = args.corrupt.partition(":")
            return experiments.cmd_gradcheck(cfg, out, corrupt=(case, group))
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, IDXError, FileNotFoundError) as exc:
        print(f"laurel {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
