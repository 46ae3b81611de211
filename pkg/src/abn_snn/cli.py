"""``abn-snn <command> --config <path> [--seed S] [--out DIR] [--workers W]``

Exit codes: 0 success, 2 configuration error, 3 data/decode error,
4 numeric failure, 1 any other package error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .errors import AbnError
from .experiments import run

log = logging.getLogger("abn_snn")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abn-snn", description="ABN spiking network experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in config_mod.COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--workers", type=int)
    p = sub.add_parser("synth-nmnist", help="write an N-MNIST-format stand-in dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth-nmnist":
            from .standin import write_standin_dataset

            write_standin_dataset(args.out, args.train_per_class, args.test_per_class, args.seed)
            return 0
        cfg = config_mod.load(args.config)
        overrides = {"command": args.command}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output_dir"] = str(args.out)
        if args.workers is not None:
            overrides["workers"] = args.workers
        cfg = cfg.with_overrides(run=overrides)
        run(cfg)
    except AbnError as exc:
        print(f"abn-snn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
