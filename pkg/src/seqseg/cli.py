"""Command-line entry point: ``seqseg {generate,propagate,train,evaluate,sweep}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, SeqSegError
from .harness import (ExperimentConfig, run_evaluate, run_generate, run_propagate, run_sweep,
                      run_train)
from .labelprop import WeightConfig

logger = logging.getLogger("seqseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    _common(g)
    g.add_argument("--n", type=int, help="number of subjects")
    g.add_argument("--frames", type=int, help="frames per sequence")
    g.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))

    p = sub.add_parser("propagate", help="propagate ED/ES annotations to every frame")
    _common(p)

    t = sub.add_parser("train", help="train the U-Net (stage 'unet') or the full recurrent model")
    _common(t)
    t.add_argument("--stage", choices=["unet", "full"], required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--R", type=int, help="window radius (T = 2R+1)")
    t.add_argument("--r", type=float, help="weighting exponent")

    e = sub.add_parser("evaluate", help="metrics, paired tests and time-area plots on the test split")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", help="baseline checkpoint for the paired comparison")
    e.add_argument("--plots", type=int, default=3)

    s = sub.add_parser("sweep", help="train/evaluate over window lengths and exponents")
    _common(s)
    s.add_argument("--T", type=int, nargs="+", dest="T_values")
    s.add_argument("--r", type=float, nargs="+", dest="r_values")
    s.add_argument("--iterations", type=int)
    return parser


def config_from_args(args) -> ExperimentConfig:
    from dataclasses import replace

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    if getattr(args, "n", None) is not None:
        if args.n < 2:
            raise UsageError(f"--n must be at least 2, got {args.n}")
        cfg = replace(cfg, n_subjects=args.n)
    if getattr(args, "frames", None) is not None:
        cfg = replace(cfg, phantom=cfg.phantom.replace(frames=args.frames))
    if getattr(args, "size", None):
        cfg = replace(cfg, phantom=cfg.phantom.scaled(tuple(args.size)))
    R, r = getattr(args, "R", None), getattr(args, "r", None)
    if R is not None or r is not None:
        cfg = replace(cfg, weights=WeightConfig(cfg.weights.R if R is None else R,
                                                cfg.weights.r if r is None else r))
    if getattr(args, "iterations", None) is not None:
        if args.command == "train" and args.stage == "unet":
            cfg = replace(cfg, stage1=replace(cfg.stage1, iterations=args.iterations))
        else:
            cfg = replace(cfg, stage2=replace(cfg.stage2, iterations=args.iterations))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = config_from_args(args)
    except UsageError as exc:
        print(f"seqseg: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError) as exc:
        print(f"seqseg: invalid configuration: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "generate":
            m = run_generate(cfg)
            print(f"wrote {len(m['subjects'])} subjects to {cfg.out / 'data'}")
        elif args.command == "propagate":
            table = run_propagate(cfg)
            for d, row in sorted(table.items()):
                print(f"distance {d}: " + ", ".join(f"{k} {v:.4f}" for k, v in row.items()))
        elif args.command == "train":
            path = run_train(cfg, args.stage)
            print(f"saved {path}")
        elif args.command == "evaluate":
            out = run_evaluate(cfg, args.checkpoint, args.baseline, args.plots)
            for method, summ in out["summary"].items():
                print(method, " ".join(f"{k}={v:.4f}" for k, v in summ.items()))
        elif args.command == "sweep":
            for row in run_sweep(cfg, args.T_values, args.r_values):
                print(f"T={row['T']} r={row['r']}: AAo {row['dice_aao']:.4f} DAo {row['dice_dao']:.4f}")
    except SeqSegError as exc:
        print(f"seqseg: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"seqseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
