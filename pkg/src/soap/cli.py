"""``soap`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .episodic import InsufficientDataError
from .episodic.clipio import ClipFormatError
from .harness import (
    NumericalAbort,
    RunConfig,
    cmd_eval,
    cmd_gen_data,
    cmd_gradcheck,
    cmd_train,
    format_gradcheck,
    load_checkpoint,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _shot_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soap", description="Few-shot video classification with prior guidance.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic clip dataset")
    g.add_argument("--spec", help="JSON dataset spec (default: built-in 10-class spec)")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True, help="params.json or the directory holding it")
    e.add_argument("--interval", type=int)
    e.add_argument("--reverse-query", action="store_true")
    e.add_argument("--sample-noise", type=float, metavar="R")
    e.add_argument("--frame-noise", type=int, metavar="K")
    e.add_argument("--any-shot", type=_shot_range, metavar="LO:HI")
    e.add_argument("--episodes", type=int)
    e.add_argument("--metrics", help="append the summary record to this JSONL file")

    c = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=8, help="coordinates per parameter")
    return parser


def _run_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    pert = cfg.perturbations
    overrides = {
        "interval": args.interval,
        "sample_noise_ratio": args.sample_noise,
        "frame_noise_count": args.frame_noise,
        "any_shot_range": args.any_shot,
    }
    pert = replace(pert, **{k: v for k, v in overrides.items() if v is not None})
    if args.reverse_query:
        pert = replace(pert, reverse_query=True)
    if args.episodes is not None and args.episodes < 1:
        raise ValueError("--episodes must be positive")
    model, cfg = load_checkpoint(args.checkpoint, cfg)
    report = cmd_eval(cfg, model, pert, args.episodes, args.metrics)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _run_train(args) -> int:
    cfg = RunConfig.load(args.config)

    def progress(ep: int, loss: float) -> None:
        if not args.quiet and (ep + 1) % 100 == 0:
            print(f"episode {ep + 1}/{cfg.episodes_train} loss {loss:.4f}", file=sys.stderr)

    result = cmd_train(cfg, args.out, progress)
    print(json.dumps({"episodes": len(result.losses), "final_loss": result.losses[-1],
                      "seconds": round(result.seconds, 2), "checkpoint": str(Path(args.out) / "params.json")}))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            root = cmd_gen_data(args.spec, args.out)
            print(f"wrote dataset to {root}")
            return EXIT_OK
        if args.command == "train":
            return _run_train(args)
        if args.command == "eval":
            return _run_eval(args)
        if args.command == "gradcheck":
            report = cmd_gradcheck(seed=args.seed, samples=args.samples)
            print(format_gradcheck(report))
            return EXIT_OK if report.passed else EXIT_NUMERIC
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, ClipFormatError, InsufficientDataError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
