"""Command line entry points.

Subcommands: record-demos, pretrain, train, eval, sweep. Every run
option is a RunConfig field; pass a config file with --config and
override individual fields with flags of the same name (dashes for
underscores). Exits 0 on success, 1 with a diagnostic line on stderr
otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import RunConfig, apply_overrides, load_config
from .harness import evaluate, pretrain, record_demos, sweep, train


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            metavar="V",
            help=f"override {f.name} (default {getattr(RunConfig(), f.name)})",
        )


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            overrides[f.name] = raw
    return apply_overrides(cfg, overrides)


def _parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError:
        raise ValueError(f"seeds must be comma-separated integers, got {raw!r}")
    if not seeds:
        raise ValueError("at least one seed required")
    return seeds


def _sweep_configs(base: RunConfig, vary: list[str]) -> list[RunConfig]:
    """Cross product of --vary key=v1,v2 axes applied over the base config."""
    cfgs = [base]
    for axis in vary:
        if "=" not in axis:
            raise ValueError(f"--vary expects key=v1,v2,..., got {axis!r}")
        key, _, values = axis.partition("=")
        key = key.strip()
        options = [v.strip() for v in values.split(",") if v.strip() != ""]
        if not options:
            raise ValueError(f"--vary {key} lists no values")
        cfgs = [apply_overrides(cfg, {key: v}) for cfg in cfgs for v in options]
    return cfgs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otres",
        description="Residual policy learning over non-parametric base policies "
        "with trajectory-matching rewards.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record-demos", help="roll the scripted expert and save demos")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="demo file to write")

    p = sub.add_parser("pretrain", help="behavior-clone an encoder on the demos")
    _add_config_args(p)
    p.add_argument("--demos", required=True, help="demo file")
    p.add_argument("--out", required=True, help="encoder checkpoint to write")

    p = sub.add_parser("train", help="run the online residual learning loop")
    _add_config_args(p)
    p.add_argument("--demos", required=True, help="demo file")
    p.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")
    p.add_argument("--out-dir", required=True, help="directory for metrics and checkpoints")

    p = sub.add_parser("eval", help="greedy success rate on the held-out positions")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--demos", required=True, help="demo file")

    p = sub.add_parser("sweep", help="train a grid of configs over several seeds")
    _add_config_args(p)
    p.add_argument("--demos", required=True, help="demo file")
    p.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")
    p.add_argument("--out-dir", required=True, help="directory for per-cell runs and tables")
    p.add_argument(
        "--vary",
        action="append",
        default=[],
        metavar="KEY=V1,V2",
        help="config axis to sweep; repeatable, axes combine as a cross product",
    )
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        if args.command == "record-demos":
            demos = record_demos(cfg, args.out)
            print(f"wrote {len(demos.trajectories)} demo trajectories to {args.out}")
        elif args.command == "pretrain":
            _, _, history = pretrain(cfg, args.demos, args.out)
            print(
                f"wrote encoder checkpoint to {args.out} "
                f"(cloning loss {history[-1]:.6g} after {len(history)} epochs)"
            )
        elif args.command == "train":
            result = train(cfg, args.demos, args.encoder, args.out_dir)
            final = result.rows[-1][3] if result.rows else None
            print(f"wrote {result.metrics_path}")
            print(f"wrote {result.checkpoint_path}")
            if final is not None:
                print(f"last eval success flag: {final}")
        elif args.command == "eval":
            rate = evaluate(cfg, args.checkpoint, args.demos)
            print(f"success_rate {rate}")
        elif args.command == "sweep":
            seeds = _parse_seeds(args.seeds)
            cfgs = _sweep_configs(cfg, args.vary)
            results = sweep(cfgs, seeds, args.demos, args.encoder, args.out_dir)
            failed = sum(1 for r in results if r["status"] != "ok")
            print(f"{len(results)} cells, {failed} failed; tables in {args.out_dir}")
            if failed:
                return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
