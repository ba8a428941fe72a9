"""Command-line entry point: ``mdrelabel <stage> [--config FILE] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .datastore import PROVENANCES
from .pipeline import STAGES, PipelineConfig, StageError, Workspace, run_pipeline, run_stage

logger = logging.getLogger("mdrelabel")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (defaults apply to missing keys)")
    common.add_argument("--out", default="mdrelabel-out", help="workspace directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")
    common.add_argument("--data", help="dataset directory (default: <out>/data)")
    common.add_argument("--model", help="nominal model directory (default: <out>/model)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mdrelabel", description="Detector-driven relabeling pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage in ("train", "eval"):
            sp.add_argument("--labels", choices=PROVENANCES,
                            help="label provenance (default: baseline and relabeled; eval adds corrected)")
    run = sub.add_parser("run", parents=[common], help="run the stages listed in the config in order")
    run.add_argument("--stages", nargs="+", choices=STAGES, help="override the config's stage list")
    sub.add_parser("show-config", parents=[common], help="print the resolved config and its hash")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = PipelineConfig.load(args.config).with_seed(args.seed)
        cfg.validate()
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    ws = Workspace(args.out, args.data, args.model)

    if args.command == "show-config":
        print(json.dumps(dict(cfg.to_dict(), stamp=cfg.stamp()), indent=2, sort_keys=True))
        return 0
    try:
        if args.command == "run":
            run_pipeline(cfg, ws, args.jobs, args.stages)
        else:
            res = run_stage(args.command, cfg, ws, args.jobs, getattr(args, "labels", None))
            print(json.dumps({"stage": args.command, "result": res}, sort_keys=True, default=str))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
