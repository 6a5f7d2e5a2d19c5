"""Command-line entry point.

Subcommands run individual pipeline stages or the whole thing:

    nerfloc demo --out runs/demo            # reference end-to-end config
    nerfloc run --config cfg.json --out DIR # end-to-end with a custom config
    nerfloc train --out DIR                 # stages up to and including train
    nerfloc localize --out DIR              # stages up to localization
    nerfloc evaluate --out DIR              # full pipeline + report
    nerfloc init-config --out cfg.json      # write the default config

Stages are cumulative: each command executes the pipeline from the start
through the named stage (the pipeline is cheap to re-enter deterministically,
and every stage persists its artifacts under --out).
"""

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .errors import StageError

_STAGE_COMMANDS = ["train", "partition", "select", "coarse", "localize", "evaluate"]


def _build_parser():
    parser = argparse.ArgumentParser(prog="nerfloc",
                                     description="NeRF-feature visual localization")
    parser.add_argument("--config", help="pipeline config JSON", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default="runs/out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGE_COMMANDS + ["run", "demo"]:
        sub.add_parser(name)
    p_init = sub.add_parser("init-config")
    p_init.add_argument("--force", action="store_true")
    return parser


def _load_config(args):
    if args.config:
        config = harness.load_config(args.config)
    else:
        config = harness.PipelineConfig()
    if args.seed is not None:
        config = harness.config_from_dict(
            {**harness.config_to_dict(config), "seed": args.seed})
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "init-config":
        path = Path(args.out)
        if path.exists() and not args.force:
            print(f"refusing to overwrite {path} (use --force)", file=sys.stderr)
            return 1
        harness.save_config(_load_config(args), path)
        print(f"wrote {path}")
        return 0

    config = _load_config(args)
    stage_order = [name for name, _ in harness.STAGES]
    if args.command in ("run", "demo"):
        last = stage_order[-1]
    else:
        last = {"partition": "partition", "train": "train", "select": "select",
                "coarse": "coarse", "localize": "localize",
                "evaluate": "evaluate"}[args.command]
    out = Path(args.out)
    try:
        state = harness.run_stages(config, out, last=last)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if "report" in state:
        print(harness.format_report(state["report"]))
        print(f"report written to {out / 'report.json'}")
    else:
        print(f"completed stages through '{last}'; artifacts in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
