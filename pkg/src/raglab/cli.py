"""Experiment driver.

Subcommands: corpus, train-base, collect-pairs, train-translator, run, eval,
cost, ablate. Every stage reads and writes one output directory (--out, or
the RAGLAB_OUT environment variable), takes an optional key=value config file
(--config), and accepts repeated --set section.key=value overrides.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import stages
from .config import StaleArtifactError, default_out_dir, load_config
from .pipeline import MODES


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="sectioned key=value config file")
    parser.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default $RAGLAB_OUT or ./out)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--force", action="store_true",
                        help="ignore manifest staleness checks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raglab")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("corpus", "generate the fact world, documents, eval set, and vocabulary"),
        ("train-base", "pretrain the base model on the seen-fact curriculum"),
        ("collect-pairs", "train one adapter per document into the bank"),
        ("train-translator", "fit the embedding-to-adapter translator"),
        ("run", "answer eval questions in one inference mode"),
        ("eval", "score traces into the metric CSV and figures"),
        ("cost", "evaluate the analytical cost model"),
        ("ablate", "sweep a translator knob and evaluate each value"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "collect-pairs":
            p.add_argument("--splits", default="seen,align,test",
                           help="comma-separated document splits to parameterize")
            p.add_argument("--workers", type=int, default=None,
                           help="parallel workers over documents")
        if name == "run":
            p.add_argument("--mode", required=True, choices=MODES)
            p.add_argument("--split", default=None,
                           help="eval splits (comma-separated or 'all')")
            p.add_argument("--uncertainty", action="store_true",
                           help="attach sampled uncertainty metrics to traces")
        if name == "eval":
            p.add_argument("--modes", default=",".join(MODES),
                           help="comma-separated modes whose traces to score")
        if name == "ablate":
            p.add_argument("--param", required=True, choices=["p", "pairs", "lambda2"])
            p.add_argument("--values", required=True,
                           help="comma-separated values to sweep")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if getattr(args, "workers", None) is not None:
            overrides.append(f"prag.workers={args.workers}")
        cfg = load_config(args.config, overrides)
        out = args.out if args.out is not None else default_out_dir()
        out = Path(out)

        if args.command == "corpus":
            result = stages.stage_corpus(cfg, out)
        elif args.command == "train-base":
            result = stages.stage_train_base(cfg, out, force=args.force)
        elif args.command == "collect-pairs":
            result = stages.stage_collect_pairs(cfg, out, force=args.force,
                                                splits=args.splits)
        elif args.command == "train-translator":
            result = stages.stage_train_translator(cfg, out, force=args.force)
        elif args.command == "run":
            result = stages.stage_run(cfg, out, args.mode, force=args.force,
                                      split=args.split,
                                      with_uncertainty=args.uncertainty)
        elif args.command == "eval":
            modes = [m.strip() for m in args.modes.split(",") if m.strip()]
            result = stages.stage_eval(cfg, out, modes)
        elif args.command == "cost":
            result = stages.stage_cost(cfg, out)
            print(result.pop("text"))
        else:
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            result = stages.stage_ablate(cfg, out, args.param, values,
                                         force=args.force)

        print(json.dumps(result, indent=1, sort_keys=True, default=str))
        return 0
    except (StaleArtifactError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
