"""Command-line entry point: ``cdmil <stage> --config experiment.json``.

Exit status is 0 on success, 1 for user errors (bad config, missing or stale
upstream artifacts, missing credentials) and 2 for pipeline failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import CdmilError, UnknownLabel, UserError
from .pipeline import STAGES, Experiment, ExperimentConfig
from .schema import read_utterances, split_dataset, write_splits

log = logging.getLogger("cdmil")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdmil", description="Cognitive distortion MIL experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES + ("all",):
        p = sub.add_parser(stage, help="run every stage in order" if stage == "all" else f"run the {stage} stage")
        p.add_argument("--config", required=True, help="experiment config (JSON)")

    p = sub.add_parser("split", help="write a stratified train/val/test split")
    p.add_argument("--data", required=True, help="utterance JSONL")
    p.add_argument("--schema", required=True, choices=("koacd", "therapist_qa"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--out", required=True, help="output JSONL of {id, split}")
    return parser


def _run(args) -> None:
    if args.command == "split":
        utts = read_utterances(args.data, args.schema)
        assignment = split_dataset(utts, tuple(args.ratios), args.seed)
        write_splits(args.out, assignment)
        counts = {s: sum(1 for v in assignment.values() if v == s) for s in ("train", "val", "test")}
        print(" ".join(f"{k}={v}" for k, v in counts.items()))
        return
    exp = Experiment(ExperimentConfig.load(args.config))
    if args.command == "all":
        exp.run_all()
    else:
        exp.run_stage(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _run(args)
    except (UserError, UnknownLabel) as exc:
        log.error("%s", exc)
        return 1
    except CdmilError as exc:
        log.error("pipeline failure: %s", exc)
        return 2
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
