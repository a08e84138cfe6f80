"""``feedloc`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .artifacts import DataError
from .core import ConfigError, FeedlocError
from .tensor.autograd import NumericFault
from .tensor.checkpoint import CheckpointError
from .trainer import NonFiniteLoss

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--work", "--out", dest="work", default=".",
                   help="work directory holding all artifacts (default: current directory)")
    p.add_argument("--config", default=None,
                   help=f"config JSON path or name inside ${pl.CONFIG_DIR_ENV}")
    p.add_argument("--seed", type=int, default=None, help="seed propagated to every stage")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="feedloc", description="Feedback-driven temporal localization pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "generate the synthetic world (episodes JSONL + feature binaries)",
        "sample-refs": "sample reference spans per query",
        "make-feedback": "synthesize feedback samples",
        "make-labels": "build per-clip alignment labels",
        "train-falm": "pretrain the feedback alignment model",
        "train-host": "pretrain the host localizer on query-only data",
        "finetune": "jointly fine-tune host and EM adapter",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    ev = sub.add_parser("eval", help="evaluate on the eval split")
    _common(ev)
    ev.add_argument("--mode", required=True, choices=pl.EVAL_MODES)
    ev.add_argument("--bypass", action="store_true",
                    help="force P_hat to all-ones (must reproduce query-only results)")
    _common(sub.add_parser("report", help="merge eval outputs into report.json / report.md"))
    run = sub.add_parser("run", help="run every stage, then eval and report")
    _common(run)
    run.add_argument("--modes", default="feedback",
                     help="comma-separated eval modes (default: feedback)")
    return parser


def _config(args) -> pl.PipelineConfig:
    stored = Path(args.work) / "config.json"
    if args.config is None and args.seed is None and stored.exists() and args.command != "gen":
        try:
            return pl.PipelineConfig.from_dict(json.loads(stored.read_text(encoding="utf-8"))["config"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{stored}: unreadable stored config ({exc})") from exc
    cfg = pl.load_config(args.config)
    return cfg.seeded(args.seed if args.seed is not None else cfg.seed)


def _dispatch(args) -> None:
    ws = pl.Workspace(args.work, _config(args))
    cmd = args.command
    if cmd in pl.STAGES:
        pl.STAGES[cmd](ws)
    elif cmd == "eval":
        res = pl.stage_eval(ws, args.mode, args.bypass)
        if "delta" in res:
            print(json.dumps({"delta": res["delta"]}, sort_keys=True))
    elif cmd == "report":
        pl.stage_report(ws)
        print((ws.root / "report.md").read_text(encoding="utf-8"), end="")
    elif cmd == "run":
        modes = [m for m in args.modes.split(",") if m]
        bad = [m for m in modes if m not in pl.EVAL_MODES]
        if bad:
            raise UsageError(f"--modes: unknown mode {bad[0]!r}; choose from {pl.EVAL_MODES}")
        pl.run_all(ws, modes)
        print((ws.root / "report.md").read_text(encoding="utf-8"), end="")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NumericFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FeedlocError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
