"""Command-line entry point: ``polyfeat <subcommand> [--config run.json] ...``.

Exit codes: 0 success, 1 validation error (bad flags, config, inputs or a
missing prerequisite), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import stages
from .config import ConfigError, Workspace, echo_config, load_config
from .dataset import DatasetError
from .features import VIEWS
from .fusion import FusionError, FusionSpec

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("polyfeat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _view(text: str) -> str:
    if text not in VIEWS:
        raise argparse.ArgumentTypeError(f"unknown view {text!r} (choose from {', '.join(VIEWS)})")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON (defaults apply when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="polyfeat", description="Multi-view audio embeddings with late fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus and manifest")
    for name, what in (("features", "compute the view feature cache"),
                       ("train-encoder", "train one view's encoder"),
                       ("embed", "extract frozen embeddings")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--view", type=_view, action="append",
                       help="view to process (repeatable; default: every configured view)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes across views")
        if name == "train-encoder":
            p.add_argument("--resume", type=Path, help="continue from a checkpoint")
            p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    for name, what in (("train-head", "train the fusion head"), ("eval", "score a head on the test split")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--views", help="comma-separated view subset (default: config fusion views)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for per-view stages")
    return parser


def _spec_views(text: str | None, ws: Workspace) -> tuple[str, ...]:
    if text is None:
        return tuple(ws.cfg.fusion.views)
    return FusionSpec.parse(text).views


def dispatch(args, ws: Workspace) -> int:
    cmd = args.command
    if cmd == "synth-data":
        stages.synth_data(ws)
    elif cmd in ("features", "train-encoder", "embed"):
        views = args.view or list(ws.cfg.views)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if cmd == "train-encoder" and (args.resume or args.max_steps):
            if len(views) != 1:
                raise UsageError("--resume and --max-steps need exactly one --view")
            stages.train_encoder(ws, views[0], resume=args.resume, max_steps=args.max_steps)
        else:
            stages.run_per_view(ws, cmd, views, args.jobs)
    elif cmd == "train-head":
        stages.train_head(ws, _spec_views(args.views, ws))
    elif cmd == "eval":
        stages.evaluate_head(ws, _spec_views(args.views, ws))
    elif cmd == "gradcheck":
        if not stages.gradcheck_all(ws):
            log.error("gradcheck failed; see %s", ws.report_dir / "gradcheck.txt")
            return EXIT_RUNTIME
    elif cmd == "pipeline":
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        stages.pipeline(ws, args.jobs)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, base = load_config(args.config)
        ws = Workspace(cfg, base)
        ws.check()
        echo_config(cfg, ws, " ".join(["polyfeat"] + list(argv if argv is not None else sys.argv[1:])))
        return dispatch(args, ws)
    except (UsageError, ConfigError, stages.PrerequisiteError, FusionError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
