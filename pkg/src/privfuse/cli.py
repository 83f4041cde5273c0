"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 validation (bad config, input or file
format), 3 numeric failure (divergence, failed invariant). On failure a JSON
error record is printed to stderr and written to ``<out_dir>/<command>.error.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import pipeline
from .embeddings import EmbeddingFormatError, load_embeddings
from .pipeline import PipelineConfig, Workspace

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("sanitize", "embed", "align", "fuse", "eval", "run", "sweep", "tmr", "verify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key = value configuration file")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-o", "--out", help="output directory (overrides the config; env PRIVFUSE_OUT_DIR wins)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="privfuse", description="Privacy-preserving cross-network user embedding pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "sanitize": "perturb attributes, edges and post text of both graphs",
        "embed": "train the relation-aware encoder on each sanitized graph",
        "align": "learn the cross-network mapping and predict anchor users",
        "fuse": "fuse the two embedding tables over the predicted anchors",
        "eval": "interest prediction and attribute-inference attacks",
        "run": "sanitize, embed, align, fuse and eval in sequence",
        "sweep": "repeat the pipeline over the sweep_eps_a grid and emit a plot CSV",
        "tmr": "task-relevance ratios per data type and the budget split they imply",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "tmr":
            sp.add_argument("--precisions", help="JSON table {task|gender|occupation: {data type: precision}}")
    vp = sub.add_parser("verify", parents=[common], help="run the fast invariant suite")
    vp.add_argument("--restarts", type=int, default=10)
    vp.add_argument("--files", nargs="*", default=[], help="embedding files to validate")
    return p


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (FloatingPointError, ZeroDivisionError, OverflowError)):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def _load_config(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return PipelineConfig.from_sources(args.config, overrides)


def _verify(args) -> int:
    from .verify import run_checks

    failed = False
    for r in run_checks(args.restarts):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        failed |= not r.passed
    for f in args.files:
        try:
            t = load_embeddings(f)
            print(f"PASS load {f}: {len(t)} x {t.dim}")
        except (EmbeddingFormatError, FileNotFoundError, ValueError) as exc:
            print(f"FAIL load {f}: {exc}")
            failed = True
    return EXIT_NUMERIC if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("privfuse: a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    if args.quiet:
        warnings.simplefilter("ignore")
    ws = None
    try:
        if args.command == "verify":
            return _verify(args)
        cfg = _load_config(args)
        ws = Workspace(cfg.out_dir)
        stale = ws.path(f"{args.command}.error.json")
        if stale.exists():
            stale.unlink()
        if args.command == "run":
            pipeline.run_all(cfg, ws)
            doc = ws.load_manifest("eval")
        elif args.command == "sweep":
            doc = pipeline.stage_sweep(cfg, ws)
        elif args.command == "tmr":
            doc = pipeline.stage_tmr(cfg, ws, args.precisions)
        else:
            doc = pipeline.STAGE_FUNCS[args.command](cfg, ws)
        if not args.quiet:
            _report(args.command, doc, ws)
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = _classify(exc)
        removed = ws.discard_partial() if ws is not None else []
        record = {
            "command": args.command,
            "exit_code": code,
            "error": type(exc).__name__,
            "message": str(exc),
            "removed_partial_outputs": removed,
        }
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if ws is not None:
            ws.path(f"{args.command}.error.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return code


def _report(command: str, doc: dict, ws: Workspace) -> None:
    root = Path(ws.root)
    if command in ("eval", "run"):
        for k, v in sorted(doc["summary"].items()):
            print(f"{k:40s} {v:.4f}")
    elif command == "sweep":
        print(root / doc["csv"])
    elif command == "tmr":
        for k, r in doc["rows"].items():
            print(f"{k:12s} task={r['task']:.3f} gender={r['gender']:.3f} occupation={r['occupation']:.3f} tmr={r['tmr']:.3f}")
        print("allocation", json.dumps(doc["allocation"], sort_keys=True))
    elif command == "align":
        print(f"{doc['n_anchors']} anchors -> {root / doc['anchors']}")
    else:
        print(f"{command}: wrote {root / (command + '.json')}")


if __name__ == "__main__":
    sys.exit(main())
