"""Command-line entry point.

    autoprep run --config cfg.json --input manifest.jsonl --out dir \
        [--backends backends.json] [--stages enhance,segment,...] \
        [--resume] [--workers N] [--seed S]
    autoprep stats <dir>
    autoprep export-embeddings <dir>

Exit code 0 on success; nonzero with a machine-readable JSON error summary
on stderr otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .backends import BackendSet, load_backend_spec
from .core import STAGE_NAMES, PipelineConfig, StageToggles, load_config
from .pipeline import compute_stats, export_embeddings, load_manifest, run_pipeline


def _parse_stages(value: str) -> StageToggles:
    wanted = [name.strip() for name in value.split(",") if name.strip()]
    unknown = [name for name in wanted if name not in STAGE_NAMES]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown stages {unknown}; valid: {', '.join(STAGE_NAMES)}"
        )
    return StageToggles(**{name: name in wanted for name in STAGE_NAMES})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autoprep",
        description="Quality-filtered, speaker-labeled corpus shards from raw recordings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the preprocessing pipeline")
    run.add_argument("--config", help="JSON pipeline config (defaults when omitted)")
    run.add_argument("--input", required=True, help="input manifest (JSONL)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument(
        "--backends",
        help="JSON backend-set description; defaults to no backends "
        "(only stage-less runs work without one)",
    )
    run.add_argument(
        "--stages",
        type=_parse_stages,
        help="comma-separated stages to enable, overriding the config "
        f"(any of: {', '.join(STAGE_NAMES)}; persist always runs)",
    )
    run.add_argument("--resume", action="store_true", help="reuse existing checkpoints")
    run.add_argument("--workers", type=int, default=1, help="parallel worker count")
    run.add_argument("--seed", type=int, help="override the config RNG seed")

    stats = sub.add_parser("stats", help="recompute corpus statistics for a run")
    stats.add_argument("out_dir")

    export = sub.add_parser(
        "export-embeddings", help="write per-batch embedding sidecar files"
    )
    export.add_argument("out_dir")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.stages is not None:
        config = dataclasses.replace(config, stages=args.stages)
    if args.seed is not None:
        config = dataclasses.replace(config, rng_seed=args.seed)
    backends = load_backend_spec(args.backends) if args.backends else BackendSet()
    result = run_pipeline(
        args.input,
        config,
        backends,
        args.out,
        resume=args.resume,
        workers=args.workers,
    )
    summary = {
        "out_dir": str(result.out_dir),
        "segments": len(result.manifest),
        "unlabeled_segments": len(result.unlabeled),
        "speakers": result.stats.num_speakers,
        "total_duration_h": result.stats.total_duration_h,
        "skipped_recordings": result.skipped_recordings,
    }
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    records = load_manifest(f"{args.out_dir}/manifest.jsonl")
    print(json.dumps(compute_stats(records).to_dict(), indent=2))
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    written = export_embeddings(args.out_dir)
    print(json.dumps({"written": [str(p) for p in written]}, indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "stats": _cmd_stats, "export-embeddings": _cmd_export}
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
