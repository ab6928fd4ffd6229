"""Command-line front end: mine, fit, composite, export, eval, synth, pipeline.

Progress goes to stderr, one machine-readable JSON summary to stdout. Every
subcommand is deterministic given (inputs, config, seed); failures exit
nonzero with a single structured error line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import PipelineConfig, config_to_dict, load_config
from .errors import ClipArtError, ConfigError, InputMissing
from . import pipeline

log = logging.getLogger("clipart3d")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clipart3d",
        description="Mine, reconstruct, and composite street objects into "
                    "clip-art supervision data.",
    )
    parser.add_argument("--config", help="JSON pipeline config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--output", help="output directory")
    parser.add_argument("--threads", type=int, help="parallel workers (0 = all cores)")
    parser.add_argument("--dry-run", action="store_true",
                        help="validate config and inputs, write nothing")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective config (with defaults) and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--scenes", type=int, help="number of scenes")

    p = sub.add_parser("mine", help="label unoccluded objects and build tracks")
    p.add_argument("--detections", help="detection stream (jsonl)")
    p.add_argument("--calibration", help="calibration file")
    p.add_argument("--delta", type=float, help="bottom-strip overlap threshold")

    p = sub.add_parser("fit", help="reconstruct pose and shape for mined tracks")
    p.add_argument("--tracks", help="tracks.json from mine")
    p.add_argument("--calibration")
    p.add_argument("--basis", help="shape basis file")
    p.add_argument("--frames", help="directory of source frames")

    p = sub.add_parser("composite", help="composite clip-art scenes")
    p.add_argument("--pool", help="pool.json from fit")
    p.add_argument("--calibration")
    p.add_argument("--basis")
    p.add_argument("--background", help="background (median) image")
    p.add_argument("--scenes", type=int, help="number of scenes")

    p = sub.add_parser("export", help="export annotations to COCO-style JSON")
    p.add_argument("--annotations", required=False, help="annotation file or directory")
    p.add_argument("--mode", choices=["amodal", "modal", "both"], default="both")

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", help="prediction annotations (file or directory)")
    p.add_argument("--gt", help="ground-truth annotations (file or directory)")
    p.add_argument("--basis", help="shape basis for 3D metrics")
    p.add_argument("--report", help="also write the report to this path")
    p.add_argument("--bins", help="write the per-bin table to this path")

    p = sub.add_parser("pipeline", help="mine, fit, composite, and export in sequence")
    p.add_argument("--corpus", help="corpus directory (synth output layout)")
    p.add_argument("--scenes", type=int)

    return parser


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.output is not None:
        updates["output"] = args.output
    if args.threads is not None:
        updates["threads"] = args.threads
    if getattr(args, "scenes", None) is not None:
        updates["n_scenes"] = args.scenes
    if getattr(args, "detections", None) is not None:
        updates["detections"] = args.detections
    if getattr(args, "calibration", None) is not None:
        updates["calibration"] = args.calibration
    if getattr(args, "basis", None) is not None:
        updates["shape_basis"] = args.basis
    if getattr(args, "frames", None) is not None:
        updates["frames_dir"] = args.frames
    if getattr(args, "background", None) is not None:
        updates["background"] = args.background
    if getattr(args, "delta", None) is not None:
        updates["mining"] = dataclasses.replace(cfg.mining, delta=args.delta)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _out_dir(cfg: PipelineConfig) -> str:
    if not cfg.output:
        raise ConfigError("no output directory set (config field 'output' or --output)")
    return cfg.output


def _dry_run_check(cfg, paths):
    for what, path in paths.items():
        if path is None:
            raise ConfigError(f"config field '{what}' is not set")
        if not os.path.exists(path):
            raise InputMissing(f"{what} not found: {path}")
    return {"dry_run": True, "validated": sorted(paths)}


def _run(args) -> dict:
    cfg = _effective_config(args)
    cmd = args.command

    if cmd == "synth":
        out = _out_dir(cfg)
        if args.dry_run:
            return {"dry_run": True, "validated": []}
        return pipeline.run_synth(cfg, out)

    if cmd == "mine":
        out = _out_dir(cfg)
        if args.dry_run:
            return _dry_run_check(cfg, {"detections": cfg.detections,
                                        "calibration": cfg.calibration})
        return pipeline.run_mine(cfg, out)

    if cmd == "fit":
        out = _out_dir(cfg)
        tracks = args.tracks
        if args.dry_run:
            return _dry_run_check(cfg, {"tracks": tracks,
                                        "calibration": cfg.calibration,
                                        "shape_basis": cfg.shape_basis,
                                        "frames_dir": cfg.frames_dir})
        return pipeline.run_fit(cfg, tracks, out)

    if cmd == "composite":
        out = _out_dir(cfg)
        if args.dry_run:
            return _dry_run_check(cfg, {"pool": args.pool,
                                        "calibration": cfg.calibration,
                                        "shape_basis": cfg.shape_basis,
                                        "background": cfg.background})
        return pipeline.run_composite(cfg, args.pool, out)

    if cmd == "export":
        out = _out_dir(cfg)
        if args.dry_run:
            return _dry_run_check(cfg, {"annotations": args.annotations})
        return pipeline.run_export(args.annotations, out, args.mode)

    if cmd == "eval":
        if args.dry_run:
            return _dry_run_check(cfg, {"pred": args.pred, "gt": args.gt})
        report = pipeline.run_eval(cfg, args.pred, args.gt, args.basis)
        if args.report:
            with open(args.report, "w") as f:
                json.dump(report, f, indent=1, sort_keys=True)
                f.write("\n")
        if args.bins:
            with open(args.bins, "w") as f:
                json.dump(report["binned"], f, indent=1, sort_keys=True)
                f.write("\n")
        return report

    if cmd == "pipeline":
        out = _out_dir(cfg)
        corpus = args.corpus
        if corpus:
            cfg = dataclasses.replace(
                cfg,
                calibration=os.path.join(corpus, "calibration.json"),
                shape_basis=os.path.join(corpus, "basis.json"),
                detections=os.path.join(corpus, "detections.jsonl"),
                background=os.path.join(corpus, "background.png"),
                frames_dir=os.path.join(corpus, "frames"),
            )
        if args.dry_run:
            return _dry_run_check(cfg, {"detections": cfg.detections,
                                        "calibration": cfg.calibration,
                                        "shape_basis": cfg.shape_basis,
                                        "background": cfg.background,
                                        "frames_dir": cfg.frames_dir})
        summary = {"stages": {}}
        log.info("stage mine")
        summary["stages"]["mine"] = pipeline.run_mine(cfg, os.path.join(out, "mined"))
        log.info("stage fit")
        summary["stages"]["fit"] = pipeline.run_fit(
            cfg, os.path.join(out, "mined", "tracks.json"), os.path.join(out, "fits"))
        log.info("stage composite")
        summary["stages"]["composite"] = pipeline.run_composite(
            cfg, os.path.join(out, "fits", "pool.json"), os.path.join(out, "clipart"))
        log.info("stage export")
        summary["stages"]["export"] = pipeline.run_export(
            os.path.join(out, "clipart", "scenes"), os.path.join(out, "coco"), "both")
        summary["output"] = out
        return summary

    raise ConfigError("no subcommand given (see --help)")


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.print_config:
            cfg = _effective_config(args)
            json.dump(config_to_dict(cfg), sys.stdout, indent=1, sort_keys=True)
            sys.stdout.write("\n")
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 2
        summary = _run(args)
    except ClipArtError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        sys.stderr.write("\n")
        return 1
    json.dump(summary, sys.stdout, indent=1, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
