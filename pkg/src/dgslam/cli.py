"""Command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import PROFILES, RunConfig
from .errors import SlamError
from .pipeline import run_pipeline


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgslam", description="Monocular Gaussian splatting SLAM on synthetic or TUM-style input.")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--input", help="world spec file or TUM-style dataset directory")
    p.add_argument("--synthetic", help="synthetic world spec (INI)")
    p.add_argument("--output", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(PROFILES), help="dataset hyperparameter profile")
    p.add_argument("--no-loop-closure", action="store_true", help="disable loop edges and global BA")
    p.add_argument("--no-mono-depth", action="store_true", help="no mono completion of the proxy depth, no DSPO")
    p.add_argument("--no-deform", action="store_true", help="do not deform the map on keyframe updates")
    p.add_argument("--no-multiview-filter", action="store_true", help="use all multi-view depth, not only consistent pixels")
    p.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_ini(args.config) if args.config else RunConfig()
    if args.profile:
        cfg.apply_profile(args.profile)
    run = cfg.run
    if args.input:
        run.input = args.input
    if args.synthetic:
        run.synthetic = args.synthetic
    if args.output:
        run.output = args.output
    if args.seed is not None:
        run.seed = args.seed
    run.loop_closure &= not args.no_loop_closure
    run.mono_depth &= not args.no_mono_depth
    run.deform &= not args.no_deform
    run.multiview_filter &= not args.no_multiview_filter
    run.verbosity = max(run.verbosity, 1 + args.verbose)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except SlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.dump_config:
        print(cfg.dump())
        return 0
    logging.basicConfig(level=logging.INFO if cfg.run.verbosity > 1 else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        report = run_pipeline(cfg)
    except SlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for k, v in report.metrics.items():
        print(f"{k}: {v}")
    print(f"runtime_s: {report.runtime:.1f}")
    print(f"artifacts: {cfg.run.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
