"""Command-line entry point.

Exit codes: 0 success, 2 invalid input (config, missing upstream stage),
3 solver non-convergence or a stage that could not produce its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, RunConfig, load_config
from .pipeline import STAGES, MissingArtifactError, StageFailure, run_pipeline

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lunardescent",
                                description="Powered-descent forward pass, controllability analysis and "
                                            "terminal-descent simulation.")
    p.add_argument("--config", metavar="PATH", help="JSON configuration (defaults when omitted)")
    p.add_argument("--stage", default="all", choices=STAGES + ("all",), help="stage to run (default: all)")
    p.add_argument("--out", metavar="DIR", default="results", help="output directory (default: results)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    log = logging.getLogger("lunardescent")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        manifest = run_pipeline(cfg, args.stage, args.out)
    except (ConfigError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    for name, rec in manifest.stages.items():
        log.info("%s: %s (%.1f s)", name, rec.status, rec.seconds)
    if not manifest.converged:
        bad = [n for n, r in manifest.stages.items() if r.status != "ok"]
        print(f"warning: not converged: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
