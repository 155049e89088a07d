"""Command line entry point: ``cortexbridge <stage> --config cfg.json [--a.b value ...]``.

Exit codes: 0 success, 1 error, 2 missing upstream artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import MissingUpstream
from .config import ExperimentConfig, parse_value
from .stages import STAGES, run_stage

EXIT_OK, EXIT_ERROR, EXIT_MISSING = 0, 1, 2


def parse_overrides(extra: list[str]) -> dict:
    """Turn ``["--bridge.tau", "0.05", "--train.epochs=3"]`` into a dotted mapping."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ValueError(f"expected --dotted.key, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ValueError(f"override {tok} has no value")
            value = extra[i + 1]
            i += 2
        out[key] = parse_value(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cortexbridge",
        description="Flatten, enhance and validate cortical fMRI on brain disks.",
        epilog="Any --dotted.key VALUE after the known options overrides the config (e.g. --bridge.tau 0.05).",
    )
    p.add_argument("stage", choices=[*STAGES, "all"])
    p.add_argument("--config", help="experiment JSON file (defaults apply to missing keys)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, parse_overrides(extra))
        result = run_stage(args.stage, cfg)
    except MissingUpstream as exc:
        print(f"cortexbridge: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # reported as a plain error code for scripting
        print(f"cortexbridge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.stage in ("eval", "report", "param"):
        summary = result if args.stage != "eval" else result["mean_r2"]
        if args.stage == "report":
            summary = {"table": result["table"], "improvement": result["improvement"]}
        print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
