"""Command-line front end.

    mantis-lab <mode> [--config cfg.json] [--override key=value ...]
               [--out runs/my-run]

Modes: generate, train, eval, analyze, ablate, complexity.  The mode
argument overrides the config's ``mode`` field.  Exit code 0 on
success; failures print a JSON error record to stderr and exit 2 for
configuration problems, 1 otherwise.  MANTIS_SEED overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, load_config
from .errors import ArgumentError, ConfigError, ValidationError
from .runner import run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mantis-lab",
        description="Desk-scale selective-SSM adaptation laboratory")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (default: runs/<mode>-<hash>)")
    parser.add_argument("--axis", default=None,
                        help="ablation axis (ablate mode shortcut)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.override)
        overrides.append(f"mode={args.mode}")
        if args.axis:
            overrides.append(f"ablate.axis={args.axis}")
        cfg = load_config(args.config, overrides)
        out_dir = args.out or Path("runs") / f"{cfg.mode}-{cfg.digest[:8]}"
        result = run_experiment(cfg, out_dir)
        print(json.dumps({"ok": True, "out_dir": str(out_dir),
                          "config_hash": cfg.digest,
                          "result": _summarize(result)}))
        return 0
    except (ConfigError, ArgumentError) as e:
        _emit_error("config", e)
        return 2
    except (ValidationError, Exception) as e:  # noqa: BLE001
        _emit_error(type(e).__name__, e)
        return 1


def _summarize(result):
    if hasattr(result, "as_dict"):
        return result.as_dict()
    if isinstance(result, (dict, list)):
        return result
    return str(result)


def _emit_error(kind: str, exc: Exception) -> None:
    record = {"ok": False, "error": kind, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
