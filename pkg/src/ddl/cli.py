"""Command line entry point: ``ddl <stage> [options]``.

Exit codes: 0 success, 1 other failure (including a held output lock),
2 configuration error, 3 missing upstream stage, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, MissingDependencyError, NumericalError
from .evalsuite import ALIGN_MODES
from .pipeline import STAGES, run_pipeline

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddl", description="Depth distillation from generated hard images.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=f"run {'every stage' if name == 'all' else 'the ' + name + ' stage'}")
        p.add_argument("--config", type=Path, default=None, help="YAML config (defaults apply to missing keys)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--force", action="store_true", help="overwrite outputs made under a different config")
        p.add_argument("--oracle-ablation", action="store_true",
                       help="take hard images from the condition oracle instead of the diffusion model")
        p.add_argument("--align", choices=ALIGN_MODES, default=None, help="evaluation alignment (default: lse)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.oracle_ablation:
        cfg = cfg.replace(gen_hard=_replace(cfg.gen_hard, source="oracle"))
    if args.align is not None:
        cfg = cfg.replace(eval=_replace(cfg.eval, align=args.align))
    return cfg


def _replace(section, **changes):
    try:
        return dataclasses.replace(section, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        run_pipeline(args.stage, cfg, args.out, force=args.force)
    except ConfigError as exc:
        print(f"ddl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDependencyError as exc:
        print(f"ddl: missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"ddl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (RuntimeError, OSError) as exc:
        print(f"ddl: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
