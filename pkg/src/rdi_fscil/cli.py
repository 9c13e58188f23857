"""Command-line surface: run, ablate, report, validate-config.

Exit codes: 0 success, 2 configuration error, 3 training divergence."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .core import DivergenceError, ScheduleError
from .experiment import ABLATION_VARIANTS, render_report, run_ablation, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

RUN_ROOT_ENV = "RDI_FSCIL_RUN_ROOT"


def _run_root(args) -> Path | None:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    env = os.environ.get(RUN_ROOT_ENV)
    return Path(env) if env else None


def _load_ablation_section(path: Path) -> tuple[list[str], list[int]]:
    try:
        import tomllib
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib

    with open(path, "rb") as f:
        raw = tomllib.load(f)
    section = raw.get("ablation", {})
    variants = section.get("variants", list(ABLATION_VARIANTS))
    seeds = section.get("seeds", [0, 1, 2])
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"[ablation] unknown variants {unknown}; known: {list(ABLATION_VARIANTS)}")
    return variants, seeds


def _load_config_dropping_ablation(path: Path):
    try:
        import tomllib
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib

    from .config import config_from_dict

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    raw.pop("ablation", None)
    return config_from_dict(raw)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rdi-fscil",
        description="Few-shot class-incremental learning with redundancy "
                    "decoupling and dummy-class integration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--run-root", help=f"output root (overrides config and ${RUN_ROOT_ENV})")
    p_run.add_argument("--schedule-only", action="store_true",
                       help="build and report the schedule without training")

    p_abl = sub.add_parser("ablate", help="run a loss-term ablation grid")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--run-root")

    p_rep = sub.add_parser("report", help="render a markdown summary and plots for a run")
    p_rep.add_argument("run_dir")

    p_val = sub.add_parser("validate-config", help="check a config file and exit")
    p_val.add_argument("--config", required=True)

    args = parser.parse_args(argv)

    try:
        if args.command == "validate-config":
            _load_config_dropping_ablation(Path(args.config))
            _load_ablation_section(Path(args.config))
            print("config ok")
            return EXIT_OK

        if args.command == "run":
            cfg = load_config(Path(args.config))
            result = run_experiment(cfg, schedule_only=args.schedule_only,
                                    run_root=_run_root(args))
            print(f"run complete: {result.run_dir}")
            return EXIT_OK

        if args.command == "ablate":
            cfg = _load_config_dropping_ablation(Path(args.config))
            variants, seeds = _load_ablation_section(Path(args.config))
            rows = run_ablation(cfg, variants, seeds, run_root=_run_root(args))
            print(f"ablation complete: {len(rows)} cells")
            return EXIT_OK

        if args.command == "report":
            out = render_report(Path(args.run_dir))
            print(f"report written: {out}")
            return EXIT_OK

    except (ConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.dump:
            print(f"diagnostic dump: {exc.dump}", file=sys.stderr)
        return EXIT_DIVERGED

    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
