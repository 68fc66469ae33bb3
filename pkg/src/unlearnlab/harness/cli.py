"""``unlearnlab`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys

from ..nd import NonFiniteError
from ..train import TrainingDiverged
from .config import ConfigError, load_config
from .runner import STAGES, StaleCacheError, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CACHE = 0, 2, 3, 4

log = logging.getLogger("unlearnlab")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearnlab", description="Machine unlearning desk benchmark")
    sub = p.add_subparsers(dest="stage", required=True)
    for stage in (*STAGES, "all"):
        s = sub.add_parser(stage, help=f"run the {stage} stage" if stage != "all"
                           else "run every stage")
        s.add_argument("--config", required=True, help="TOML experiment config")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides seeds)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1", ["--jobs"])
        cfg = load_config(args.config).with_overrides(seeds=args.seeds, out=args.out)
        out = run_stage(cfg, args.stage, args.jobs)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except StaleCacheError as exc:
        log.error("stale cache: %s", exc)
        return EXIT_CACHE
    if args.stage in ("report", "all"):
        print((out / "report.md").read_text(), end="")
    log.info("%s finished; results in %s", args.stage, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
