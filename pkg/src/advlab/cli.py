"""Command line entry point: ``advlab <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
"""

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, desk_config, load_config
from .datasets import IdxFormatError
from .pipeline import COMMANDS, STAGES, Pipeline, StageFailed

log = logging.getLogger("advlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="advlab", description="Desk-scale adversarial robustness experiments.")
    p.add_argument("command", choices=sorted(COMMANDS) + ["config"],
                   help="stage group to run; 'report' rewrites report.json from finished stages, "
                        "'config' prints the effective configuration")
    p.add_argument("--config", help="INI experiment config (default: the standard desk experiment)")
    p.add_argument("--out", help="output directory (ADVLAB_OUT overrides)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--stage", choices=STAGES, help="rerun from this stage, discarding its checkpoint and later ones")
    p.add_argument("--jobs", type=int, default=1, help="worker threads within a stage")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def echoed_config(out):
    """The configuration recorded in an existing report, if any."""
    if not out:
        return None
    path = os.path.join(out, "report.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh)["config"])


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is None and args.command == "report":
            cfg = echoed_config(os.environ.get("ADVLAB_OUT") or args.out)
        if cfg is None:
            cfg = desk_config()
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        out = os.environ.get("ADVLAB_OUT") or args.out or cfg.out
        cfg.out = out
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "config":
        print(cfg.to_ini())
        return EXIT_OK

    pipe = Pipeline(cfg, out, jobs=args.jobs, log=log.info)
    try:
        report = pipe.run(COMMANDS[args.command], resume_from=args.stage)
    except StageFailed as exc:
        print(f"numeric failure in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IdxFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.command == "report" and not report["stages"]:
        print(f"no finished stages under {out}", file=sys.stderr)
        return EXIT_IO
    log.info(json.dumps({"out": str(out), "checksum": report["checksum"], "stages": list(report["stages"])}))
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
