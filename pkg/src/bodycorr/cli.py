"""Command-line entry point: ``bodycorr <stage> [--config PATH] [--seed N] [--preset desk|paper] [--force]``."""
import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="bodycorr", description="Dense body correspondence pipeline.")
    parser.add_argument("stage", choices=list(pipeline.STAGES) + ["all"])
    parser.add_argument("--config", metavar="PATH", help="flat 'key = value' config file")
    parser.add_argument("--seed", type=int, help="global rng seed (overrides run.seed)")
    parser.add_argument("--preset", choices=["desk", "paper"], help="base settings (default: desk)")
    parser.add_argument("--force", action="store_true", help="recompute even if artifacts are current")
    parser.add_argument("--out", metavar="DIR", help="run directory (overrides run.out_dir)")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one config key")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def load_config(args):
    if args.config:
        try:
            cfg = RunConfig.load(args.config, preset=args.preset)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    else:
        cfg = RunConfig(preset=args.preset or "desk")
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    if args.out:
        cfg.set("run.out_dir", args.out)
    return cfg.validate()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.stage == "all":
            pipeline.run_all(cfg, force=args.force)
        else:
            pipeline.run_stage(args.stage, cfg, force=args.force)
    except Exception as exc:  # any stage failure maps to exit 1
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    if args.stage in ("report", "all"):
        with open(f"{cfg['run.out_dir']}/report/summary.txt") as fh:
            sys.stdout.write(fh.read())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
