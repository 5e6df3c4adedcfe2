"""``corrpost`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, CorrpostError

STAGES = {
    "gen-data": pipeline.gen_data,
    "train-filter": pipeline.train_filters,
    "correlate": pipeline.correlate,
    "prep": pipeline.prep,
    "train-cnn": pipeline.train_cnn,
    "eval": pipeline.evaluate,
    "cross-eval": pipeline.cross_domain_eval,
    "report": pipeline.render_reports,
    "run": pipeline.run_all,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON "
                        "(default: <out-dir>/config.json, else built-in defaults for gen-data/run)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--crop-mode", choices=("center", "peak"))
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="corrpost", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args) -> pipeline.ExperimentConfig:
    if args.config is not None:
        cfg = pipeline.ExperimentConfig.load(args.config)
    elif (args.out_dir / "config.json").exists():
        cfg = pipeline.ExperimentConfig.load(args.out_dir / "config.json")
    elif args.command in ("gen-data", "run"):
        cfg = pipeline.ExperimentConfig()
    else:
        raise ConfigError(f"no config given and {args.out_dir}/config.json is missing")
    overrides = {k: v for k, v in (("seed", args.seed), ("crop_mode", args.crop_mode),
                                   ("threads", args.threads)) if v is not None}
    if overrides:
        d = cfg.__dict__ | overrides
        cfg = pipeline.ExperimentConfig.from_dict(d)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        result = STAGES[args.command](cfg, args.out_dir)
    except CorrpostError as exc:
        print(f"corrpost {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command in ("eval", "cross-eval"):
        print(pipeline.report_text(result), end="")
    elif args.command == "report":
        for path in result:
            print(path.read_text(), end="")
    elif args.command == "run":
        for rep in result:
            print(pipeline.report_text(rep))
    return 0


if __name__ == "__main__":
    sys.exit(main())
