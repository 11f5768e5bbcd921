"""Command line entry point: ``crossgen {train,evaluate,diagnose,involve,all,synth}``."""

import argparse
import logging
import sys

from .config import load_config
from .exceptions import CrossgenError
from .pipeline import EXIT_FATAL, run_experiment

STAGES = {
    "train": ("train",),
    "evaluate": ("evaluate", "plots"),
    "diagnose": ("diagnose", "plots"),
    "involve": ("involve", "plots"),
    "all": ("train", "evaluate", "diagnose", "involve", "plots"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="crossgen", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage(s)")
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--device", help="torch device for training/inference, e.g. cpu or cuda")
    p = sub.add_parser("synth", help="write synthetic demo corpora and an experiment config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200, help="images per class")
    p.add_argument("--n-strata", type=int, default=40, help="images per involvement stratum")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            from .synthetic import write_demo

            path = write_demo(args.out, args.n, args.n_strata, args.resolution, args.seed)
            print(path)
            return 0
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.device)
        status, exp = run_experiment(cfg, STAGES[args.command])
    except (CrossgenError, OSError, KeyError, TypeError) as exc:
        logging.getLogger("crossgen").error("%s", exc)
        return EXIT_FATAL
    for p in exp.problems:
        logging.getLogger("crossgen").warning("problem: %s", p)
    print(exp.out)
    return status


if __name__ == "__main__":
    sys.exit(main())
