"""Command line entry point: ``einkrylov <subcommand> [options]``.

Exit status is 0 on success, 2 when an iterative solve did not converge
and 1 on input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .bench import PIPELINES, PROBLEMS, ConfigError, ExperimentConfig, run_experiment
from .lyapunov import METHODS
from .tensor import TensorError

log = logging.getLogger("einkrylov")

_HELP = {
    "gen": "generate A, B, C and write them as tensor files",
    "reduce": "Krylov model reduction with frequency-response CSV and reduced matrices",
    "lyap": "low-rank solve of the discrete Lyapunov (Stein) equation",
    "bt": "balanced truncation from low-rank Gramians",
    "freqresp": "frequency response of the full and reduced systems",
    "bench": "Lyapunov solver sweep over problem sizes and the four methods",
}

# command line flag -> config field
_OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "method": "method",
    "eps": "eps",
    "dtol": "dtol",
    "m_max": "m_max",
    "grid": "grid_size",
    "problem": "problem",
    "size": "size",
    "order": "m",
    "sizes": "bench_sizes",
    "repeats": "bench_repeats",
}


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors: exit status 1 rather than argparse's 2,
    which is reserved for non-convergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="einkrylov",
        description="Tensor Krylov methods for MLTI model reduction and Stein equations.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--eps", type=float, help="residual tolerance")
        p.add_argument("--dtol", type=float, help="relative truncation tolerance")
        p.add_argument("--m-max", type=int, dest="m_max", help="maximum outer iterations")
        p.add_argument("--grid", type=int, help="frequency grid size")
        p.add_argument("--problem", choices=PROBLEMS)
        p.add_argument("--size", type=int, nargs=4, metavar=("N1", "N2", "K1", "K2"))
        p.add_argument("--order", type=int, help="Arnoldi steps for reduce/freqresp")
        if name == "bench":
            p.add_argument("--sizes", type=int, nargs="+", help="grid sizes N to sweep")
            p.add_argument("--repeats", type=int, help="timing repetitions per run")
    return parser


def make_config(args) -> ExperimentConfig:
    base = {}
    if args.config:
        base = ExperimentConfig.from_json(args.config).to_dict()
    for flag, key in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        report, status = run_experiment(cfg, args.command)
    except (ConfigError, TensorError, ValueError, OSError, TypeError) as exc:
        print(f"einkrylov: error: {exc}", file=sys.stderr)
        return 1
    summary = {k: report[k] for k in ("pipeline", "status", "artifacts") if k in report}
    print(json.dumps(summary, sort_keys=True))
    if status == 2:
        print("einkrylov: iteration did not converge", file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
