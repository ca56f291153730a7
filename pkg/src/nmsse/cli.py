"""Command line entry point: ``nmsse <mode> [--config FILE] [overrides]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 validation failure.
"""

import argparse
import logging
import sys

from .config import MODES, load_config, validate_config
from .errors import ConfigError, NmsseError
from .runner import ValidationFailure, run

log = logging.getLogger("nmsse")

OVERRIDES = [
    ("--seed", "run.seed", int),
    ("--dt", "grid.dt", float),
    ("--t-max", "grid.t_max", float),
    ("--n-eta", "run.n_eta", int),
    ("--n-xi", "run.n_xi", int),
    ("--out-dir", "output.directory", str),
    ("--threads", "run.threads", int),
    ("--scheme", "run.scheme", str),
    ("--inner", "run.inner", str),
    ("--times", "run.times", str),
    ("--j-policy", "run.j_policy", str),
    ("--repetitions", "run.repetitions", int),
    ("--n-nonlinear", "run.n_nonlinear", int),
    ("--n-reweighted", "run.n_reweighted", int),
    ("--xi-file", "run.xi_file", str),
]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nmsse",
        description="Simulate linear and norm-preserving non-Markovian stochastic "
                    "Schrodinger equations with an auxiliary time-local noise.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("run",) + MODES:
        p = sub.add_parser(mode, help="use run.mode from the config" if mode == "run" else None)
        p.add_argument("--config", "-c", help="INI experiment file (defaults reproduce the dephasing example)")
        for flag, key, typ in OVERRIDES:
            p.add_argument(flag, dest=key, type=typ, default=None, help=f"override {key}")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {key: getattr(args, key) for _, key, _ in OVERRIDES}
        if args.mode != "run":
            overrides["run.mode"] = args.mode
        cfg = validate_config(cfg.with_overrides(**overrides))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return 4
    except (NmsseError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    log.info("wrote %d files to %s", len(manifest["files"]), cfg.output.directory)
    return 0


if __name__ == "__main__":
    sys.exit(main())
