"""Command-line interface.

Subcommands:
  train <config>                 run the optimization loop
  reference <config>             exact noninteracting ground energy
  density <checkpoint> <config>  spin-resolved density from a checkpoint
  check                          run the built-in invariant suite

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
Thread count comes from SPINVMC_THREADS (default 1).
"""

from __future__ import annotations

import argparse
import sys

from . import perf

perf.set_blas_threads_from_env()  # must precede the first numpy import

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="spinvmc",
        description="Variational Monte Carlo for spinful fermions in 2D.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the optimization loop")
    p_train.add_argument("config", help="path to a run configuration file")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out-dir", help="override the output directory")
    p_train.add_argument(
        "--long-run",
        action="store_true",
        help="allow honeycomb runs beyond the iteration gate",
    )
    p_train.add_argument("--quiet", action="store_true")

    p_ref = sub.add_parser("reference", help="exact noninteracting energy")
    p_ref.add_argument("config")
    p_ref.add_argument("--seed", type=int, help=argparse.SUPPRESS)

    p_dens = sub.add_parser("density", help="density grid from a checkpoint")
    p_dens.add_argument("checkpoint")
    p_dens.add_argument("config")
    p_dens.add_argument("--out-dir", help="directory for density.csv")
    p_dens.add_argument("--quiet", action="store_true")

    p_check = sub.add_parser("check", help="run the built-in invariant suite")
    p_check.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    from .config import ConfigError, load_config

    try:
        if args.command == "train":
            from .train import train

            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            if args.out_dir:
                cfg.out_dir = args.out_dir
            artifacts = train(cfg, long_run=args.long_run, quiet=args.quiet)
            print(
                f"final energy (ma{cfg.ma_window}) = {artifacts.final_energy:.8f}\n"
                f"energy log: {artifacts.energy_csv}\n"
                f"density:    {artifacts.density_csv}\n"
                f"checkpoint: {artifacts.final_checkpoint}"
            )
        elif args.command == "reference":
            from .reference import ReferenceUnsupportedError
            from .train import reference_report

            cfg = load_config(args.config)
            try:
                report = reference_report(cfg)
            except ReferenceUnsupportedError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            print(f"hamiltonian:   {report['hamiltonian']}")
            print(f"n_electrons:   {report['n_electrons']}")
            print(f"ground energy: {report['energy']:.10f}")
            print("filled levels:", " ".join(f"{e:.10f}" for e in report["levels"]))
            print(
                "convergence:   "
                + " -> ".join(f"{e:.12f}" for _, e in report["history"])
                + f" (cutoff {report['cutoff']}, "
                f"last shift {report['converged_to']:.3g})"
            )
        elif args.command == "density":
            from .train import compute_density

            cfg = load_config(args.config)
            out = None
            if args.out_dir:
                import os

                os.makedirs(args.out_dir, exist_ok=True)
                out = os.path.join(args.out_dir, "density.csv")
            path = compute_density(args.checkpoint, cfg, out, quiet=args.quiet)
            print(path)
        elif args.command == "check":
            from .selfcheck import run_invariant_checks

            results = run_invariant_checks(quiet=args.quiet)
            failed = [name for name, ok, _ in results if not ok]
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            if failed:
                return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
