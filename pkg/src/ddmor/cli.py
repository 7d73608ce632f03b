"""Command-line entry point: ``ddmor {simulate,pod-study,sample,distance}``."""

import argparse
import logging
import sys
from pathlib import Path

from . import study
from .errors import ConfigError, DDMORError, SolverError
from .pod import read_basis
from .sampling import subspace_distance

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("ddmor")


def _deltas(text):
    out = []
    for tok in text.replace(",", " ").split():
        try:
            out.append(float(tok))
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {tok!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty delta list")
    return out


def _common(p):
    p.add_argument("--netlist", required=True, help="JSON netlist (bundled names resolve)")
    p.add_argument("--elements", type=int, default=None, help="mesh elements per device")
    p.add_argument("--periods", type=float, default=3.0, help="simulated source periods")
    p.add_argument("--rtol", type=float, default=1e-6)


def build_parser():
    parser = argparse.ArgumentParser(prog="ddmor", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="full transient simulation to CSV")
    _common(p)
    p.add_argument("--freq", type=float, required=True, help="source frequency in Hz")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pod-study", help="reduction error and basis size versus delta")
    _common(p)
    p.add_argument("--ref-freq", type=float, required=True)
    p.add_argument("--delta", type=_deltas, nargs="+", required=True, help="e.g. 1e-2,1e-3 or 1e-2 1e-3")
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("sample", help="greedy reference frequency selection")
    _common(p)
    p.add_argument("--pspace", type=float, nargs=2, metavar=("MIN", "MAX"), required=True)
    p.add_argument("--ntest", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--tol", type=float, required=True)
    p.add_argument("--true-error", action="store_true", help="also run the full model on the test set")
    p.add_argument("--omega1", type=float, default=None, help="first reference (default: netlist frequency)")
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--strategy", choices=("resvd-all", "pod-of-bases"), default="resvd-all")
    p.add_argument("--workers", type=int, default=None, help="parallel test-set evaluations")
    p.add_argument("--out", default="campaign", help="output directory")

    p = sub.add_parser("distance", help="subspace distance of two basis CSV files")
    p.add_argument("a")
    p.add_argument("b")
    return parser


def cmd_simulate(args):
    cfg = study.SimulationConfig(args.netlist, args.freq, args.elements, args.periods, rtol=args.rtol)
    model, traj = study.run_simulation(cfg)
    path = study.write_trajectory(Path(args.out) / "trajectory.csv", traj, model)
    print(f"{len(traj)} time points written to {path}")


def cmd_pod_study(args):
    deltas = [d for group in args.delta for d in group]
    cfg = study.SimulationConfig(args.netlist, args.ref_freq, args.elements, args.periods, rtol=args.rtol)
    model, _, rows = study.pod_study(cfg, deltas)
    path = study.study_rows_to_csv(Path(args.out) / "pod_study.csv", model, rows)
    for r in rows:
        status = "failed" if r["failed_at"] is not None else f"{r['aggregate']:.4e}"
        print(f"delta={r['delta']:g} s={r['total']} error={status}")
    print(f"written to {path}")


def cmd_sample(args):
    cfg = study.CampaignConfig(
        args.netlist, None, args.elements, args.periods, rtol=args.rtol,
        pspace=tuple(args.pspace), ntest=args.ntest, delta=args.delta, tol=args.tol,
        omega1=args.omega1, max_iters=args.max_iters, strategy=args.strategy,
        true_error=args.true_error, workers=args.workers, out=args.out,
    )
    state = study.run_campaign(cfg)
    study.write_campaign(cfg.out, state)
    for h in state.history:
        print(f"step {h['iteration']}: max weighted residual {h['max_residual']:.4e} at {h['argmax']:.4e} Hz")
    print(f"stopped: {state.stop_reason}; outputs in {cfg.out}")


def cmd_distance(args):
    try:
        A, _ = read_basis(args.a)
        B, _ = read_basis(args.b)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read basis: {exc}")
    print(f"{subspace_distance(A, B):.6f}")


COMMANDS = {
    "simulate": cmd_simulate,
    "pod-study": cmd_pod_study,
    "sample": cmd_sample,
    "distance": cmd_distance,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DDMORError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
