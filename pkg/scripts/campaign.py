#!/usr/bin/env python3
"""Greedy frequency sampling on the single-diode circuit with a progress log per iteration."""

import argparse
import logging

from ddmor.study import CampaignConfig, run_campaign, write_campaign


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--netlist", default="fig1_basic.json")
    ap.add_argument("--elements", type=int, default=None)
    ap.add_argument("--pspace", type=float, nargs=2, default=[1e8, 1e12])
    ap.add_argument("--omega1", type=float, default=1e10)
    ap.add_argument("--ntest", type=int, default=25)
    ap.add_argument("--delta", type=float, default=1e-7)
    ap.add_argument("--tol", type=float, default=0.0)
    ap.add_argument("--max-iters", type=int, default=4)
    ap.add_argument("--true-error", action="store_true")
    ap.add_argument("--out", default="out/campaign")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = CampaignConfig(args.netlist, elements=args.elements, pspace=tuple(args.pspace), ntest=args.ntest,
                         delta=args.delta, tol=args.tol, omega1=args.omega1, max_iters=args.max_iters,
                         true_error=args.true_error, out=args.out)

    def progress(state):
        write_campaign(cfg.out, state)  # partial results survive an interrupted run

    state = run_campaign(cfg, callback=progress)
    write_campaign(cfg.out, state)
    for h in state.history:
        refs = ", ".join(f"{w:.4e}" for w in h["references"])
        print(f"step {h['iteration']}: P = {{{refs}}}  max residual {h['max_residual']:.4e} at {h['argmax']:.4e}")
    print("stopped:", state.stop_reason)


if __name__ == "__main__":
    main()
