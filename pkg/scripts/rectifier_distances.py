#!/usr/bin/env python3
"""Pairwise subspace distances of the diode bases in the bridge rectifier.

Runs the first campaign iteration (one full simulation at the source
frequency) and prints, per variable, the distance matrix of the four
diodes' bases; a ``distances.csv`` holds the same numbers.
"""

import argparse
import itertools
import math
from pathlib import Path

from ddmor.integrator import IntegratorOptions
from ddmor.sampling import greedy_sample, subspace_distance
from ddmor.semiconductor import VARIABLES
from ddmor.study import load_netlist, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--netlist", default="fig9_rectifier.json")
    ap.add_argument("--elements", type=int, default=None)
    ap.add_argument("--delta", type=float, default=1e-4)
    ap.add_argument("--out", default="out/rectifier")
    args = ap.parse_args()

    netlist = load_netlist(args.netlist)
    omega = netlist.sinusoidal_frequencies[0]
    state = greedy_sample(netlist, omega, [omega], math.inf, args.delta, max_iters=1,
                          num_elements=args.elements, options=IntegratorOptions())
    branches = sorted({b for b, _ in state.bases})
    rows = []
    for v in VARIABLES:
        print(f"{v}: dims " + " ".join(str(state.bases[(b, v)].s) for b in branches))
        for a, b in itertools.combinations(branches, 2):
            d = subspace_distance(state.bases[(a, v)], state.bases[(b, v)])
            rows.append((v, a, b, d))
            print(f"   d({a}, {b}) = {d:.4e}")
    write_csv(Path(args.out) / "distances.csv", "ddmor-distances/1", ["variable", "a", "b", "distance"], rows)


if __name__ == "__main__":
    main()
