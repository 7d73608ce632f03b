#!/usr/bin/env python3
"""Source current of the single-diode circuit at several frequencies.

Writes ``ratios.csv`` (frequency, reverse/forward peak ratio) and one
``jV_<freq>.csv`` trace per frequency, ready for plotting.
"""

import argparse
from pathlib import Path

from ddmor.study import SimulationConfig, rectification_ratio, run_simulation, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--netlist", default="fig1_basic.json")
    ap.add_argument("--freqs", type=float, nargs="+", default=[1e6, 1e9, 5e9])
    ap.add_argument("--elements", type=int, default=None)
    ap.add_argument("--out", default="out/frequency")
    args = ap.parse_args()

    out = Path(args.out)
    ratios = []
    for f in args.freqs:
        model, traj = run_simulation(SimulationConfig(args.netlist, f, args.elements))
        r = rectification_ratio(traj, model)
        ratios.append((f, r))
        j = traj.states[:, model.layout["j_V"].start]
        write_csv(out / f"jV_{f:g}.csv", "ddmor-source-current/1", ["t", "j_V"], zip(traj.times, j))
        print(f"{f:10.3e} Hz  reverse/forward = {r:.4f}")
    write_csv(out / "ratios.csv", "ddmor-frequency-study/1", ["frequency", "ratio"], ratios)


if __name__ == "__main__":
    main()
