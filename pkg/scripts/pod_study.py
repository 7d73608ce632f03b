#!/usr/bin/env python3
"""Reduction error and basis size against the information gap target.

One full run at the reference frequency, then a reduced run per delta
(``pod_study.csv``) and the retained dimensions for a finer delta list
(``basis_growth.csv``), which needs no reduced runs.
"""

import argparse
from pathlib import Path

from ddmor.pod import SnapshotStore, device_snapshots, merge_bases
from ddmor.study import SimulationConfig, pod_study, study_rows_to_csv, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--netlist", default="fig1_basic.json")
    ap.add_argument("--ref-freq", type=float, default=1e10)
    ap.add_argument("--elements", type=int, default=None)
    ap.add_argument("--deltas", type=float, nargs="+", default=[1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7])
    ap.add_argument("--growth-deltas", type=float, nargs="+",
                    default=[1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10])
    ap.add_argument("--out", default="out/pod")
    args = ap.parse_args()

    out = Path(args.out)
    cfg = SimulationConfig(args.netlist, args.ref_freq, args.elements)
    model, ftraj, rows = pod_study(cfg, args.deltas)
    study_rows_to_csv(out / "pod_study.csv", model, rows)
    for r in rows:
        err = "failed" if r["failed_at"] is not None else f"{r['aggregate']:.3e}"
        print(f"delta {r['delta']:g}: s = {r['total']:3d}, error {err}, "
              f"reduced {r['t_reduced']:.1f} s, full {r['t_full']:.1f} s")

    snaps = {}
    for k, b in enumerate(model.s_branches):
        for v, Y in device_snapshots(ftraj.states[:, model.layout[b.name]], model.devices[k]).items():
            snaps[(b.name, v)] = Y
    keys = sorted(snaps)
    growth = []
    for d in args.growth_deltas:
        bases = merge_bases(SnapshotStore(), snaps, model.fem, d)
        dims = [bases[k].s for k in keys]
        growth.append([d, *dims, sum(dims)])
    header = ["delta", *[f"s_{b}.{v}" for b, v in keys], "s_total"]
    write_csv(out / "basis_growth.csv", "ddmor-basis-growth/1", header, growth)
    print("basis growth:", ", ".join(f"{g[0]:g}: {g[-1]}" for g in growth))


if __name__ == "__main__":
    main()
