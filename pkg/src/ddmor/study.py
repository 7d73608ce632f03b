"""Experiment runners and CSV emission shared by the CLI and the scripts."""

from dataclasses import dataclass
import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, SolverError
from .integrator import IntegratorOptions, consistent_initialize, integrate
from .network import FullModel, parse_netlist
from .pod import (
    ReducedCoupledModel,
    SnapshotStore,
    bases_by_device,
    device_snapshots,
    merge_bases,
    write_basis,
)
from .sampling import greedy_sample, relative_error, simulate, unreduced_residual
from .semiconductor import VARIABLES

log = logging.getLogger(__name__)

TRAJECTORY_SCHEMA = "ddmor-trajectory/1"
STUDY_SCHEMA = "ddmor-pod-study/1"
SWEEP_SCHEMA = "ddmor-sweep/1"
SUMMARY_SCHEMA = "ddmor-campaign/1"

DATA_DIR = Path(__file__).parent / "data"


def load_netlist(path):
    """Parse a JSON netlist file; bundled names like ``fig1_basic.json`` also resolve."""
    p = Path(path)
    if not p.exists() and (DATA_DIR / p.name).exists():
        p = DATA_DIR / p.name
    try:
        with open(p) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"netlist file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"netlist is not valid JSON: {exc}", str(path))
    return parse_netlist(doc)


@dataclass
class SimulationConfig:
    netlist: str
    frequency: float = None
    elements: int = None
    periods: float = 3.0
    t_end: float = None
    rtol: float = 1e-6

    def validate(self):
        if self.frequency is not None and not self.frequency > 0:
            raise ConfigError(f"frequency must be positive, got {self.frequency}")
        if self.elements is not None and (self.elements < 2 or self.elements % 2):
            raise ConfigError(f"element count must be even and >= 2, got {self.elements}")
        if not self.periods > 0:
            raise ConfigError("periods must be positive")
        if not 0 < self.rtol < 1:
            raise ConfigError("rtol must lie in (0, 1)")
        return self

    def options(self):
        return IntegratorOptions(rtol=self.rtol)


@dataclass
class CampaignConfig(SimulationConfig):
    """Greedy sampling campaign over a frequency interval."""

    pspace: tuple = (1e8, 1e12)
    ntest: int = 25
    delta: float = 1e-7
    tol: float = 0.0
    omega1: float = None
    max_iters: int = 10
    strategy: str = "resvd-all"
    true_error: bool = False
    workers: int = None
    out: str = "campaign"

    def validate(self):
        super().validate()
        lo, hi = self.pspace
        if not 0 < lo < hi:
            raise ConfigError(f"parameter space needs 0 < min < max, got [{lo}, {hi}]")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.ntest < 1:
            raise ConfigError("ntest must be positive")
        if self.omega1 is not None and not lo <= self.omega1 <= hi:
            raise ConfigError(f"first reference {self.omega1} outside [{lo}, {hi}]")
        return self

    def test_set(self):
        lo, hi = self.pspace
        return list(np.logspace(math.log10(lo), math.log10(hi), self.ntest))


# -- CSV helpers -----------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, schema, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {schema}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path):
    """``(schema, header, rows)`` with numeric cells converted to float where possible."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ConfigError(f"{path}: missing schema header line")
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for r in reader:
            out = []
            for c in r:
                try:
                    out.append(float(c))
                except ValueError:
                    out.append(c)
            rows.append(out)
    return first[1:].strip(), header, rows


def trajectory_columns(model):
    nodes = model.netlist.node_names
    cols = ["t"] + [f"e_{n}" for n in nodes]
    cols += [f"j_V_{b.name}" for b in model.netlist.of_kind("V")]
    cols += [f"j_L_{b.name}" for b in model.netlist.of_kind("L")]
    cols += [f"j_S_{b.name}" for b in model.netlist.of_kind("S")]
    for k, b in enumerate(model.s_branches):
        for v, s in model.devices[k].slices.items():
            cols += [f"{b.name}.{v}[{i}]" for i in range(s.stop - s.start)]
    return cols


def write_trajectory(path, traj, model):
    """Full-coefficient trajectory CSV; columns follow the global state layout."""
    rows = np.column_stack([traj.times, traj.states])
    return write_csv(path, TRAJECTORY_SCHEMA, trajectory_columns(model), rows)


# -- runners ---------------------------------------------------------------------

def run_simulation(cfg):
    cfg.validate()
    netlist = load_netlist(cfg.netlist)
    if cfg.frequency is not None:
        netlist = netlist.with_frequency(cfg.frequency)
    model = FullModel(netlist, cfg.elements)
    return model, simulate(model, cfg.periods, cfg.options(), cfg.t_end)


def reduce_trajectory(model, traj, delta, store=None, strategy="resvd-all"):
    """Bases from one full trajectory and the resulting reduced coupled model."""
    store = store if store is not None else SnapshotStore()
    snaps = {}
    for k, b in enumerate(model.s_branches):
        for v, Y in device_snapshots(traj.states[:, model.layout[b.name]], model.devices[k]).items():
            snaps[(b.name, v)] = Y
    bases = merge_bases(store, snaps, model.fem, delta, strategy)
    return bases, ReducedCoupledModel(model, bases_by_device(bases, model))


def pod_study(cfg, deltas, full=None):
    """Reduced runs at one reference frequency for each ``delta``.

    Returns ``(model, full trajectory, rows)``; each row is a dict with the
    basis dimensions, component errors, aggregate and timings.  A failed
    reduced run gives NaN errors and records the failure time.
    """
    if not deltas:
        raise ConfigError("empty delta list")
    for d in deltas:
        if not 0 <= d < 1:
            raise ConfigError(f"delta must lie in [0, 1), got {d}")
    cfg.validate()
    if full is None:
        t0 = time.perf_counter()
        model, ftraj = run_simulation(cfg)
        t_full = time.perf_counter() - t0
    else:
        model, ftraj, t_full = full
    rows = []
    for d in deltas:
        bases, rm = reduce_trajectory(model, ftraj, d)
        row = {"delta": d, "dims": {k: b.s for k, b in bases.items()}, "total": sum(b.s for b in bases.values())}
        t0 = time.perf_counter()
        try:
            z0, zd0 = consistent_initialize(rm)
            rtraj = integrate(rm, ftraj.horizon, z0, zd0, cfg.options())
        except SolverError as exc:
            row.update(errors=None, aggregate=math.nan, failed_at=exc.time, t_reduced=time.perf_counter() - t0)
            log.warning("delta=%g: reduced run failed: %s", d, exc)
        else:
            row["t_reduced"] = time.perf_counter() - t0
            lifted = rm.lift_trajectory(rtraj)
            err = relative_error(ftraj, lifted, model)
            row.update(errors=err.components, aggregate=err.aggregate, failed_at=None)
            row["residual"] = unreduced_residual(lifted, model).values
        row["t_full"] = t_full
        rows.append(row)
    return model, ftraj, rows


def replay_reduced(model, ftraj, delta=0.0, options=None):
    """Reduced run on the full run's own time grid.

    With ``delta = 0`` every basis keeps the numerical rank of its snapshots,
    so the lifted trajectory should reproduce the full one up to round-off
    and the Newton tolerance.  Returns ``(lifted trajectory, RelativeError)``.
    """
    _, rm = reduce_trajectory(model, ftraj, delta)
    z0, zd0 = consistent_initialize(rm)
    rtraj = integrate(rm, None, z0, zd0, options, times=ftraj.times)
    lifted = rm.lift_trajectory(rtraj)
    return lifted, relative_error(ftraj, lifted, model)


def rectification_ratio(traj, model, source=0):
    """Peak reverse over peak forward source current.

    Forward is the positive direction of ``j_V``.  Small values mean the
    diode blocks on the reverse half-wave.
    """
    j = traj.states[:, model.layout["j_V"].start + source]
    peak = float(j.max())
    if peak <= 0:
        raise ValueError("no forward conduction in the trajectory")
    return max(-float(j.min()), 0.0) / peak


def frequency_study(cfg, frequencies):
    """``[(frequency, ratio, trajectory)]`` for the same circuit at several source frequencies."""
    out = []
    for f in frequencies:
        run = SimulationConfig(cfg.netlist, f, cfg.elements, cfg.periods, cfg.t_end, cfg.rtol)
        model, traj = run_simulation(run)
        out.append((f, rectification_ratio(traj, model), traj))
    return out


def study_rows_to_csv(path, model, rows):
    comps = _component_names(model)
    dims = [f"s_{b.name}.{v}" for b in model.s_branches for v in VARIABLES]
    header = ["delta", *dims, "s_total", *[f"err_{c}" for c in comps], "aggregate",
              "t_reduced", "t_full", "failed_at"]
    out = []
    for r in rows:
        d = [r["dims"][(b.name, v)] for b in model.s_branches for v in VARIABLES]
        e = [(r["errors"] or {}).get(c, math.nan) for c in comps]
        fa = "" if r["failed_at"] is None else r["failed_at"]
        out.append([r["delta"], *d, r["total"], *e, r["aggregate"], r["t_reduced"], r["t_full"], fa])
    return write_csv(path, STUDY_SCHEMA, header, out)


def _component_names(model):
    names = [c for c in ("e", "j_V", "j_L") if model.layout[c].stop > model.layout[c].start]
    return names + [f"{b.name}.{v}" for b in model.s_branches for v in VARIABLES]


def run_campaign(cfg, callback=None):
    cfg.validate()
    netlist = load_netlist(cfg.netlist)
    omega1 = cfg.omega1
    if omega1 is None:
        f = netlist.sinusoidal_frequencies
        lo, hi = cfg.pspace
        omega1 = min(max(f[0], lo), hi) if f else math.sqrt(lo * hi)
    return greedy_sample(
        netlist,
        omega1,
        cfg.test_set(),
        cfg.tol,
        cfg.delta,
        max_iters=cfg.max_iters,
        periods=cfg.periods,
        num_elements=cfg.elements,
        strategy=cfg.strategy,
        true_error=cfg.true_error,
        workers=cfg.workers,
        options=cfg.options(),
        callback=callback,
    )


def write_campaign(out, state):
    """Sweep CSV (one row per iteration and test frequency), summary CSV and bases."""
    out = Path(out)
    comps = None
    rows = []
    for it, sweep in enumerate(state.sweeps, start=1):
        for omega in sorted(sweep):
            c, agg, err = sweep[omega]
            if comps is None and c is not None:
                comps = sorted(c)
            rows.append((it, omega, c, agg, err))
    comps = comps or []
    header = ["iteration", "omega", *[f"wres_{c}" for c in comps], "aggregate", "rel_error"]
    body = []
    for it, omega, c, agg, err in rows:
        vals = [c[k] if c else math.inf for k in comps]
        body.append([it, omega, *vals, agg, math.nan if err is None else err])
    write_csv(out / "sweep.csv", SWEEP_SCHEMA, header, body)

    sh = ["step", "references", "max_residual", "argmax"]
    if state.history and "max_error" in state.history[0]:
        sh += ["max_error", "error_argmax"]
    srows = []
    for h in state.history:
        r = [h["iteration"], ";".join(_fmt(w) for w in h["references"]), h["max_residual"], h["argmax"]]
        if "max_error" in h:
            r += [h["max_error"], h["error_argmax"]]
        srows.append(r)
    write_csv(out / "summary.csv", SUMMARY_SCHEMA, sh, srows)

    bdir = out / "bases"
    bdir.mkdir(parents=True, exist_ok=True)
    for (branch, var), b in sorted(state.bases.items()):
        write_basis(bdir / f"{branch}_{var}.csv", b, branch)
    return out
