"""Reduction error, residual surrogate and greedy frequency sampling.

Device fields are measured in ``L^2(0, T; L^2)`` (psi, n, p) or
``L^2(0, T; H(div))`` (g_psi, J_n, J_p); network components use the
Euclidean norm in space.  Time integrals use the trapezoidal rule on the
trajectory's own grid.  Residual blocks are measured in the matching dual
norms, ``r^T M_L^{-1} r`` and ``r^T G^{-1} r`` with the H(div) Gram matrix
``G``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import os

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from .errors import ConfigError, SolverError
from .integrator import IntegratorOptions, Trajectory, consistent_initialize, integrate
from .network import FullModel
from .pod import ReducedCoupledModel, SnapshotStore, bases_by_device, device_snapshots, merge_bases
from .semiconductor import SPACE, VARIABLES

log = logging.getLogger(__name__)

NETWORK_COMPONENTS = ("e", "j_V", "j_L")

__all__ = [
    "ComponentNorms",
    "RelativeError",
    "SamplingState",
    "trajectory_norms",
    "relative_error",
    "unreduced_residual",
    "calibrate_weights",
    "weight_at",
    "weighted_residual",
    "greedy_sample",
    "subspace_distance",
    "simulate",
    "worker_count",
]


@dataclass
class ComponentNorms:
    """One nonnegative value per component (``e``, ``j_V``, ``S1.psi``, ...)."""

    values: dict

    @property
    def aggregate(self):
        return math.sqrt(sum(v * v for v in self.values.values()))

    def __getitem__(self, key):
        return self.values[key]

    def keys(self):
        return self.values.keys()


@dataclass
class RelativeError:
    components: dict
    absolute: set = field(default_factory=set)  # components whose reference norm is zero

    @property
    def aggregate(self):
        return math.sqrt(sum(v * v for v in self.components.values()))


class _Spaces:
    """Gram matrices and their inverses for one finite element space."""

    def __init__(self, fem):
        self.fem = fem
        self.inv_h = 1.0 / fem.h
        self.gram = {"L": fem.mass_L.tocsr(), "H": fem.hdiv_gram().tocsr()}
        self._lu = spla.splu(self.gram["H"].tocsc())

    def sq_norms(self, Y, space):
        """Squared space norms of the rows of ``Y`` (l x n)."""
        return np.einsum("ij,ij->i", (self.gram[space] @ Y.T).T, Y)

    def sq_dual_norms(self, R, space):
        if space == "L":
            return np.einsum("ij,ij->i", R * self.inv_h, R)
        return np.einsum("ij,ij->i", self._lu.solve(np.ascontiguousarray(R.T)).T, R)


def _spaces(model):
    sp_ = getattr(model, "_norm_spaces", None)
    if sp_ is None:
        sp_ = model._norm_spaces = _Spaces(model.fem)
    return sp_


def _components(model):
    """``(name, global slice, space)`` for every component of the full state."""
    out = []
    for name in NETWORK_COMPONENTS:
        s = model.layout[name]
        if s.stop > s.start:
            out.append((name, s, None))
    for k, b in enumerate(model.s_branches):
        base = model.layout[b.name].start
        for v, s in model.devices[k].slices.items():
            out.append((f"{b.name}.{v}", slice(base + s.start, base + s.stop), SPACE[v]))
    return out


def _time_l2(sq, times):
    if times.size == 1:
        return math.sqrt(max(sq[0], 0.0))
    return math.sqrt(max(float(np.trapezoid(sq, times)), 0.0))


def trajectory_norms(traj, model):
    """Space-time norms of each component of a full-coefficient trajectory."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    spaces = _spaces(model)
    vals = {}
    for name, s, space in _components(model):
        Y = traj.states[:, s]
        sq = np.einsum("ij,ij->i", Y, Y) if space is None else spaces.sq_norms(Y, space)
        vals[name] = _time_l2(sq, traj.times)
    return ComponentNorms(vals)


def _interpolate(traj, times):
    """Piecewise-linear interpolation of the states onto ``times``."""
    if traj.times.size == times.size and np.array_equal(traj.times, times):
        return traj.states
    idx = np.clip(np.searchsorted(traj.times, times, side="right") - 1, 0, traj.times.size - 2)
    t0, t1 = traj.times[idx], traj.times[idx + 1]
    w = ((times - t0) / (t1 - t0))[:, None]
    return (1.0 - w) * traj.states[idx] + w * traj.states[idx + 1]


def relative_error(full, reduced, model):
    """Component-wise relative error of a lifted reduced trajectory w.r.t. the full one."""
    T = full.times[-1] - full.times[0]
    if abs(full.times[-1] - reduced.times[-1]) > 1e-12 * abs(T) or abs(full.times[0] - reduced.times[0]) > 1e-12 * abs(T):
        raise ValueError("trajectories cover different time horizons")
    diff = Trajectory(full.times, full.states - _interpolate(reduced, full.times), None)
    num = trajectory_norms(diff, model).values
    den = trajectory_norms(full, model).values
    comps, absolute = {}, set()
    for k in num:
        if den[k] > 0:
            comps[k] = num[k] / den[k]
        else:
            comps[k] = num[k]
            absolute.add(k)
    return RelativeError(comps, absolute)


def unreduced_residual(reduced, model):
    """Residual of the full finite element rows at a lifted reduced trajectory.

    ``reduced`` must carry lifted states and derivatives; ``model`` is the
    full model at the same parameter.  Network rows are not evaluated (the
    reduced solution satisfies them exactly).
    """
    if reduced.derivatives is None:
        raise ValueError("trajectory derivatives are required for the residual")
    spaces = _spaces(model)
    e_sl = model.layout["e"]
    vals = {}
    for k, b in enumerate(model.s_branches):
        dev = model.devices[k]
        sl = model.layout[b.name]
        Y, Yd = reduced.states[:, sl], reduced.derivatives[:, sl]
        R = np.empty_like(Y)
        for i in range(Y.shape[0]):
            v = model.contact_potentials(reduced.states[i, e_sl], k)
            R[i] = dev.residual(Y[i], Yd[i], v)
        for v in VARIABLES:
            s = dev.slices[v]
            vals[f"{b.name}.{v}"] = _time_l2(spaces.sq_dual_norms(R[:, s], SPACE[v]), reduced.times)
    return ComponentNorms(vals)


# -- weights -------------------------------------------------------------------

def calibrate_weights(rel_errors, residuals):
    """Weights making the weighted residual equal the relative error at each reference.

    Parameters
    ----------
    rel_errors, residuals : dict
        ``{omega: {component: value}}`` for the reference parameters; the
        residual dicts define the components.
    """
    table = {}
    tiny = np.finfo(float).tiny
    for omega, res in residuals.items():
        row = {}
        for c, r in res.items():
            err = rel_errors[omega][c]
            row[c] = 1.0 if r == 0 else max(err / r, tiny)
        table[omega] = row
    return table


def weight_at(omega, table):
    """Piecewise-linear weights in omega; nearest reference outside the range."""
    if not table:
        raise ValueError("empty weight table")
    refs = np.array(sorted(table))
    comps = table[refs[0]].keys()
    return {c: float(np.interp(omega, refs, [table[w][c] for w in refs])) for c in comps}


def weighted_residual(residual, weights):
    """Per-component weighted residual and Euclidean aggregate."""
    comps = {c: weights[c] * residual[c] for c in residual.keys()}
    return comps, math.sqrt(sum(v * v for v in comps.values()))


# -- simulations ---------------------------------------------------------------

def simulate(model, periods=3.0, options=None, t_end=None, times=None):
    """Stationary start at t = 0 and integration over ``periods`` source periods.

    ``times`` prescribes the step sequence (for instance another run's grid).
    """
    if times is not None:
        z0, zd0 = consistent_initialize(model)
        return integrate(model, None, z0, zd0, options, times=times)
    if t_end is None:
        period = model.netlist.period
        if period is None:
            raise ConfigError("no sinusoidal source: give the horizon in seconds")
        t_end = periods * period
    z0, zd0 = consistent_initialize(model)
    return integrate(model, t_end, z0, zd0, options)


def worker_count(requested=None):
    """Worker limit: ``requested`` (default 1) capped by ``DDMOR_THREADS``."""
    n = int(requested) if requested else None
    cap = os.environ.get("DDMOR_THREADS")
    if cap:
        try:
            c = int(cap)
        except ValueError:
            raise ConfigError(f"DDMOR_THREADS must be an integer, got {cap!r}")
        n = c if n is None else min(n, c)
    return max(1, n or 1)


@dataclass
class SamplingState:
    """Everything the greedy loop accumulates.

    ``history`` holds one dict per iteration with the reference set, the
    maximal weighted residual over the test set and its argmax (and the
    true error columns when the full sweep is enabled).  ``sweeps`` holds
    the per-iteration residual curves over the test set.
    """

    references: list = field(default_factory=list)
    full: dict = field(default_factory=dict)
    rel_errors: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    bases: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    sweeps: list = field(default_factory=list)
    store: object = None
    reduced_model: object = None
    failed_references: list = field(default_factory=list)
    stop_reason: str = ""


def _reduced_run(rmodel, omega, periods, options):
    rm = rmodel.with_frequency(omega)
    traj = simulate(rm, periods, options)
    return rm.lift_trajectory(traj)


def greedy_sample(
    netlist,
    omega1,
    p_test,
    tol,
    delta,
    max_iters=10,
    periods=3.0,
    num_elements=None,
    strategy="resvd-all",
    true_error=False,
    workers=None,
    options=None,
    callback=None,
):
    """Greedy selection of reference frequencies driven by the weighted residual.

    Each iteration: full simulation at the newest reference, basis update,
    weight calibration at all references, reduced simulations over
    ``p_test``.  Stops when the maximal weighted residual is below ``tol``,
    when it does not decrease, or after ``max_iters`` iterations.  A failed
    reduced simulation counts as an infinite residual.
    """
    p_test = sorted(float(w) for w in p_test)
    if not p_test:
        raise ConfigError("empty test set")
    options = options or IntegratorOptions()
    base = FullModel(netlist, num_elements)
    state = SamplingState(store=SnapshotStore())
    nworkers = worker_count(workers)
    omega_new = float(omega1)
    prev_max = math.inf
    true_cache = {}

    for it in range(1, max_iters + 1):
        state.references.append(omega_new)
        fmodel = base.with_frequency(omega_new)
        log.info("iteration %d: full simulation at %.6g Hz", it, omega_new)
        ftraj = simulate(fmodel, periods, options)
        state.full[omega_new] = ftraj
        snaps = {}
        for k, b in enumerate(base.s_branches):
            for v, Y in device_snapshots(ftraj.states[:, base.layout[b.name]], base.devices[k]).items():
                snaps[(b.name, v)] = Y
        state.bases = merge_bases(state.store, snaps, base.fem, delta, strategy)
        rmodel = ReducedCoupledModel(base, bases_by_device(state.bases, base))
        state.reduced_model = rmodel

        runs = {}

        def evaluate(omega):
            if omega in runs:
                return omega, runs[omega]
            try:
                lifted = _reduced_run(rmodel, omega, periods, options)
            except (SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.warning("reduced simulation failed at %.6g Hz: %s", omega, exc)
                return omega, None
            if omega in state.references:
                runs[omega] = lifted
            return omega, lifted

        # calibration at the references; a failed reference run leaves no
        # residual to calibrate against and falls back to unit weights
        state.rel_errors, state.residuals = {}, {}
        state.failed_references = []
        for omega in state.references:
            _, lifted = evaluate(omega)
            if lifted is None:
                state.failed_references.append(omega)
                continue
            fm = base.with_frequency(omega)
            state.rel_errors[omega] = relative_error(state.full[omega], lifted, fm).components
            state.residuals[omega] = unreduced_residual(lifted, fm).values
        if state.residuals:
            state.weights = calibrate_weights(state.rel_errors, state.residuals)
        else:
            state.weights = {}

        def sweep_point(omega):
            omega, lifted = evaluate(omega)
            if lifted is None:
                return omega, None, math.inf, None
            fm = base.with_frequency(omega)
            res = unreduced_residual(lifted, fm)
            weights = weight_at(omega, state.weights) if state.weights else dict.fromkeys(res.keys(), 1.0)
            comps, agg = weighted_residual(res, weights)
            err = None
            if true_error:
                ft = true_cache.get(omega)
                if ft is None:
                    ft = state.full[omega] if omega in state.full else simulate(fm, periods, options)
                    true_cache[omega] = ft
                err = relative_error(ft, lifted, fm).aggregate
            return omega, comps, agg, err

        if nworkers > 1:
            with ThreadPoolExecutor(max_workers=nworkers) as pool:
                results = list(pool.map(sweep_point, p_test))
        else:
            results = [sweep_point(w) for w in p_test]
        state.sweeps.append({w: (c, a, e) for w, c, a, e in results})

        aggs = np.array([a for _, _, a, _ in results])
        i_max = int(np.argmax(aggs))  # first occurrence = smallest omega on ties
        row = {
            "iteration": it,
            "references": sorted(state.references),
            "max_residual": float(aggs[i_max]),
            "argmax": p_test[i_max],
        }
        if true_error:
            errs = np.array([math.inf if e is None else e for _, _, _, e in results])
            j = int(np.argmax(errs))
            row["max_error"], row["error_argmax"] = float(errs[j]), p_test[j]
        state.history.append(row)
        if callback is not None:
            callback(state)
        log.info("iteration %d: max weighted residual %.4e at %.6g Hz", it, row["max_residual"], row["argmax"])

        if row["max_residual"] < tol or tol == math.inf:
            state.stop_reason = "tolerance"
            break
        if it > 1 and row["max_residual"] >= prev_max:
            state.stop_reason = "no progress"
            break
        if it == max_iters:
            state.stop_reason = "max iterations"
            break
        prev_max = row["max_residual"]
        # next reference: the worst test point that is not a reference yet
        order = sorted(range(len(p_test)), key=lambda i: (-aggs[i], p_test[i]))
        fresh = [p_test[i] for i in order if p_test[i] not in state.references]
        if not fresh:
            state.stop_reason = "test set exhausted"
            break
        omega_new = fresh[0]
    return state


# -- subspace distance -----------------------------------------------------------

def subspace_distance(U1, U2):
    """``max_u min_v ||u - v||_2`` over unit vectors of two spans.

    Accepts :class:`~ddmor.pod.PodBasis` records or plain arrays; each span
    is orthonormalised in the Euclidean inner product first.
    """
    A = np.asarray(getattr(U1, "U", U1), dtype=float)
    B = np.asarray(getattr(U2, "U", U2), dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] != B.shape[0]:
        raise ConfigError(f"bases live in spaces of dimension {A.shape[0]} and {B.shape[0]}")
    Qa, _ = la.qr(A, mode="economic")
    Qb, _ = la.qr(B, mode="economic")
    S = Qa.T @ Qb
    lam = float(np.min(np.linalg.eigvalsh(S @ S.T)))
    lam = min(max(lam, 0.0), 1.0)
    return math.sqrt(max(2.0 - 2.0 * math.sqrt(lam), 0.0))
