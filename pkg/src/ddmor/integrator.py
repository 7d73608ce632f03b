"""Variable-step BDF(1-2) integrator for fully implicit index-1 DAEs.

A model supplies ``size``, ``residual(t, z, zd)``, ``jacobian(t, z, zd,
alpha)`` (sparse or dense) and ``error_norm(dz, z, rtol, atol)``.  The
derivative is replaced by ``zd = alpha * (z - z_n) + beta`` with BDF coefficients on
the actual (non-uniform) step history; Newton uses a reused LU until the
leading coefficient drifts or convergence slows.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import SolverError

log = logging.getLogger(__name__)

DEFAULT_TOLERANCES = {
    "potential": 1e-9,  # V
    "current": 1e-12,  # A
    "concentration": 1e-10,  # scaled
}

__all__ = [
    "Trajectory",
    "IntegratorOptions",
    "consistent_initialize",
    "integrate",
    "DEFAULT_TOLERANCES",
]


@dataclass
class IntegratorOptions:
    rtol: float = 1e-6
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    first_step: float = None
    max_step: float = np.inf
    min_step: float = 1e-18
    max_order: int = 2
    newton_tol: float = 0.01
    noise_tol: float = 0.33
    max_newton: int = 6
    max_growth: float = 2.0
    startup_step: bool = True


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (l, size)
    derivatives: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    @property
    def horizon(self):
        return float(self.times[-1])


class _LinearSolver:
    """Factorise Jacobians; large sparse systems use a fixed RCM permutation."""

    dense_limit = 600
    max_density = 0.05

    def __init__(self):
        self.perm = None

    def factor(self, J):
        n = J.shape[0]
        if sp.issparse(J) and n > self.dense_limit and J.nnz < self.max_density * n * n:
            J = J.tocsc()
            if self.perm is None:
                pattern = (abs(J) + abs(J).T).tocsr()
                self.perm = reverse_cuthill_mckee(pattern, symmetric_mode=True)
                self.iperm = np.empty_like(self.perm)
                self.iperm[self.perm] = np.arange(self.perm.size)
            Jp = J[self.perm][:, self.perm].tocsc()
            try:
                lu = spla.splu(Jp, permc_spec="NATURAL", diag_pivot_thresh=0.1)
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(str(exc))
            perm, iperm = self.perm, self.iperm
            return lambda r: lu.solve(r[perm])[iperm]
        J = J.toarray() if sp.issparse(J) else np.asarray(J)
        # row equilibration: device rows differ by many orders of magnitude
        rmax = np.max(np.abs(J), axis=1)
        d = 1.0 / np.where(rmax > 0, rmax, 1.0)
        lu = la.lu_factor(d[:, None] * J, check_finite=True)
        if np.any(np.diag(lu[0]) == 0):
            raise np.linalg.LinAlgError("singular Jacobian")
        return lambda r: la.lu_solve(lu, d * r)


def newton_stationary(model, t, z0, tol=1e-10, maxiter=50, max_halvings=8, solver=None):
    """Damped Newton on ``res(t, z, 0) = 0`` with the natural monotonicity test."""
    solver = solver or _LinearSolver()
    z = z0.copy()
    zd = np.zeros_like(z)
    atol = model.atol(DEFAULT_TOLERANCES)
    scale = model.row_scale()
    for it in range(maxiter):
        r = model.residual(t, z, zd)
        if not np.all(np.isfinite(r)):
            raise SolverError("non-finite residual in stationary Newton", t)
        if it > 0 and np.max(np.abs(r * scale)) <= 0.1 * tol:
            # converged in the residual; increments may be dominated by conditioning noise
            return z, it
        try:
            solve = solver.factor(model.jacobian(t, z, zd, 0.0))
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Jacobian in stationary Newton: {exc}", t)
        dz = -solve(r)
        nrm = model.error_norm(dz, z, 1e-8, atol)
        lam = 1.0
        for _ in range(max_halvings + 1):
            zt = z + lam * dz
            rt = model.residual(t, zt, zd)
            if np.all(np.isfinite(rt)):
                simp = -solve(rt)
                if model.error_norm(simp, zt, 1e-8, atol) <= (1.0 - lam / 4.0) * nrm or nrm < 1.0:
                    break
            lam *= 0.5
        z = zt
        if nrm < 1e-3 and lam == 1.0:
            # one more cheap polishing step with the current factorisation
            r = model.residual(t, z, zd)
            z = z - solve(r)
            return z, it + 1
    raise SolverError(f"stationary Newton did not converge in {maxiter} iterations", t)


def consistent_initialize(model, t0=0.0, guess=None, tol=1e-10, min_ramp=1.0 / 256):
    """Stationary operating point at ``t0`` with ``zd = 0``.

    With the derivative set to zero the residual is exactly the stationary
    residual, so the returned pair is consistent.  When a direct solve fails
    the sources are ramped in from zero, halving the ramp step on failure.
    """
    def start():
        if guess is not None:
            return np.asarray(guess, float).copy()
        try:
            return model.initial_guess()
        except SolverError as exc:
            if exc.time is not None:
                raise
            raise SolverError(str(exc), t0) from exc

    z = start()
    scale0 = model.source_scale
    try:
        try:
            z, _ = newton_stationary(model, t0, z)
        except SolverError:
            z = start()
            model.source_scale = 0.0
            z, _ = newton_stationary(model, t0, z)
            theta, step = 0.0, 0.25
            while theta < 1.0:
                trial = min(1.0, theta + step)
                model.source_scale = scale0 * trial
                try:
                    z_new, _ = newton_stationary(model, t0, z)
                except SolverError:
                    step *= 0.5
                    if step < min_ramp:
                        raise
                    continue
                z, theta = z_new, trial
                step = min(2.0 * step, 0.5)
    finally:
        model.source_scale = scale0
    zd = np.zeros_like(z)
    res = model.scaled_residual_norm(t0, z, zd)
    if res > tol:
        raise SolverError(f"initialisation residual {res:.3e} above tolerance {tol:.1e}", t0)
    return z, zd


def _bdf_coefficients(ts, t_new, order):
    """alpha, and weights c_i such that zd = alpha z_new + sum c_i z_hist[i]."""
    if order == 1:
        h = t_new - ts[-1]
        return 1.0 / h, np.array([-1.0 / h])
    h = t_new - ts[-1]
    hp = ts[-1] - ts[-2]
    w = h / hp
    alpha = (1.0 + 2.0 * w) / ((1.0 + w) * h)
    return alpha, np.array([w * w / ((1.0 + w) * h), -(1.0 + w) / h])  # for (z_{n-1}, z_n)


def _extrapolate(ts, zs, t):
    """Lagrange extrapolation through the given history points."""
    out = np.zeros_like(zs[-1])
    for i, (ti, zi) in enumerate(zip(ts, zs)):
        li = 1.0
        for j, tj in enumerate(ts):
            if j != i:
                li *= (t - tj) / (ti - tj)
        out += li * zi
    return out


def _implicit_euler(model, t_new, z_n, h, solver, atol, opt, maxiter=10):
    z = z_n.copy()
    prev = None
    for _ in range(maxiter):
        zd = (z - z_n) / h
        dz = -solver.factor(model.jacobian(t_new, z, zd, 1.0 / h))(model.residual(t_new, z, zd))
        z = z + dz
        nrm = model.error_norm(dz, z, opt.rtol, atol)
        if nrm < opt.newton_tol:
            return z
        if prev is not None and nrm > 0.9 * prev and max(nrm, prev) < opt.noise_tol:
            return z  # round-off floor of a fresh Jacobian
        prev = nrm
    raise SolverError("Newton failed on the start-up step", t_new)


def consistent_start(model, t0, z0, span, solver=None, options=None, ratio=1e-3):
    """Start-up implicit Euler steps from a stationary point ``z0``.

    A stationary point taken where the sources move carries stale algebraic
    values (displacement currents, for instance) that jump once the node
    potentials follow the source, exciting fast relaxation inside the
    devices.  One L-stable step of length ``h`` absorbs the jump; a second
    step of length ``ratio * h`` resolves the slope after it without the
    jump.  Returns the two step lengths and states; shorter steps are tried
    when Newton fails.
    """
    solver = solver or _LinearSolver()
    opt = options or IntegratorOptions()
    args = (solver, model.atol(opt.tolerances), opt)
    h = min(1e-6 * span, opt.max_step)
    while h >= opt.min_step:
        try:
            z1 = _implicit_euler(model, t0 + h, z0, h, *args)
            z2 = _implicit_euler(model, t0 + h * (1 + ratio), z1, h * ratio, *args)
            return (h, h * ratio), (z1, z2)
        except (SolverError, np.linalg.LinAlgError):
            h *= 0.1
    raise SolverError("no start-up step converged", t0)


def integrate(model, t_end, z0=None, zd0=None, options=None, t0=0.0, times=None):
    """Integrate from ``t0`` to ``t_end``; returns a :class:`Trajectory`.

    If ``times`` is given the step sequence is prescribed (no error control).
    """
    opt = options or IntegratorOptions()
    if z0 is None:
        z0, zd0 = consistent_initialize(model, t0)
    zd0 = np.zeros_like(z0) if zd0 is None else zd0
    atol = model.atol(opt.tolerances)
    rtol = opt.rtol
    solver = _LinearSolver()

    T = [t0]
    Z = [z0.copy()]
    ZD = [zd0.copy()]
    start = 0  # first history index usable by the BDF formulas and the predictor
    # a prescribed grid replays the start-up: history restarts after its first step
    restart = opt.startup_step and times is not None and not np.any(zd0)
    if opt.startup_step and times is None and not np.any(zd0):
        hs, zs = consistent_start(model, t0, z0, t_end - t0, solver, opt)
        for h_k, z_k in zip(hs, zs):
            T.append(T[-1] + h_k)
            ZD.append((z_k - Z[-1]) / h_k)
            Z.append(z_k)
        start = 1
    stats = dict(steps=0, rejected=0, newton_failures=0, jacobians=0, newton_iterations=0)

    fixed = None
    if times is not None:
        fixed = np.asarray(times, dtype=float)
        if fixed[0] != t0 or np.any(np.diff(fixed) <= 0):
            raise ValueError("prescribed times must start at t0 and increase")
        t_end = float(fixed[-1])
        h = fixed[1] - fixed[0]
    else:
        span = t_end - t0
        h = opt.first_step or min(1e-6 * span, opt.max_step)

    lu = None
    lu_alpha = None
    order_cap = 1  # raised once a history exists
    k_fixed = 1

    while t_end - T[-1] > 1e-15 * abs(t_end):
        t_n = T[-1]
        if fixed is not None:
            t_new = fixed[k_fixed]
            h = t_new - t_n
        else:
            h = min(h, opt.max_step)
            if t_n + h > t_end or t_end - (t_n + h) < 1e-3 * h:
                h = t_end - t_n
            t_new = t_n + h
        if h < opt.min_step and fixed is None:
            raise SolverError(f"step size underflow (h = {h:.3e} s)", t_n)

        usable = len(T) - start
        order = min(order_cap, opt.max_order, usable)
        if order == 2:
            hist_t, hist_z = T[-2:], Z[-2:]
        else:
            order = 1
            hist_t, hist_z = T[-1:], Z[-1:]
        alpha, cw = _bdf_coefficients(hist_t, t_new, order)
        # coefficients sum to zero: differences against z_n avoid cancellation at tiny h
        z_n = Z[-1]
        beta = sum(c * (zz - z_n) for c, zz in zip(cw[:-1], hist_z[:-1])) if order > 1 else 0.0

        # predictor: order+1 points when available, else tangent
        if usable >= order + 1:
            z_pred = _extrapolate(T[-(order + 1):], Z[-(order + 1):], t_new)
            err_const = h / (t_new - T[-(order + 1)])
        else:
            z_pred = Z[-1] + h * ZD[-1]
            err_const = 1.0

        # Newton
        z = z_pred.copy()
        converged = False
        refreshed = False
        for attempt in range(2):
            if lu is None or abs(alpha / lu_alpha - 1.0) > 0.25 or attempt == 1:
                zd = alpha * (z - z_n) + beta
                try:
                    lu = solver.factor(model.jacobian(t_new, z, zd, alpha))
                except np.linalg.LinAlgError:
                    lu = None
                    break
                lu_alpha = alpha
                stats["jacobians"] += 1
                refreshed = True
            z = z_pred.copy()
            prev = None
            for it in range(opt.max_newton):
                zd = alpha * (z - z_n) + beta
                r = model.residual(t_new, z, zd)
                if not np.all(np.isfinite(r)):
                    break
                dz = -lu(r)
                z = z + dz
                stats["newton_iterations"] += 1
                nrm = model.error_norm(dz, z, rtol, atol)
                if not np.isfinite(nrm):
                    break
                if prev is not None:
                    rate = nrm / prev
                    if rate > 0.9:
                        # stagnation at the round-off floor with a fresh Jacobian:
                        # the iterate is already inside the error weights
                        converged = refreshed and max(nrm, prev) < opt.noise_tol
                        break
                    if rate / (1.0 - rate) * nrm < opt.newton_tol:
                        converged = True
                        break
                if nrm < opt.newton_tol * 1e-2 or (nrm < opt.newton_tol and it == 0 and refreshed):
                    converged = True
                    break
                prev = nrm
            if converged or refreshed:
                break
        if not converged:
            log.debug("newton failure t=%.6e h=%.3e order=%d", t_n, h, order)
            stats["newton_failures"] += 1
            lu = None
            if fixed is not None:
                raise SolverError("Newton failed on prescribed step", t_new)
            h *= 0.25
            order_cap = 1
            continue

        zd = alpha * (z - z_n) + beta
        if fixed is None:
            err = err_const * model.error_norm(z - z_pred, z, rtol, atol)
            if not np.isfinite(err):
                log.debug("non-finite error estimate t=%.6e h=%.3e", t_n, h)
                stats["rejected"] += 1
                lu = None
                h *= 0.25
                order_cap = 1
                continue
            if err > 1.0:
                log.debug("reject t=%.6e h=%.3e order=%d err=%.3g", t_n, h, order, err)
                stats["rejected"] += 1
                h *= max(0.2, 0.9 * err ** (-1.0 / (order + 1)))
                continue
            factor = opt.max_growth if err == 0 else min(opt.max_growth, 0.9 * err ** (-1.0 / (order + 1)))
            h_next = h * max(0.2, factor)
        else:
            k_fixed += 1
        T.append(t_new)
        Z.append(z)
        ZD.append(zd)
        stats["steps"] += 1
        order_cap = 2
        if restart:
            start, restart = len(T) - 1, False
        if fixed is None:
            h = h_next

    stats["rtol"] = rtol
    return Trajectory(np.array(T), np.array(Z), np.array(ZD), stats)
