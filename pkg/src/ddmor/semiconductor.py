"""Scaled drift-diffusion device physics on the mixed 1D discretisation.

State of one device, in this order::

    y = (psi, n, p, g_psi, J_n, J_p)     sizes (N, N, N, M, M, M)

with ``g_psi`` the discrete potential gradient.  All quantities are
unit-scaled; time stays in seconds.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, ConfigError, InvalidDeviceError, SolverError

ELEMENTARY_CHARGE = 1.602176634e-19  # C

VARIABLES = ("psi", "n", "p", "g_psi", "J_n", "J_p")
# which mass matrix defines each variable's space
SPACE = {"psi": "L", "n": "L", "p": "L", "g_psi": "H", "J_n": "H", "J_p": "H"}

__all__ = [
    "ELEMENTARY_CHARGE",
    "VARIABLES",
    "PhysicalDevice",
    "ScaledDevice",
    "DeviceBlock",
    "scale_device",
    "equilibrium_boundary",
    "recombination",
    "assemble_nonlinearity",
    "assemble_rhs",
    "coupling_rows",
    "coupling_current",
]


@dataclass(frozen=True)
class PhysicalDevice:
    """Diode parameters in physical units (cm, V, s).

    ``doping`` is a piecewise-constant profile given as ``(x_start, value)``
    pairs with ``x_start`` a fraction of the device length.
    """

    length: float = 1e-4
    area: float = 1e-5
    permittivity: float = 1.03545e-12
    thermal_voltage: float = 0.0259
    mu_n: float = 1350.0
    mu_p: float = 480.0
    tau_n: float = 330e-9
    tau_p: float = 33e-9
    intrinsic: float = 1.4e10
    doping: tuple = ((0.0, -9.94e15), (0.5, 4.06e18))
    charge: float = ELEMENTARY_CHARGE

    def doping_at(self, x):
        """Physical doping at relative positions ``x`` in [0, 1]."""
        starts = np.array([s for s, _ in self.doping], dtype=float)
        values = np.array([v for _, v in self.doping], dtype=float)
        idx = np.searchsorted(starts, np.asarray(x, dtype=float), side="right") - 1
        return values[np.clip(idx, 0, len(values) - 1)]

    @property
    def doping_max(self):
        return max(abs(v) for _, v in self.doping)


@dataclass(frozen=True)
class ScaledDevice:
    lam: float
    nu_n: float
    nu_p: float
    eta: float
    tau_n: float
    tau_p: float
    current_scale_n: float
    current_scale_p: float
    displacement_scale: float
    thermal_voltage: float
    doping_max: float
    physical: PhysicalDevice = field(repr=False)

    def doping_at(self, x):
        return self.physical.doping_at(x) / self.doping_max


def scale_device(dev):
    positive = {
        "length": dev.length,
        "area": dev.area,
        "permittivity": dev.permittivity,
        "thermal_voltage": dev.thermal_voltage,
        "mu_n": dev.mu_n,
        "mu_p": dev.mu_p,
        "tau_n": dev.tau_n,
        "tau_p": dev.tau_p,
        "intrinsic": dev.intrinsic,
        "charge": dev.charge,
    }
    for name, value in positive.items():
        if not np.isfinite(value) or value <= 0:
            raise InvalidDeviceError(f"{name} must be positive, got {value!r}")
    if not dev.doping or not np.all(np.isfinite([v for _, v in dev.doping])):
        raise InvalidDeviceError("doping profile must be a non-empty list of finite values")
    starts = [s for s, _ in dev.doping]
    if starts[0] != 0.0 or any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= 1.0:
        raise InvalidDeviceError("doping breakpoints must start at 0 and increase inside [0, 1)")
    cmax = dev.doping_max
    if cmax <= 0:
        raise InvalidDeviceError("doping profile is identically zero")

    L, ut, q = dev.length, dev.thermal_voltage, dev.charge
    eta = dev.intrinsic / cmax
    if not 0 < eta < 1:
        raise InvalidDeviceError(f"scaled intrinsic density {eta} outside (0, 1)")
    flux = dev.area * q * ut * cmax / L
    return ScaledDevice(
        lam=dev.permittivity * ut / (L**2 * q * cmax),
        nu_n=ut * dev.mu_n / L**2,
        nu_p=ut * dev.mu_p / L**2,
        eta=eta,
        tau_n=dev.tau_n,
        tau_p=dev.tau_p,
        current_scale_n=flux * dev.mu_n,
        current_scale_p=flux * dev.mu_p,
        displacement_scale=dev.area * dev.permittivity * ut / L,
        thermal_voltage=ut,
        doping_max=cmax,
        physical=dev,
    )


def equilibrium_boundary(c_tilde, applied, thermal_voltage, eta):
    """Scaled Dirichlet values (psi, n, p) at an Ohmic contact.

    ``applied`` is the contact's network potential in volts.
    """
    c = np.asarray(c_tilde, dtype=float)
    root = np.sqrt(c * c + 4.0 * eta * eta)
    # cancellation-free forms: one of root +/- c is always well conditioned
    with np.errstate(divide="ignore"):
        n_bc = np.where(c >= 0, 0.5 * (root + c), 2.0 * eta * eta / (root - c))
        p_bc = np.where(c >= 0, 2.0 * eta * eta / (root + c), 0.5 * (root - c))
    psi_bc = np.log(n_bc / eta) + np.asarray(applied, dtype=float) / thermal_voltage
    return psi_bc, n_bc, p_bc


def _srh_parts(n, p, dev):
    num = n * p - dev.eta**2
    den = dev.tau_p * (n + dev.eta) + dev.tau_n * (p + dev.eta)
    floor = 1e-30 * (dev.tau_n + dev.tau_p)
    clamped = den <= floor
    return num, np.where(clamped, floor, den), clamped


def recombination(n, p, dev, return_flags=False):
    """Scaled Shockley-Read-Hall rate (1/s), one value per element.

    A non-positive denominator (only reachable from negative Newton iterates)
    is clamped and reported through ``return_flags``.
    """
    num, den, clamped = _srh_parts(np.asarray(n, float), np.asarray(p, float), dev)
    rate = num / den
    return (rate, clamped) if return_flags else rate


def recombination_derivatives(n, p, dev):
    num, den, clamped = _srh_parts(n, p, dev)
    dn = (p * den - num * np.where(clamped, 0.0, dev.tau_p)) / den**2
    dp = (n * den - num * np.where(clamped, 0.0, dev.tau_n)) / den**2
    return dn, dp


def _drift(conc, g, h):
    """``int conc * g * phi_l`` for piecewise-constant conc and piecewise-linear g."""
    out = np.zeros(h.size + 1)
    w = conc * h / 6.0
    out[:-1] += w * (2.0 * g[:-1] + g[1:])
    out[1:] += w * (g[:-1] + 2.0 * g[1:])
    return out


def assemble_nonlinearity(n, p, g, fem, dev):
    N, M = fem.N, fem.M
    n, p, g = (np.asarray(a, dtype=float) for a in (n, p, g))
    if n.shape != (N,) or p.shape != (N,) or g.shape != (M,):
        raise AssemblyError(
            f"expected n, p of length {N} and g_psi of length {M}, got {n.shape}, {p.shape}, {g.shape}"
        )
    h = fem.h
    rh = recombination(n, p, dev) * h
    return np.concatenate([np.zeros(N), -rh, rh, np.zeros(M), _drift(n, g, h), _drift(p, g, h)])


def nonlinearity_jacobian(n, p, g, fem, dev):
    """Sparse Jacobian of ``assemble_nonlinearity`` w.r.t. the full device state."""
    N, M = fem.N, fem.M
    h = fem.h
    k = np.arange(N)
    dRn, dRp = recombination_derivatives(n, p, dev)
    on, op, og, oJn, oJp = N, 2 * N, 3 * N, 3 * N + M, 3 * N + 2 * M

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # recombination rows
    add(on + k, on + k, -dRn * h)
    add(on + k, op + k, -dRp * h)
    add(op + k, on + k, dRn * h)
    add(op + k, op + k, dRp * h)

    # drift rows: w.r.t. the concentration
    left = h * (2.0 * g[:-1] + g[1:]) / 6.0
    right = h * (g[:-1] + 2.0 * g[1:]) / 6.0
    for orow, oconc, conc in ((oJn, on, n), (oJp, op, p)):
        add(orow + k, oconc + k, left)
        add(orow + k + 1, oconc + k, right)
        # w.r.t. g_psi: element mass matrix weighted by conc
        w = conc * h / 6.0
        add(orow + k, og + k, 2.0 * w)
        add(orow + k, og + k + 1, w)
        add(orow + k + 1, og + k, w)
        add(orow + k + 1, og + k + 1, 2.0 * w)

    size = 3 * N + 3 * M
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )


def contact_doping(dev, fem):
    """Scaled doping value seen by each contact."""
    x = fem.mesh.nodes[list(fem.mesh.contact_nodes)]
    # a contact sits on the boundary: take the value of the adjacent element
    inside = np.clip(x, fem.mesh.midpoints[0], fem.mesh.midpoints[-1])
    return dev.doping_at(inside)


def assemble_rhs(contact_potentials, dev, fem):
    """Load vector b for given contact potentials (volts, one per contact)."""
    v = np.asarray(contact_potentials, dtype=float)
    ncont = fem.trace.shape[0]
    if v.shape != (ncont,):
        raise ConfigError(f"device has {ncont} contacts but {v.size} potentials were mapped")
    N = fem.N
    psi_bc, n_bc, p_bc = equilibrium_boundary(
        contact_doping(dev, fem), v, dev.thermal_voltage, dev.eta
    )
    T = fem.trace.T
    b1 = -dev.doping_at(fem.mesh.midpoints) * fem.h
    return np.concatenate([b1, np.zeros(2 * N), T @ psi_bc, T @ n_bc, -(T @ p_bc)])


def rhs_potential_derivative(dev, fem):
    """d b / d (contact potentials), a dense (size x contacts) matrix."""
    N, M = fem.N, fem.M
    out = np.zeros((3 * N + 3 * M, fem.trace.shape[0]))
    out[3 * N : 3 * N + M, :] = fem.trace.T.toarray() / dev.thermal_voltage
    return out


def coupling_rows(dev, fem, contact):
    """Row extractors (C1, C2, C3) for the terminal current at ``contact``.

    The current is ``C1 @ J_n + C2 @ J_p + C3 @ d/dt g_psi`` in amperes.
    """
    ncont = fem.trace.shape[0]
    if not 0 <= contact < ncont:
        raise IndexError(f"contact index {contact} out of range for {ncont} contacts")
    row = fem.contact_trace(contact)
    return (
        dev.current_scale_n * row,
        dev.current_scale_p * row,
        -dev.displacement_scale * row,
    )


def coupling_current(Jn, Jp, dg_dt, dev, fem, contact):
    c1, c2, c3 = coupling_rows(dev, fem, contact)
    return float(c1 @ Jn + c2 @ Jp + c3 @ dg_dt)


class DeviceBlock:
    """One discretised semiconductor: linear operators, nonlinearity, loads.

    The residual of the finite element rows is
    ``E ydot + A y + F(y) - b(v)`` with ``v`` the contact potentials.
    Contact 0 (x = 0) is driven by the branch voltage, contact 1 (x = 1) is
    the reference terminal and also the one the terminal current is read at.
    """

    exit_contact = 1

    def __init__(self, sdev, fem):
        self.dev = sdev
        self.fem = fem
        N, M = fem.N, fem.M
        self.N, self.M = N, M
        self.size = 3 * N + 3 * M
        offsets = np.cumsum([0, N, N, N, M, M, M])
        self.slices = {v: slice(offsets[i], offsets[i + 1]) for i, v in enumerate(VARIABLES)}

        ML, MH, D = fem.mass_L, fem.mass_H, fem.div_D
        Z = None
        self.A = sp.bmat(
            [
                [Z, -ML, ML, sdev.lam * D, Z, Z],
                [Z, Z, Z, Z, sdev.nu_n * D, Z],
                [Z, Z, Z, Z, Z, sdev.nu_p * D],
                [D.T, Z, Z, MH, Z, Z],
                [Z, D.T, Z, Z, MH, Z],
                [Z, Z, -D.T, Z, Z, MH],
            ],
            format="csr",
        )
        e = sp.bmat(
            [
                [sp.csr_matrix((N, N)), None, None, None],
                [None, -ML, None, None],
                [None, None, ML, None],
                [None, None, None, sp.csr_matrix((3 * M, 3 * M))],
            ]
        )
        self.E = e.tocsr()
        self.db_dv = rhs_potential_derivative(sdev, fem)
        # load vector pieces that do not depend on the contact potentials
        self._b_static = assemble_rhs(np.zeros(fem.trace.shape[0]), sdev, fem)
        self._b_static[3 * N :] = 0.0
        self._contact_doping = contact_doping(sdev, fem)
        self._trace_T = fem.trace.T.toarray()
        c1, c2, c3 = coupling_rows(sdev, fem, self.exit_contact)
        self.coupling = np.zeros(self.size)  # acts on y
        self.coupling[self.slices["J_n"]] = c1
        self.coupling[self.slices["J_p"]] = c2
        self.coupling_dot = np.zeros(self.size)  # acts on ydot
        self.coupling_dot[self.slices["g_psi"]] = c3
        # rows 2, 3 carry the mobility time scales; normalise them for residual norms
        self.row_scale = np.ones(self.size)
        self.row_scale[self.slices["n"]] = 1.0 / sdev.nu_n
        self.row_scale[self.slices["p"]] = 1.0 / sdev.nu_p

    def split(self, y):
        return {v: y[..., s] for v, s in self.slices.items()}

    def nonlinearity(self, y):
        s = self.slices
        return assemble_nonlinearity(y[s["n"]], y[s["p"]], y[s["g_psi"]], self.fem, self.dev)

    def nonlinearity_jacobian(self, y):
        s = self.slices
        return nonlinearity_jacobian(y[s["n"]], y[s["p"]], y[s["g_psi"]], self.fem, self.dev)

    def rhs(self, contact_potentials):
        v = np.asarray(contact_potentials, dtype=float)
        if v.shape != (self._trace_T.shape[1],):
            return assemble_rhs(v, self.dev, self.fem)  # raises the config error
        psi_bc, n_bc, p_bc = equilibrium_boundary(self._contact_doping, v, self.dev.thermal_voltage, self.dev.eta)
        b = self._b_static.copy()
        s, T = self.slices, self._trace_T
        b[s["g_psi"]] = T @ psi_bc
        b[s["J_n"]] = T @ n_bc
        b[s["J_p"]] = -(T @ p_bc)
        return b

    def residual(self, y, ydot, contact_potentials):
        return self.E @ ydot + self.A @ y + self.nonlinearity(y) - self.rhs(contact_potentials)

    def jacobian(self, y, alpha=0.0):
        J = self.A + self.nonlinearity_jacobian(y)
        if alpha:
            J = J + alpha * self.E
        return J

    def terminal_current(self, y, ydot):
        return float(self.coupling @ y + self.coupling_dot @ ydot)

    def local_equilibrium_guess(self, contact_potentials=(0.0, 0.0)):
        """Charge-neutral guess with fluxes from the linear flux rows."""
        c = self.dev.doping_at(self.fem.mesh.midpoints)
        psi, n, p = equilibrium_boundary(c, 0.0, self.dev.thermal_voltage, self.dev.eta)
        y = np.zeros(self.size)
        s = self.slices
        y[s["psi"]], y[s["n"]], y[s["p"]] = psi, n, p
        b = self.rhs(contact_potentials)
        MH = self.fem.mass_H.tocsc()
        D = self.fem.div_D
        y[s["g_psi"]] = spla.spsolve(MH, b[s["g_psi"]] - D.T @ psi)
        return y

    def solve_equilibrium(self, tol=1e-13, maxiter=60):
        """Discrete zero-bias equilibrium of the full device system.

        Boltzmann carriers are only approximately stationary for the mixed
        discretisation, so the Boltzmann-Poisson solution is refined by Newton
        on the device rows.  Concentration updates are limited to a factor of
        ten per iteration and potential updates to one thermal voltage.
        """
        s = self.slices
        y = self.solve_boltzmann_poisson()
        zero = np.zeros_like(y)
        for _ in range(maxiter):
            r = self.residual(y, zero, (0.0, 0.0))
            dy = -spla.spsolve(self.jacobian(y, 0.0).tocsc(), r)
            lam = min(1.0, 1.0 / max(np.max(np.abs(dy[s["psi"]])), 1e-300))
            yt = y + lam * dy
            for v in ("n", "p"):
                yt[s[v]] = np.clip(yt[s[v]], 0.1 * y[s[v]], 10.0 * y[s[v]])
            step = yt - y
            y = yt
            rel = max(np.max(np.abs(step[s["psi"]])),
                      np.max(np.abs(step[s["n"]] / y[s["n"]])),
                      np.max(np.abs(step[s["p"]] / y[s["p"]])))
            if rel < tol:
                return y
        raise SolverError("device equilibrium Newton did not converge; refine the mesh")

    def solve_boltzmann_poisson(self, contact_potentials=(0.0, 0.0), tol=1e-12, maxiter=100):
        """Equilibrium potential with Boltzmann carriers; a starting point for the full solve."""
        fem, dev = self.fem, self.dev
        N = self.N
        ML, MH, D = fem.mass_L, fem.mass_H, fem.div_D
        c = dev.doping_at(fem.mesh.midpoints)
        b = self.rhs(contact_potentials)
        bg = b[self.slices["g_psi"]]
        y0 = self.local_equilibrium_guess(contact_potentials)
        x = np.concatenate([y0[self.slices["psi"]], y0[self.slices["g_psi"]]])

        def F(x):
            psi, g = x[:N], x[N:]
            rho = dev.eta * (np.exp(psi) - np.exp(-psi)) - c
            return np.concatenate([dev.lam * (D @ g) - ML @ rho, D.T @ psi + MH @ g - bg])

        for _ in range(maxiter):
            psi = x[:N]
            drho = dev.eta * (np.exp(psi) + np.exp(-psi))
            J = sp.bmat([[-ML @ sp.diags(drho), dev.lam * D], [D.T, MH]], format="csc")
            lu = spla.splu(J)
            dx = -lu.solve(F(x))
            step = 1.0
            # cap potential updates at a few thermal voltages per iteration
            big = np.max(np.abs(dx[:N]))
            if big > 5.0:
                step = 5.0 / big
            x = x + step * dx
            if np.max(np.abs(dx[:N])) < tol * max(1.0, np.max(np.abs(psi))):
                break
        else:
            raise SolverError("Boltzmann-Poisson equilibrium iteration did not converge")
        y = y0.copy()
        psi, g = x[:N], x[N:]
        y[self.slices["psi"]] = psi
        y[self.slices["g_psi"]] = g
        y[self.slices["n"]] = dev.eta * np.exp(psi)
        y[self.slices["p"]] = dev.eta * np.exp(-psi)
        # consistent fluxes for the given carriers
        s = self.slices
        MHc = MH.tocsc()
        F0 = self.nonlinearity(y)
        y[s["J_n"]] = spla.spsolve(MHc, b[s["J_n"]] - D.T @ y[s["n"]] - F0[s["J_n"]])
        y[s["J_p"]] = spla.spsolve(MHc, b[s["J_p"]] + D.T @ y[s["p"]] - F0[s["J_p"]])
        return y
