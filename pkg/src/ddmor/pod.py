"""Proper orthogonal decomposition of device snapshots and reduced models.

Each of the six device variables gets its own basis, orthonormal in the
mass matrix of its finite element space (``M_L`` for psi, n, p and ``M_H``
for the fluxes).  The reduced device keeps the network unchanged and
replaces the finite element rows by their Galerkin projection; the
nonlinearity is still evaluated on the lifted state.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import ConfigError, InvalidMassError, UndefinedGapError
from .network import CoupledModel
from .integrator import Trajectory, consistent_initialize
from .semiconductor import SPACE, VARIABLES

RANK_CUTOFF = 1e-13
BASIS_SCHEMA = "ddmor-basis/1"
MERGE_STRATEGIES = ("resvd-all", "pod-of-bases")

__all__ = [
    "PodBasis",
    "ReducedModel",
    "ReducedCoupledModel",
    "SnapshotStore",
    "information_gap",
    "numerical_rank",
    "compute_pod",
    "build_reduced_model",
    "reduced_residual",
    "device_snapshots",
    "merge_bases",
    "bases_by_device",
    "write_basis",
    "read_basis",
]


@dataclass(frozen=True)
class PodBasis:
    """Mass-orthonormal basis of one device variable.

    Attributes
    ----------
    tag : str
        Variable name, one of ``VARIABLES``.
    U : ndarray, shape (n, s)
        Basis functions as finite element coefficient vectors.
    singular_values : ndarray
        Full list of singular values of the weighted snapshot matrix.
    s : int
        Retained dimension.
    mass_tag : str
        ``"L"`` or ``"H"``.
    """

    tag: str
    U: np.ndarray
    singular_values: np.ndarray
    s: int
    mass_tag: str

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def gap(self):
        return information_gap(self.singular_values, self.s)


def numerical_rank(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.size == 0 or sigma[0] <= 0:
        return 0
    return int(np.count_nonzero(sigma >= RANK_CUTOFF * sigma[0]))


def information_gap(sigma, s):
    """Relative energy of the discarded singular values, ``sqrt(sum_{i>s} / sum_{i<=m})``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
        raise ValueError("singular values must be nonnegative and nonincreasing")
    m = numerical_rank(sigma)
    if m == 0:
        raise UndefinedGapError("information gap undefined for all-zero singular values")
    if not 0 <= s <= sigma.size:
        raise ValueError(f"s = {s} outside [0, {sigma.size}]")
    sq = sigma[:m] ** 2
    tail = sq[s:].sum() if s < m else 0.0
    return math.sqrt(tail / sq.sum())


def select_dimension(sigma, delta_target):
    """Smallest ``s >= 1`` with ``gap(s) <= delta_target``; all ``m`` if the target is <= 0."""
    m = numerical_rank(sigma)
    if m == 0:
        raise UndefinedGapError("no nonzero singular values")
    if delta_target <= 0:
        return m
    sq = np.asarray(sigma[:m], dtype=float) ** 2
    tails = np.sqrt(np.maximum(np.cumsum(sq[::-1])[::-1] - sq, 0.0) / sq.sum())  # gap(s) for s = 1..m
    return int(np.argmax(tails <= delta_target)) + 1


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


def compute_pod(Y, M, delta_target, tag="", mass_tag=""):
    """POD basis of the snapshot matrix ``Y`` (n x l) in the ``M`` inner product.

    With ``M = L L^T`` the SVD of ``L^T Y`` gives ``U = L^{-T} U~[:, :s]``.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    Md = _dense(M)
    if Md.shape != (Y.shape[0], Y.shape[0]):
        raise ConfigError(f"mass matrix {Md.shape} does not match {Y.shape[0]} snapshot rows")
    try:
        L = la.cholesky(Md, lower=True)
    except la.LinAlgError as exc:
        raise InvalidMassError(f"Cholesky factorisation failed: {exc}")
    Ut, sigma, _ = la.svd(L.T @ Y, full_matrices=False, lapack_driver="gesdd")
    s = select_dimension(sigma, delta_target)
    U = la.solve_triangular(L.T, Ut[:, :s], lower=False)
    return PodBasis(tag, U, sigma, s, mass_tag)


def device_snapshots(states, device):
    """Per-variable snapshot matrices (n x l) of a device block from stacked states (views)."""
    return {v: states[:, s].T for v, s in device.slices.items()}


def _mass(fem, mass_tag):
    return fem.mass_L if mass_tag == "L" else fem.mass_H


class ReducedModel:
    """Galerkin-projected device: drop-in replacement for a full device block.

    ``A_pod = U^T A U`` and the projected mass are precomputed; the
    nonlinearity ``U^T F(U gamma)`` and its Jacobian are evaluated online.
    """

    def __init__(self, full, bases, clip=True):
        self.full = full
        self.clip = bool(clip)
        self.fem = full.fem
        self.dev = full.dev
        missing = [v for v in VARIABLES if v not in bases]
        if missing:
            raise ConfigError(f"missing bases for {missing}")
        self.bases = {v: bases[v] for v in VARIABLES}
        for v, b in self.bases.items():
            if b.mass_tag != SPACE[v]:
                raise ConfigError(f"basis for {v} is orthonormal in M_{b.mass_tag}, expected M_{SPACE[v]}")
            n = full.slices[v].stop - full.slices[v].start
            if b.U.shape[0] != n:
                raise ConfigError(f"basis for {v} has {b.U.shape[0]} rows, device needs {n}")

        dims = [self.bases[v].U.shape[1] for v in VARIABLES]
        offsets = np.cumsum([0] + dims)
        self.slices = {v: slice(offsets[i], offsets[i + 1]) for i, v in enumerate(VARIABLES)}
        self.size = int(offsets[-1])
        self.dims = dict(zip(VARIABLES, dims))
        self.U = sp.block_diag([self.bases[v].U for v in VARIABLES], format="csr")
        self.UT = self.U.T.tocsr()

        self.A_pod = self._project(full.A)
        self.mass = self._project(full.E)
        # identities implied by the orthonormality, made exact
        for v in ("g_psi", "J_n", "J_p"):
            s = self.slices[v]
            self.A_pod[s, s] = np.eye(self.dims[v])
        sn, sp_ = self.slices["n"], self.slices["p"]
        self.mass[sn, sn] = -np.eye(self.dims["n"])
        self.mass[sp_, sp_] = np.eye(self.dims["p"])

        self.db_dv = self.UT @ full.db_dv
        self.coupling = full.coupling @ self.U
        self.coupling_dot = full.coupling_dot @ self.U
        self.row_scale = np.concatenate(
            [np.full(self.dims[v], full.row_scale[full.slices[v].start]) for v in VARIABLES]
        )
        self._mass_blk = sp.block_diag([_mass(self.fem, SPACE[v]) for v in VARIABLES], format="csr")
        fs = full.slices
        self._conc = np.r_[fs["n"].start : fs["n"].stop, fs["p"].start : fs["p"].stop]

    def _project(self, Afull):
        return np.asarray((self.UT @ (Afull @ self.U)).todense())

    def lift(self, gamma):
        return self.U @ gamma

    def project(self, y):
        """Mass-orthogonal projection coefficients of a full device state."""
        return self.UT @ (self._mass_blk @ y)

    def _lifted(self, gamma):
        """Lifted state at which the nonlinearity is evaluated, and the clip mask."""
        y = self.U @ gamma
        if not self.clip:
            return y, None
        c = y[self._conc]
        keep = c >= 0.0
        if keep.all():
            return y, None
        y = y.copy()
        y[self._conc] = np.where(keep, c, 0.0)
        mask = np.ones(y.size)
        mask[self._conc] = keep
        return y, mask

    def residual(self, gamma, gamma_dot, contact_potentials):
        y, _ = self._lifted(gamma)
        r = self.full.nonlinearity(y) - self.full.rhs(contact_potentials)
        return self.mass @ gamma_dot + self.A_pod @ gamma + self.UT @ r

    def jacobian(self, gamma, alpha=0.0):
        y, mask = self._lifted(gamma)
        JFy = self.full.nonlinearity_jacobian(y)
        if mask is not None:
            JFy = JFy @ sp.diags(mask)
        JF = self.UT @ (JFy @ self.U)
        J = self.A_pod + (JF.toarray() if sp.issparse(JF) else JF)
        if alpha:
            J = J + alpha * self.mass
        return J

    def atol(self, tolerances):
        return self.full.atol(tolerances)


def build_reduced_model(fem, dev, bases):
    """Reduced device for a scaled device on ``fem`` with one basis per variable."""
    from .network import FullDevice

    return ReducedModel(FullDevice(dev, fem), bases)


class ReducedCoupledModel(CoupledModel):
    """Network plus reduced devices.

    Error control and Newton norms are taken on the lifted state with the
    full model's weights, so a full-rank reduced model follows the same step
    sequence as the full one.
    """

    def __init__(self, full_model, bases):
        """``bases`` is a list (one per semiconductor branch) of per-variable dicts."""
        if len(bases) != len(full_model.devices):
            raise ConfigError(f"{len(full_model.devices)} devices but {len(bases)} basis sets")
        self.full_model = full_model
        self.fem = full_model.fem
        devices = [ReducedModel(d, b) for d, b in zip(full_model.devices, bases)]
        super().__init__(full_model.netlist, devices)

    def _lift_matrix(self):
        if not hasattr(self, "_L"):
            blocks = [sp.identity(self.n_net, format="csr")] + [d.U for d in self.devices]
            self._L = sp.block_diag(blocks, format="csr")
        return self._L

    def lift(self, z):
        """Full coefficient vector(s) of reduced state(s); accepts (size,) or (l, size)."""
        L = self._lift_matrix()
        z = np.asarray(z)
        return L @ z if z.ndim == 1 else (L @ z.T).T

    def project(self, z_full):
        out = np.empty(self.size)
        n = self.n_net
        out[:n] = z_full[:n]
        for k, dev in enumerate(self.devices):
            out[self.layout[self.s_branches[k].name]] = dev.project(self.full_model.device_state(z_full, k))
        return out

    def with_frequency(self, frequency):
        other = super().with_frequency(frequency)
        other.full_model = self.full_model.with_frequency(frequency)
        return other

    def lift_trajectory(self, traj):
        return Trajectory(traj.times, self.lift(traj.states), self.lift(traj.derivatives), dict(traj.meta))

    def initial_guess(self, t0=0.0):
        """Projection of the full model's stationary operating point at ``t0``."""
        if getattr(self, "_op_point", None) is None or self._op_point[0] != t0:
            z, _ = consistent_initialize(self.full_model, t0)
            self._op_point = (t0, z)
        return self.project(self._op_point[1])

    def atol(self, tolerances):
        return self.full_model.atol(tolerances)

    def error_norm(self, dz, z, rtol, atol):
        return CoupledModel.error_norm(self, self.lift(dz), self.lift(z), rtol, atol)

    def jacobian(self, t, z, zd, alpha):
        return sp.csc_matrix(super().jacobian(t, z, zd, alpha))

    @property
    def total_dimension(self):
        return sum(d.size for d in self.devices)


def reduced_residual(t, z, zd, model):
    """Residual of the reduced coupled system (network rows then projected device rows)."""
    return model.residual(t, z, zd)


@dataclass
class SnapshotStore:
    """Snapshots and bases accumulated over the reference parameters.

    Keys are ``(branch name, variable)``.
    """

    snapshots: dict = field(default_factory=dict)
    bases: dict = field(default_factory=dict)

    def __len__(self):
        return max((len(v) for v in self.snapshots.values()), default=0)


def merge_bases(store, new_snapshots, fem, delta_target, strategy="resvd-all"):
    """Add ``new_snapshots`` ({key: Y}) to ``store`` and return updated bases.

    ``resvd-all`` recomputes the POD of all stored snapshots; ``pod-of-bases``
    takes a POD of the new snapshots and then a POD of the column union of
    the previous and the new basis.
    """
    if strategy not in MERGE_STRATEGIES:
        raise ConfigError(f"merge strategy must be one of {MERGE_STRATEGIES}, got {strategy!r}")
    if not new_snapshots and not store.snapshots:
        raise ConfigError("no snapshots to build a basis from")
    out = {}
    for key, Y in new_snapshots.items():
        store.snapshots.setdefault(key, []).append(np.asarray(Y, dtype=float))
    for key, Ys in store.snapshots.items():
        tag = key[-1] if isinstance(key, tuple) else key
        mtag = SPACE[tag]
        M = _mass(fem, mtag)
        if strategy == "resvd-all" or not store.bases.get(key):
            basis = compute_pod(np.hstack(Ys), M, delta_target, tag, mtag)
        else:
            fresh = compute_pod(Ys[-1], M, delta_target, tag, mtag) if key in new_snapshots else None
            cols = [store.bases[key][-1].U] + ([fresh.U] if fresh is not None else [])
            basis = compute_pod(np.hstack(cols), M, delta_target, tag, mtag)
        store.bases.setdefault(key, []).append(basis)
        out[key] = basis
    return out


def bases_by_device(bases, model):
    """Regroup ``{(branch, variable): PodBasis}`` into the per-device list used by the reduced model."""
    return [{v: bases[(b.name, v)] for v in VARIABLES} for b in model.s_branches]


# -- CSV exchange -----------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def write_basis(path, basis, device=""):
    """Write a basis as CSV; values use 17 significant digits so reads are bit-exact."""
    n, s = basis.U.shape
    lines = [
        f"# {BASIS_SCHEMA}",
        f"tag,{basis.tag}",
        f"device,{device}",
        f"mass,{basis.mass_tag}",
        f"shape,{n},{s}",
        "sigma," + ",".join(_fmt(x) for x in basis.singular_values),
    ]
    lines += [",".join(_fmt(x) for x in row) for row in basis.U]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_basis(path):
    """Inverse of :func:`write_basis`; returns ``(PodBasis, device)``."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].strip() != f"# {BASIS_SCHEMA}":
        raise ConfigError(f"not a basis file (expected '# {BASIS_SCHEMA}' header)", str(path))
    meta = {}
    for ln in lines[1:6]:
        key, _, val = ln.partition(",")
        meta[key] = val
    try:
        n, s = (int(x) for x in meta["shape"].split(","))
        sigma = np.array([float(x) for x in meta["sigma"].split(",") if x != ""])
        rows = [[float(x) for x in ln.split(",")] for ln in lines[6 : 6 + n]]
        U = np.array(rows, dtype=float).reshape(n, s)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed basis file ({exc})", str(path))
    return PodBasis(meta["tag"], U, sigma, s, meta["mass"]), meta.get("device", "")
