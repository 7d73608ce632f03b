"""Modified nodal analysis network coupled to drift-diffusion devices.

Global unknowns are ordered ``(e, j_V, j_L, j_S, device_1, device_2, ...)``.
Each semiconductor branch carries one two-contact device: the branch's first
node ("+") drives contact x = 0, the second node ("-") is the reference
contact x = 1, and ``j_S`` is the current from "+" through the device to
"-".  The sparse LU works on a reverse Cuthill-McKee permutation of the
(constant) Jacobian pattern.
"""

from dataclasses import dataclass, field, replace
import copy
import math

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .mesh import assemble_operators, build_mesh
from .semiconductor import VARIABLES, DeviceBlock, PhysicalDevice, scale_device

GROUND_NAMES = ("0", "gnd", "ground", "GND")
BRANCH_TYPES = ("R", "C", "L", "V", "I", "S")

__all__ = [
    "Source",
    "Branch",
    "Netlist",
    "Layout",
    "CoupledModel",
    "FullModel",
    "parse_netlist",
    "source_eval",
    "source_derivative",
]


@dataclass(frozen=True)
class Source:
    """``amplitude * sin(2 pi frequency t) + offset``; ``dc`` ignores the sine."""

    waveform: str = "sin"
    amplitude: float = 0.0
    frequency: float = 0.0
    offset: float = 0.0


def source_eval(t, src):
    if src.waveform == "dc":
        return src.offset
    return src.amplitude * math.sin(2.0 * math.pi * src.frequency * t) + src.offset


def source_derivative(t, src):
    """Time derivative of :func:`source_eval`."""
    if src.waveform == "dc":
        return 0.0
    w = 2.0 * math.pi * src.frequency
    return src.amplitude * w * math.cos(w * t)


@dataclass(frozen=True)
class Branch:
    name: str
    kind: str
    nodes: tuple  # (leaves, enters); -1 is ground
    value: float = 0.0
    source: Source = None
    device: str = None


@dataclass(frozen=True)
class Netlist:
    node_names: tuple
    branches: tuple
    devices: dict = field(default_factory=dict)
    mesh_elements: int = 200

    @property
    def node_count(self):
        return len(self.node_names)

    def of_kind(self, kind):
        return [b for b in self.branches if b.kind == kind]

    def incidence(self, kind):
        """Dense incidence matrix (nodes x branches of ``kind``), ground row dropped."""
        branches = self.of_kind(kind)
        A = np.zeros((self.node_count, len(branches)))
        for j, b in enumerate(branches):
            a, c = b.nodes
            if a >= 0:
                A[a, j] += 1.0
            if c >= 0:
                A[c, j] -= 1.0
        return A

    @property
    def sinusoidal_frequencies(self):
        return sorted({b.source.frequency for b in self.branches if b.source and b.source.waveform == "sin"})

    def with_frequency(self, frequency):
        """Copy with every sinusoidal source set to ``frequency`` (Hz)."""
        out = []
        for b in self.branches:
            if b.source is not None and b.source.waveform == "sin":
                b = replace(b, source=replace(b.source, frequency=float(frequency)))
            out.append(b)
        return replace(self, branches=tuple(out))

    def with_amplitude(self, amplitude):
        out = []
        for b in self.branches:
            if b.source is not None and b.source.waveform == "sin":
                b = replace(b, source=replace(b.source, amplitude=float(amplitude)))
            out.append(b)
        return replace(self, branches=tuple(out))

    @property
    def period(self):
        f = self.sinusoidal_frequencies
        return 1.0 / min(f) if f and min(f) > 0 else None


_DEVICE_KEYS = {
    "length", "area", "permittivity", "thermal_voltage", "mu_n", "mu_p",
    "tau_n", "tau_p", "intrinsic", "doping", "charge",
}


def _parse_device(name, spec):
    if not isinstance(spec, dict):
        raise ConfigError("device entry must be an object", f"devices.{name}")
    unknown = set(spec) - _DEVICE_KEYS
    if unknown:
        raise ConfigError(f"unknown device fields {sorted(unknown)}", f"devices.{name}")
    kw = dict(spec)
    if "doping" in kw:
        try:
            kw["doping"] = tuple((float(x), float(v)) for x, v in kw["doping"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"doping must be a list of [x_start, value] pairs ({exc})", f"devices.{name}.doping")
    return PhysicalDevice(**kw)


def parse_netlist(config):
    """Build a :class:`Netlist` from a parsed JSON document."""
    if not isinstance(config, dict):
        raise ConfigError("netlist document must be an object")
    names = config.get("nodes")
    if not isinstance(names, list) or not names:
        raise ConfigError("'nodes' must be a non-empty list of node names", "nodes")
    names = [str(n) for n in names]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate node name", "nodes")
    if any(n in GROUND_NAMES for n in names):
        raise ConfigError(f"ground ({'/'.join(GROUND_NAMES)}) must not be listed", "nodes")
    index = {n: i for i, n in enumerate(names)}

    devices = {}
    for dname, dspec in (config.get("devices") or {}).items():
        devices[dname] = _parse_device(dname, dspec)

    raw = config.get("branches")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("'branches' must be a non-empty list", "branches")
    branches, seen = [], set()
    used = set()
    for k, spec in enumerate(raw):
        loc = f"branches[{k}]"
        if not isinstance(spec, dict):
            raise ConfigError("branch entry must be an object", loc)
        name = str(spec.get("name", ""))
        if not name:
            raise ConfigError("branch needs a name", loc)
        if name in seen:
            raise ConfigError(f"duplicate branch name {name!r}", loc)
        seen.add(name)
        kind = spec.get("type")
        if kind not in BRANCH_TYPES:
            raise ConfigError(f"branch type must be one of {BRANCH_TYPES}, got {kind!r}", loc)
        nodes = spec.get("nodes")
        if not isinstance(nodes, list) or len(nodes) != 2:
            raise ConfigError("branch needs exactly two nodes", loc)
        idx = []
        for n in nodes:
            n = str(n)
            if n in GROUND_NAMES:
                idx.append(-1)
            elif n in index:
                idx.append(index[n])
                used.add(n)
            else:
                raise ConfigError(f"unknown node {n!r}", loc)
        if idx[0] == idx[1]:
            raise ConfigError("branch connects a node to itself", loc)

        value, source, device = 0.0, None, None
        if kind in ("R", "C", "L"):
            value = float(spec.get("value", float("nan")))
            if not value > 0:
                raise ConfigError(f"{kind} value must be positive", loc)
        elif kind in ("V", "I"):
            wf = spec.get("waveform", "sin")
            if wf not in ("sin", "dc"):
                raise ConfigError(f"waveform must be 'sin' or 'dc', got {wf!r}", loc)
            source = Source(
                waveform=wf,
                amplitude=float(spec.get("amplitude", 0.0)),
                frequency=float(spec.get("frequency", 0.0)),
                offset=float(spec.get("offset", spec.get("value", 0.0))),
            )
        else:
            device = spec.get("device")
            if device not in devices:
                raise ConfigError(f"missing device reference {device!r}", loc)
        branches.append(Branch(name, kind, tuple(idx), value, source, device))

    dangling = [n for n in names if n not in used]
    if dangling:
        raise ConfigError(f"dangling node(s) {dangling}", "nodes")

    mesh = config.get("mesh", {}) or {}
    elements = int(mesh.get("elements", 200))
    if elements < 2 or elements % 2:
        raise ConfigError("mesh.elements must be an even integer >= 2", "mesh.elements")
    return Netlist(tuple(names), tuple(branches), devices, elements)


class Layout:
    """Named contiguous index ranges of a state vector."""

    def __init__(self, parts):
        self.slices = {}
        start = 0
        for name, size in parts:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def __getitem__(self, name):
        return self.slices[name]

    def __contains__(self, name):
        return name in self.slices

    def names(self):
        return list(self.slices)

    def partition_of(self, index):
        for name, s in self.slices.items():
            if s.start <= index < s.stop:
                return name
        raise IndexError(index)


class CoupledModel:
    """Network equations plus one device representation per semiconductor branch.

    Device representations provide ``size``, ``residual(y, ydot, v)``,
    ``jacobian(y, alpha)``, ``mass`` (d residual / d ydot), ``db_dv``,
    ``coupling`` / ``coupling_dot`` and ``row_scale``.
    """

    def __init__(self, netlist, devices):
        self.netlist = netlist
        self.devices = list(devices)
        self.A_R = netlist.incidence("R")
        self.A_C = netlist.incidence("C")
        self.A_L = netlist.incidence("L")
        self.A_V = netlist.incidence("V")
        self.A_I = netlist.incidence("I")
        self.A_S = netlist.incidence("S")
        self.G = np.array([1.0 / b.value for b in netlist.of_kind("R")])
        self.Cap = np.array([b.value for b in netlist.of_kind("C")])
        self.Ind = np.array([b.value for b in netlist.of_kind("L")])
        self.v_sources = [b.source for b in netlist.of_kind("V")]
        self.i_sources = [b.source for b in netlist.of_kind("I")]
        self.s_branches = netlist.of_kind("S")
        self.source_scale = 1.0

        nn, nv, nl, ns = netlist.node_count, self.A_V.shape[1], self.A_L.shape[1], self.A_S.shape[1]
        parts = [("e", nn), ("j_V", nv), ("j_L", nl), ("j_S", ns)]
        for b, dev in zip(self.s_branches, self.devices):
            parts.append((b.name, dev.size))
        self.layout = Layout(parts)
        self.size = self.layout.size
        self.n_net = nn + nv + nl + ns

        self._net_static = sp.bmat(
            [
                [sp.csr_matrix(self.A_R * self.G @ self.A_R.T), self.A_V, self.A_L, self.A_S],
                [-self.A_L.T, None, sp.csr_matrix((nl, nl)), None],
                [self.A_V.T, sp.csr_matrix((nv, nv)), None, None],
                [None, None, None, sp.identity(ns)],
            ],
            format="csr",
        ) if self.n_net else None
        self._net_mass = sp.block_diag(
            [sp.csr_matrix(self.A_C * self.Cap @ self.A_C.T), sp.csr_matrix((nv, nv)),
             sp.diags(self.Ind) if nl else sp.csr_matrix((0, 0)), sp.csr_matrix((ns, ns))],
            format="csr",
        )

    def with_frequency(self, frequency):
        """Shallow copy with every sinusoidal source at ``frequency``; operators are shared."""
        other = copy.copy(self)
        other.netlist = self.netlist.with_frequency(frequency)
        other.v_sources = [b.source for b in other.netlist.of_kind("V")]
        other.i_sources = [b.source for b in other.netlist.of_kind("I")]
        return other

    # -- sources -----------------------------------------------------------
    def v_s(self, t):
        return self.source_scale * np.array([source_eval(t, s) for s in self.v_sources])

    def i_s(self, t):
        return self.source_scale * np.array([source_eval(t, s) for s in self.i_sources])

    def residual_dt(self, t, z):
        """Explicit time derivative of the residual (only the sources depend on t)."""
        out = np.zeros(self.size)
        nn, nv = self.netlist.node_count, self.A_V.shape[1]
        if self.i_sources:
            out[:nn] = self.source_scale * self.A_I @ np.array([source_derivative(t, s) for s in self.i_sources])
        if self.v_sources:
            nl = self.A_L.shape[1]
            out[nn + nl : nn + nl + nv] = -self.source_scale * np.array([source_derivative(t, s) for s in self.v_sources])
        return out

    def contact_potentials(self, e, k):
        """(driven, reference) contact potentials of device ``k``."""
        return np.array([self.A_S[:, k] @ e, 0.0])

    def device_state(self, z, k):
        return z[self.layout[self.s_branches[k].name]]

    # -- residual / Jacobian ----------------------------------------------
    def network_residual(self, t, z, zd):
        lay = self.layout
        e, jV, jL, jS = z[lay["e"]], z[lay["j_V"]], z[lay["j_L"]], z[lay["j_S"]]
        ed, jLd = zd[lay["e"]], zd[lay["j_L"]]
        kcl = (
            self.A_C @ (self.Cap * (self.A_C.T @ ed))
            + self.A_R @ (self.G * (self.A_R.T @ e))
            + self.A_L @ jL
            + self.A_V @ jV
            + self.A_S @ jS
        )
        if self.i_sources:
            kcl = kcl + self.A_I @ self.i_s(t)
        ind = self.Ind * jLd - self.A_L.T @ e
        vsrc = self.A_V.T @ e - self.v_s(t) if self.v_sources else np.zeros(0)
        srows = np.array(
            [
                jS[k] - dev.coupling @ self.device_state(z, k) - dev.coupling_dot @ self.device_state(zd, k)
                for k, dev in enumerate(self.devices)
            ]
        )
        return np.concatenate([kcl, ind, vsrc, srows])

    def residual(self, t, z, zd):
        e = z[self.layout["e"]]
        parts = [self.network_residual(t, z, zd)]
        for k, dev in enumerate(self.devices):
            parts.append(dev.residual(self.device_state(z, k), self.device_state(zd, k), self.contact_potentials(e, k)))
        return np.concatenate(parts)

    def jacobian(self, t, z, zd, alpha):
        """Sparse ``d res/dz + alpha d res/dzd``."""
        nd = len(self.devices)
        nn = self.netlist.node_count
        ns = self.A_S.shape[1]
        net = self._net_static + alpha * self._net_mass
        s_off = self.n_net - ns
        blocks = [[None] * (nd + 1) for _ in range(nd + 1)]
        blocks[0][0] = net
        for k, dev in enumerate(self.devices):
            y = self.device_state(z, k)
            blocks[k + 1][k + 1] = sp.csr_matrix(dev.jacobian(y, alpha))
            row = -(dev.coupling + alpha * dev.coupling_dot)
            top = np.zeros((self.n_net, dev.size))
            top[s_off + k] = row
            blocks[0][k + 1] = sp.csr_matrix(top)
            left = np.zeros((dev.size, self.n_net))
            left[:, :nn] = -np.outer(dev.db_dv[:, 0], self.A_S[:, k])
            blocks[k + 1][0] = sp.csr_matrix(left)
        return sp.bmat(blocks, format="csc")

    def row_scale(self):
        return np.concatenate([np.ones(self.n_net)] + [dev.row_scale for dev in self.devices])

    def scaled_residual_norm(self, t, z, zd):
        return float(np.max(np.abs(self.residual(t, z, zd) * self.row_scale())))

    def atol(self, tolerances):
        """Absolute tolerance vector from a per-partition dict."""
        out = np.empty(self.size)
        lay = self.layout
        out[lay["e"]] = tolerances["potential"]
        for name in ("j_V", "j_L", "j_S"):
            out[lay[name]] = tolerances["current"]
        for k, dev in enumerate(self.devices):
            out[lay[self.s_branches[k].name]] = dev.atol(tolerances)
        return out

    def error_norm(self, dz, z, rtol, atol):
        w = rtol * np.abs(z) + atol
        return float(np.sqrt(np.mean((dz / w) ** 2)))


class FullDevice(DeviceBlock):
    """Full finite element device representation."""

    @property
    def mass(self):
        return self.E

    def atol(self, tolerances):
        out = np.empty(self.size)
        s = self.slices
        ut = self.dev.thermal_voltage
        out[s["psi"]] = tolerances["potential"] / ut
        out[s["g_psi"]] = tolerances["potential"] / ut
        out[s["n"]] = tolerances["concentration"]
        out[s["p"]] = tolerances["concentration"]
        # scaled flux densities: terminal currents are controlled through j_S
        out[s["J_n"]] = tolerances["concentration"]
        out[s["J_p"]] = tolerances["concentration"]
        return out


class FullModel(CoupledModel):
    """The unreduced coupled system (network + finite element devices)."""

    def __init__(self, netlist, num_elements=None):
        N = int(num_elements or netlist.mesh_elements)
        self.fem = assemble_operators(build_mesh(N))
        scaled = {name: scale_device(d) for name, d in netlist.devices.items()}
        devices = [FullDevice(scaled[b.device], self.fem) for b in netlist.of_kind("S")]
        super().__init__(netlist, devices)

    def initial_guess(self):
        """Network at rest, every device at zero-bias thermal equilibrium."""
        z = np.zeros(self.size)
        cache = {}
        for k, dev in enumerate(self.devices):
            key = id(dev.dev)
            if key not in cache:
                cache[key] = dev.solve_equilibrium()
            z[self.layout[self.s_branches[k].name]] = cache[key]
        return z

    def device_trajectory(self, states, k):
        """Split a (times x size) state array into per-variable arrays of device ``k``."""
        sl = self.layout[self.s_branches[k].name]
        block = states[:, sl]
        return {v: block[:, s] for v, s in self.devices[k].slices.items()}

    def partition_names(self):
        names = ["e", "j_V", "j_L", "j_S"]
        for b in self.s_branches:
            names += [f"{b.name}.{v}" for v in VARIABLES]
        return names
