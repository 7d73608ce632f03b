"""1D meshes and lowest-order mixed finite element operators.

In one space dimension the degree-0 Raviart-Thomas space reduces to
continuous piecewise linears (nodal hat functions) and the potential /
concentration space is spanned by element indicators.  Both endpoints are
Ohmic contacts, so the flux space has ``M = N + 1`` degrees of freedom.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidMeshError

__all__ = ["Mesh1D", "FemOperators", "build_mesh", "assemble_operators"]


@dataclass(frozen=True)
class Mesh1D:
    """Nodes on the scaled domain [0, 1] with contact nodes and outward normals."""

    nodes: np.ndarray
    contact_nodes: tuple = (0, -1)
    contact_normals: tuple = (-1.0, 1.0)

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise InvalidMeshError("mesh needs at least two elements")
        if not np.all(np.diff(x) > 0):
            raise InvalidMeshError("nodes must be strictly increasing")
        if x[0] != 0.0 or abs(x[-1] - 1.0) > 1e-12:
            raise InvalidMeshError("nodes must span [0, 1]")
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)
        # normalise negative indices so callers can use them directly
        cn = tuple(int(i) % x.size for i in self.contact_nodes)
        object.__setattr__(self, "contact_nodes", cn)

    @property
    def num_elements(self):
        return self.nodes.size - 1

    @property
    def num_nodes(self):
        return self.nodes.size

    @property
    def lengths(self):
        return np.diff(self.nodes)

    @property
    def midpoints(self):
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    @property
    def elements(self):
        i = np.arange(self.num_elements)
        return np.column_stack([i, i + 1])


def build_mesh(num_elements):
    """Uniform mesh of ``num_elements`` elements on [0, 1]."""
    if int(num_elements) != num_elements or num_elements < 2:
        raise InvalidMeshError(f"num_elements must be an integer >= 2, got {num_elements!r}")
    return Mesh1D(np.linspace(0.0, 1.0, int(num_elements) + 1))


@dataclass(frozen=True)
class FemOperators:
    """Assembled operators of the mixed discretisation.

    ``mass_L`` (N x N) is the element-indicator mass matrix, ``mass_H``
    (M x M) the hat-function mass matrix and ``div_D`` (N x M) holds
    ``int div(phi_j) varphi_k``.  ``trace`` is a (contacts x M) matrix whose
    row c realises ``v -> v * phi(x_c) * nu_c``.
    """

    mesh: Mesh1D
    mass_L: sp.csr_matrix
    mass_H: sp.csr_matrix
    div_D: sp.csr_matrix
    trace: sp.csr_matrix

    @property
    def N(self):
        return self.mesh.num_elements

    @property
    def M(self):
        return self.mesh.num_nodes

    @property
    def h(self):
        return self.mesh.lengths

    def hdiv_gram(self):
        """Gram matrix of the discrete H(div) inner product ``<y,y> + <div y, div y>``."""
        D = self.div_D
        return (self.mass_H + D.T @ sp.diags(1.0 / self.h) @ D).tocsc()

    def contact_trace(self, contact):
        """Dense trace row for one contact."""
        return self.trace.getrow(contact).toarray().ravel()


def assemble_operators(mesh):
    N = mesh.num_elements
    M = mesh.num_nodes
    h = mesh.lengths
    k = np.arange(N)

    mass_L = sp.diags(h).tocsr()

    diag = np.zeros(M)
    diag[:-1] += h / 3.0
    diag[1:] += h / 3.0
    off = h / 6.0
    mass_H = sp.diags([off, diag, off], [-1, 0, 1]).tocsr()

    rows = np.concatenate([k, k])
    cols = np.concatenate([k, k + 1])
    vals = np.concatenate([-np.ones(N), np.ones(N)])
    div_D = sp.csr_matrix((vals, (rows, cols)), shape=(N, M))

    nc = len(mesh.contact_nodes)
    trace = sp.csr_matrix(
        (np.asarray(mesh.contact_normals, dtype=float), (np.arange(nc), list(mesh.contact_nodes))),
        shape=(nc, M),
    )
    return FemOperators(mesh, mass_L, mass_H, div_D, trace)
