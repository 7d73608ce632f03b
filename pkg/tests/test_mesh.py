"""Mixed FEM operators against quadrature oracles built from explicit basis functions."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.polynomial.legendre import leggauss

from ddmor.errors import InvalidMeshError
from ddmor.mesh import Mesh1D, assemble_operators, build_mesh


def hat(x, nodes, j):
    """Piecewise-linear nodal basis function j, evaluated pointwise."""
    e = np.zeros(nodes.size)
    e[j] = 1.0
    return np.interp(x, nodes, e)


def hat_slope(x, nodes, j):
    out = np.zeros_like(x)
    for k in range(nodes.size - 1):
        inside = (x > nodes[k]) & (x < nodes[k + 1])
        h = nodes[k + 1] - nodes[k]
        if j == k:
            out[inside] = -1.0 / h
        elif j == k + 1:
            out[inside] = 1.0 / h
    return out


def quad_points(nodes, order=6):
    xi, wi = leggauss(order)
    xs, ws = [], []
    for a, b in zip(nodes[:-1], nodes[1:]):
        xs.append(0.5 * (b - a) * xi + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * wi)
    return np.concatenate(xs), np.concatenate(ws)


def oracle_operators(nodes):
    N, M = nodes.size - 1, nodes.size
    x, w = quad_points(nodes)
    ind = np.array([((x >= nodes[k]) & (x < nodes[k + 1])).astype(float) for k in range(N)])
    H = np.array([hat(x, nodes, j) for j in range(M)])
    dH = np.array([hat_slope(x, nodes, j) for j in range(M)])
    ML = (ind * w) @ ind.T
    MH = (H * w) @ H.T
    D = (ind * w) @ dH.T
    return ML, MH, D


def random_nodes(n_interior, seed):
    rng = np.random.default_rng(seed)
    inner = np.sort(rng.uniform(0.02, 0.98, n_interior))
    inner = inner[np.concatenate([[True], np.diff(inner) > 1e-3])]
    return np.concatenate([[0.0], inner, [1.0]])


@pytest.mark.parametrize("N", [2, 4, 8])
def test_uniform_operators_match_quadrature(N):
    fem = assemble_operators(build_mesh(N))
    ML, MH, D = oracle_operators(fem.mesh.nodes)
    np.testing.assert_allclose(fem.mass_L.toarray(), ML, atol=1e-14)
    np.testing.assert_allclose(fem.mass_H.toarray(), MH, atol=1e-14)
    np.testing.assert_allclose(fem.div_D.toarray(), D, atol=1e-13)


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_nonuniform_operators_match_quadrature(n_interior, seed):
    nodes = random_nodes(n_interior, seed)
    fem = assemble_operators(Mesh1D(nodes))
    ML, MH, D = oracle_operators(nodes)
    np.testing.assert_allclose(fem.mass_L.toarray(), ML, atol=1e-13)
    np.testing.assert_allclose(fem.mass_H.toarray(), MH, atol=1e-13)
    np.testing.assert_allclose(fem.div_D.toarray(), D, atol=1e-11)


@given(st.integers(2, 64))
def test_divergence_entries_are_unit_signs(N):
    D = assemble_operators(build_mesh(N)).div_D.toarray()
    assert set(np.unique(D)) <= {-1.0, 0.0, 1.0}
    assert np.all(np.count_nonzero(D, axis=1) == 2)


@given(st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_discrete_divergence_theorem(N, seed):
    fem = assemble_operators(build_mesh(N))
    v = np.random.default_rng(seed).standard_normal(fem.M)
    # integral of div v over (0, 1) equals the outward boundary flux
    total = np.ones(fem.N) @ (fem.div_D @ v)
    flux = sum(fem.contact_trace(c) @ v for c in range(2))
    assert abs(total - flux) <= 1e-12 * max(1.0, np.abs(v).max())


@pytest.mark.parametrize("N", [2, 4, 8])
def test_trace_functional(N):
    fem = assemble_operators(build_mesh(N))
    v = np.arange(1.0, fem.M + 1.0)
    assert fem.contact_trace(0) @ v == pytest.approx(-v[0])
    assert fem.contact_trace(1) @ v == pytest.approx(v[-1])


def test_mass_matrices_are_spd():
    fem = assemble_operators(build_mesh(16))
    for Mx in (fem.mass_L, fem.mass_H, fem.hdiv_gram()):
        A = Mx.toarray()
        np.testing.assert_allclose(A, A.T)
        assert np.linalg.eigvalsh(A).min() > 0


def test_hdiv_gram_is_l2_plus_divergence():
    nodes = random_nodes(7, 3)
    fem = assemble_operators(Mesh1D(nodes))
    ML, MH, D = oracle_operators(nodes)
    oracle = MH + D.T @ np.linalg.inv(ML) @ D
    np.testing.assert_allclose(fem.hdiv_gram().toarray(), oracle, atol=1e-10)


def test_mesh_examples():
    np.testing.assert_allclose(build_mesh(2).nodes, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(build_mesh(4).lengths, 0.25)
    m = build_mesh(100)
    assert m.num_nodes == 101
    assert m.contact_normals == (-1.0, 1.0)


@pytest.mark.parametrize("bad", [0, 1, 2.5, -4])
def test_invalid_element_counts(bad):
    with pytest.raises(InvalidMeshError):
        build_mesh(bad)


@pytest.mark.parametrize("nodes", [[0.0, 1.0], [0.0, 0.6, 0.4, 1.0], [0.1, 0.5, 1.0], [0.0, 0.5, 0.9]])
def test_invalid_node_lists(nodes):
    with pytest.raises(InvalidMeshError):
        Mesh1D(np.array(nodes))
