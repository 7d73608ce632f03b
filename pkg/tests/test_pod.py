"""POD bases, information gap, merging and the reduced device."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddmor.errors import ConfigError, InvalidMassError, UndefinedGapError
from ddmor.mesh import assemble_operators, build_mesh
from ddmor.network import FullDevice
from ddmor.pod import (
    PodBasis,
    ReducedModel,
    SnapshotStore,
    compute_pod,
    information_gap,
    merge_bases,
    numerical_rank,
    read_basis,
    select_dimension,
    write_basis,
)
from ddmor.semiconductor import SPACE, VARIABLES, PhysicalDevice, scale_device

FEM = assemble_operators(build_mesh(8))


def test_gap_examples():
    assert information_gap([1, 1, 1, 1], 2) == pytest.approx(1 / math.sqrt(2))
    assert information_gap([4, 3], 1) == pytest.approx(0.6)
    assert information_gap([4, 3], 2) == 0.0
    assert information_gap([4, 3], 0) == 1.0


def test_gap_rejects_bad_input():
    with pytest.raises(UndefinedGapError):
        information_gap([0.0, 0.0], 1)
    with pytest.raises(ValueError):
        information_gap([1.0, 2.0], 1)
    with pytest.raises(ValueError):
        information_gap([2.0, 1.0], 3)


@given(arrays(float, st.integers(1, 12), elements=st.floats(1e-3, 1e3)))
def test_gap_is_monotone_and_selection_minimal(raw):
    sigma = np.sort(raw)[::-1]
    gaps = [information_gap(sigma, s) for s in range(sigma.size + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(gaps, gaps[1:]))
    for target in (0.5, 0.1, 1e-3):
        s = select_dimension(sigma, target)
        assert gaps[s] <= target
        assert s == 1 or gaps[s - 1] > target


def test_rank_cutoff():
    assert numerical_rank([1.0, 1e-12, 1e-14]) == 2
    assert select_dimension([1.0, 1e-12, 1e-14], 0.0) == 2


def _random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


@given(st.integers(0, 2**31 - 1))
def test_basis_is_mass_orthonormal_and_gap_is_projection_error(seed):
    rng = np.random.default_rng(seed)
    n, l = 9, 6
    M = _random_spd(rng, n)
    Y = rng.standard_normal((n, l)) * np.logspace(0, -3, l)
    b = compute_pod(Y, M, 0.05)
    np.testing.assert_allclose(b.U.T @ M @ b.U, np.eye(b.s), atol=1e-10)
    # M-orthogonal projection error of the snapshot set equals the singular value tail
    P = b.U @ (b.U.T @ M @ Y)
    err = np.einsum("ij,ij->", Y - P, M @ (Y - P))
    tot = np.einsum("ij,ij->", Y, M @ Y)
    assert math.sqrt(err / tot) == pytest.approx(b.gap, rel=1e-6, abs=1e-12)
    assert b.gap <= 0.05


def test_single_and_duplicated_snapshot():
    rng = np.random.default_rng(3)
    M = FEM.mass_L
    y = rng.standard_normal(M.shape[0])
    b1 = compute_pod(y, M, 1e-8)
    b2 = compute_pod(np.column_stack([y, y]), M, 1e-8)
    assert b1.s == b2.s == 1
    norm = math.sqrt(y @ (M @ y))
    np.testing.assert_allclose(np.abs(b1.U[:, 0]), np.abs(y) / norm, rtol=1e-12)
    assert b2.singular_values[0] == pytest.approx(math.sqrt(2) * norm)


def test_mass_errors():
    with pytest.raises(ConfigError):
        compute_pod(np.ones((3, 2)), np.eye(4), 0.1)
    with pytest.raises(InvalidMassError):
        compute_pod(np.ones((2, 2)), -np.eye(2), 0.1)


def _snapshots(rng, l):
    return {("S1", v): rng.standard_normal((FEM.mass_L.shape[0] if SPACE[v] == "L" else FEM.mass_H.shape[0], l))
            for v in VARIABLES}


@pytest.mark.parametrize("strategy", ["resvd-all", "pod-of-bases"])
def test_merge_same_snapshots_twice_keeps_span(strategy):
    from ddmor.sampling import subspace_distance

    rng = np.random.default_rng(5)
    snaps = _snapshots(rng, 3)
    store = SnapshotStore()
    first = merge_bases(store, snaps, FEM, 1e-10, strategy)
    second = merge_bases(store, snaps, FEM, 1e-10, strategy)
    for k in snaps:
        assert second[k].s == first[k].s == 3
        assert subspace_distance(first[k], second[k]) <= 1e-6
    assert len(store) == 2


@pytest.mark.parametrize("strategy", ["resvd-all", "pod-of-bases"])
def test_merge_orthogonal_snapshots_gives_union(strategy):
    n = FEM.mass_L.shape[0]
    store = SnapshotStore()
    Y1 = np.zeros((n, 1)); Y1[0] = 1.0
    Y2 = np.zeros((n, 1)); Y2[n - 1] = 1.0
    merge_bases(store, {("S1", "psi"): Y1}, FEM, 0.0, strategy)
    b = merge_bases(store, {("S1", "psi"): Y2}, FEM, 0.0, strategy)[("S1", "psi")]
    assert b.s == 2
    np.testing.assert_allclose(b.U.T @ FEM.mass_L @ b.U, np.eye(2), atol=1e-12)
    # span check: both snapshots are reproduced by the M-orthogonal projection
    for Y in (Y1, Y2):
        P = b.U @ (b.U.T @ (FEM.mass_L @ Y))
        np.testing.assert_allclose(P, Y, atol=1e-12)


def test_merge_rejects_unknown_strategy():
    with pytest.raises(ConfigError):
        merge_bases(SnapshotStore(), _snapshots(np.random.default_rng(0), 2), FEM, 0.1, "magic")


@given(st.integers(0, 2**31 - 1))
def test_basis_file_round_trip_is_bit_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((5, 3)) * 10.0 ** rng.integers(-300, 300, (5, 3))
    b = PodBasis("J_n", U, np.sort(rng.random(4))[::-1], 3, "H")
    path = tmp_path_factory.mktemp("basis") / "b.csv"
    write_basis(path, b, "S7")
    back, device = read_basis(path)
    assert device == "S7"
    assert back.tag == "J_n" and back.mass_tag == "H" and back.s == 3
    assert np.array_equal(back.U, U)
    assert np.array_equal(back.singular_values, b.singular_values)


def test_read_basis_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_basis(p)


def _full_rank_bases(full, rng):
    out = {}
    for v in VARIABLES:
        n = full.slices[v].stop - full.slices[v].start
        M = FEM.mass_L if SPACE[v] == "L" else FEM.mass_H
        out[v] = compute_pod(rng.standard_normal((n, n + 2)), M, 0.0, v, SPACE[v])
    return out


def test_full_rank_reduced_device_reproduces_full_residual():
    full = FullDevice(scale_device(PhysicalDevice()), FEM)
    rng = np.random.default_rng(2)
    bases = _full_rank_bases(full, rng)
    red = ReducedModel(full, bases)
    assert red.size == full.size
    y = full.solve_boltzmann_poisson()
    g = red.project(y)
    np.testing.assert_allclose(red.lift(g), y, rtol=1e-9, atol=1e-9 * np.abs(y).max())
    yd = rng.standard_normal(full.size)
    v = (0.3, 0.0)
    r_red = red.residual(g, red.project(yd), v)
    r_full = full.residual(y, yd, v)
    np.testing.assert_allclose(r_red, red.UT @ r_full, rtol=1e-7, atol=1e-7 * np.abs(r_full).max())


def test_reduced_device_checks_bases():
    full = FullDevice(scale_device(PhysicalDevice()), FEM)
    bases = _full_rank_bases(full, np.random.default_rng(0))
    wrong = dict(bases, psi=PodBasis("psi", bases["psi"].U, bases["psi"].singular_values, bases["psi"].s, "H"))
    with pytest.raises(ConfigError):
        ReducedModel(full, wrong)
    with pytest.raises(ConfigError):
        ReducedModel(full, {k: b for k, b in bases.items() if k != "p"})


def test_reduced_jacobian_matches_differences():
    full = FullDevice(scale_device(PhysicalDevice()), FEM)
    rng = np.random.default_rng(4)
    red = ReducedModel(full, _full_rank_bases(full, rng), clip=False)
    y = rng.standard_normal(full.size)
    for v in ("n", "p"):
        y[full.slices[v]] = rng.uniform(0.5, 1.5, full.slices[v].stop - full.slices[v].start)
    g = red.project(y)
    J = red.jacobian(g, 0.0)
    zero = np.zeros(red.size)
    h = 1e-6
    for i in rng.choice(red.size, 8, replace=False):
        e = np.zeros(red.size); e[i] = h
        fd = (red.residual(g + e, zero, (0.0, 0.0)) - red.residual(g - e, zero, (0.0, 0.0))) / (2 * h)
        np.testing.assert_allclose(J[:, i], fd, rtol=1e-4, atol=1e-5 * np.abs(fd).max())
