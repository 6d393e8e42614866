import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigkoop.dynamics import VANDERPOL, TrajectoryDataset, UniformCircle, generate_dataset
from eigkoop.errors import IllConditioned
from eigkoop.numerics import pinv_solve
from eigkoop.spectrum import (conjugate_closed_prefix, EigenvalueSet, LambdaObjective, OptimizeOptions, dmd_eigenvalues,
                              is_conjugate_closed, lattice, lattice_degree_for,
                              objective_gradient, objective_per_trajectory, objective_value,
                              optimize_eigenvalues, vandermonde)

A = -0.7
TS = 0.05


def _scalar_objective(Mt=4, Ms=40):
    x0 = np.linspace(-1, 1, Mt) + 0.1
    H = np.exp(A * TS * np.arange(Ms + 1))[:, None] * x0[None, :]
    return LambdaObjective(H, TS, 1)


def _random_objective(rng, Mt=3, Ms=10, Ni=2):
    H = rng.standard_normal((Ms + 1, Mt)) + 1j * rng.standard_normal((Ms + 1, Mt))
    lam = rng.uniform(-1, 0.5, Ni) + 1j * rng.uniform(-3, 3, Ni)
    return LambdaObjective(H, 0.1, Ni), lam


def _fd_gradient(obj, lam, step=1e-6):
    g = np.empty(2 * len(lam))
    for j in range(len(lam)):
        for part, d in ((0, 1.0), (1, 1j)):
            lp, lm = lam.copy(), lam.copy()
            lp[j] += step * d
            lm[j] -= step * d
            g[2 * j + part] = (objective_value(obj, lp) - objective_value(obj, lm)) / (2 * step)
    return g


# --- DMD -------------------------------------------------------------------------------

def test_dmd_scalar_decay():
    states = (0.9 ** np.arange(20))[None, :, None] * np.array([1.0, -2.0])[:, None, None]
    lam = dmd_eigenvalues(TrajectoryDataset(states, 1.0)).values
    np.testing.assert_allclose(lam, [math.log(0.9)], atol=1e-12)


def test_dmd_rotation():
    th = 0.3
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    traj = [np.array([1.0, 0.2])]
    for _ in range(15):
        traj.append(R @ traj[-1])
    lam = dmd_eigenvalues(TrajectoryDataset(np.array(traj)[None], 1.0)).values
    np.testing.assert_allclose(sorted(lam.imag), [-th, th], atol=1e-8)
    np.testing.assert_allclose(lam.real, 0, atol=1e-8)


def test_dmd_constant_data():
    states = np.tile(np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 1.0]])[:, None, :], (1, 5, 1))
    lam = dmd_eigenvalues(TrajectoryDataset(states, 0.1)).values
    np.testing.assert_allclose(lam, 0, atol=1e-10)


# --- lattice ---------------------------------------------------------------------------

def test_lattice_two_generators_degree_two():
    a, b = -1.0 + 2j, -0.3
    vals = lattice([a, b], 2).values
    expected = [0, a, b, 2 * a, a + b, 2 * b]
    assert len(vals) == 6
    np.testing.assert_allclose(vals, expected)


def test_lattice_degree_zero():
    np.testing.assert_array_equal(lattice([1.0, 2.0], 0).values, [0])


def test_lattice_conjugate_pair_dedup():
    vals = lattice([1 + 1j, 1 - 1j], 2).values
    assert np.sum(np.abs(vals - 2) < 1e-12) == 1
    assert len(vals) == 6


def test_lattice_dedups_repeated_sums():
    # 2a = b makes (0,1) and (2,0) coincide.
    vals = lattice([1.0, 2.0], 2).values
    np.testing.assert_allclose(vals, [0, 1, 2, 3, 4])


@given(st.integers(1, 3), st.integers(0, 4))
def test_lattice_count_formula(p, d):
    rng = np.random.default_rng(p * 10 + d)
    base = rng.standard_normal(p) + 1j * rng.standard_normal(p)
    assert len(lattice(base, d)) == math.comb(p + d, d)


def test_lattice_conjugate_closed_for_closed_base():
    assert lattice([-0.2 + 1j, -0.2 - 1j], 4).closed_under_conjugation
    assert not is_conjugate_closed([1 + 1j])
    assert EigenvalueSet([1 + 1j, 1 - 1j, 3]).closed_under_conjugation


def test_lattice_degree_for():
    assert lattice_degree_for(6, 2) == 2
    assert lattice_degree_for(7, 2) == 3
    assert lattice_degree_for(1, 2) == 0


# --- objective ---------------------------------------------------------------------------

def test_objective_zero_at_true_eigenvalue():
    assert objective_value(_scalar_objective(), [A]) < 1e-20


def test_objective_zero_target():
    obj = LambdaObjective(np.zeros((11, 3)), 0.1, 2)
    assert objective_value(obj, [0.1, -2 + 1j]) == 0.0
    np.testing.assert_array_equal(objective_gradient(obj, [0.1, -2 + 1j]), 0.0)


def test_objective_with_fast_eigenvalue_matches_least_squares():
    rng = np.random.default_rng(0)
    obj, _ = _random_objective(rng, Ni=1)
    lam = np.array([60.0])
    V = vandermonde(lam, obj.Ms, obj.Ts)
    r = obj.H - V @ pinv_solve(V, obj.H)
    ref = np.vdot(r, r).real
    assert abs(objective_value(obj, lam) - ref) <= 1e-8 * ref
    assert ref < np.vdot(obj.H, obj.H).real


@given(st.integers(0, 10_000))
def test_objective_equals_explicit_residual(seed):
    rng = np.random.default_rng(seed)
    obj, lam = _random_objective(rng, Mt=4, Ms=12, Ni=3)
    V = vandermonde(lam, obj.Ms, obj.Ts)
    r = obj.H - V @ pinv_solve(V, obj.H)
    ref = np.vdot(r, r).real
    for method in ("auto", "svd"):
        assert abs(objective_value(obj, lam, method) - ref) <= 1e-8 * max(ref, 1e-12)


@given(st.integers(0, 10_000))
def test_objective_decomposes_by_trajectory(seed):
    rng = np.random.default_rng(seed)
    obj, lam = _random_objective(rng, Mt=5)
    total = objective_value(obj, lam)
    assert abs(objective_per_trajectory(obj, lam).sum() - total) <= 1e-9 * total


def test_gram_path_rejects_coincident_eigenvalues():
    obj, _ = _random_objective(np.random.default_rng(1))
    with pytest.raises(IllConditioned):
        objective_value(obj, [0.3, 0.3], method="gram")


def test_gradient_matches_finite_differences_on_many_instances():
    rng = np.random.default_rng(42)
    for _ in range(25):
        obj, lam = _random_objective(rng)
        g = objective_gradient(obj, lam)
        fd = _fd_gradient(obj, lam)
        assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_gradient_vanishes_at_global_minimum():
    obj = _scalar_objective()
    g = objective_gradient(obj, np.array([A + 0j]))
    assert np.max(np.abs(g)) < 1e-7
    assert np.max(np.abs(_fd_gradient(obj, np.array([A + 0j])))) < 1e-7


# --- optimisation ----------------------------------------------------------------------------

def test_optimizer_recovers_scalar_eigenvalue():
    obj = _scalar_objective()
    lam = optimize_eigenvalues(obj, [A + 0.3], OptimizeOptions(restarts=0))
    assert abs(lam[0] - A) < 1e-4
    assert objective_value(obj, lam) < 1e-10


def test_optimizer_keeps_stationary_init():
    obj = _scalar_objective()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lam = optimize_eigenvalues(obj, [A], OptimizeOptions(restarts=0))
    assert abs(lam[0] - A) < 1e-9


@pytest.fixture(scope="module")
def vdp_data():
    return generate_dataset(VANDERPOL, UniformCircle(0.05), 20, 2.0, 0.01, seed=1)


def test_optimizer_improves_on_vanderpol_lattice(vdp_data):
    base = dmd_eigenvalues(vdp_data)
    init = lattice(base, lattice_degree_for(10, len(base))).values[:10]
    obj = LambdaObjective.from_dataset(vdp_data, vdp_data.states[:, :, 0], 10)
    lam = optimize_eigenvalues(obj, init, OptimizeOptions(restarts=1, max_iter=40))
    assert objective_value(obj, lam) < objective_value(obj, init)


@given(st.integers(0, 1000))
def test_optimizer_never_worse_than_init(seed):
    rng = np.random.default_rng(seed)
    obj, lam = _random_objective(rng, Ms=8)
    out = optimize_eigenvalues(obj, lam, OptimizeOptions(restarts=1, max_iter=10,
                                                         conjugate_symmetric=False))
    assert objective_value(obj, out) <= objective_value(obj, lam) * (1 + 1e-12)


def test_conjugate_closed_prefix_keeps_pairs_together():
    vals = np.array([0.9, 0.5 + 0.2j, 0.5 - 0.2j, 0.3, 0.1])
    out = conjugate_closed_prefix(vals, 2)
    # the pair does not fit after the first real member, which makes room
    np.testing.assert_allclose(np.sort_complex(out), np.sort_complex(vals[1:3]))
    out = conjugate_closed_prefix(vals, 4)
    np.testing.assert_allclose(out, vals[:4])


def test_conjugate_closed_prefix_insufficient_returns_none():
    assert conjugate_closed_prefix(np.array([0.5 + 0.2j, 0.5 - 0.2j]), 1) is None
    assert conjugate_closed_prefix(np.array([0.9]), 2) is None


@given(st.integers(1, 30))
def test_seeded_lattice_prefix_is_conjugate_closed(count):
    base = np.array([0.95 * np.exp(0.3j), 0.95 * np.exp(-0.3j), 0.8])
    d = lattice_degree_for(count, len(base))
    out = None
    while out is None:
        out = conjugate_closed_prefix(lattice(base, d), count)
        d += 1
    assert len(out) == count
    for v in out:
        assert np.min(np.abs(out - np.conj(v))) < 1e-9
