import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigkoop.boundary import (BoundaryMatrix, OutputPartition, Regularizer, build_L,
                              difference_operator, observable_values, optimal_boundary)
from eigkoop.dynamics import TrajectoryDataset
from eigkoop.errors import DimensionError
from eigkoop.numerics import pinv_solve
from eigkoop.spectrum import LambdaObjective, objective_value, vandermonde

A, TS = -0.4, 0.1


def _linear_dataset(x0, Ms=30):
    x0 = np.asarray(x0, float)
    states = x0[:, None] * np.exp(A * TS * np.arange(Ms + 1))[None, :]
    return TrajectoryDataset(states[..., None], TS)


def _random_dataset(rng, Mt=4, Ms=15, n=2):
    return TrajectoryDataset(rng.standard_normal((Mt, Ms + 1, n)), TS)


def test_partition_validation():
    p = OutputPartition.even(20, 2)
    assert p.Ni == (10, 10) and p.N == 20 and p.n_h == 2
    assert [s.start for s in p.slices()] == [0, 10]
    with pytest.raises(ValueError):
        OutputPartition((3, 0))
    with pytest.raises(ValueError):
        OutputPartition.even(5, 2)


def test_build_L_zero_eigenvalue():
    L = build_L([0.0], Mt=2, Ms=2, Ts=0.1).dense()
    expected = np.zeros((6, 2))
    expected[:3, 0] = 1
    expected[3:, 1] = 1
    np.testing.assert_allclose(L, expected)


def test_build_L_geometric_column():
    L = build_L([math.log(2.0)], Mt=1, Ms=3, Ts=1.0).dense()
    np.testing.assert_allclose(L[:, 0], [1, 2, 4, 8])


@given(st.integers(0, 10_000))
def test_build_L_dense_matches_implicit(seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(-1, 0.5, 3) + 1j * rng.uniform(-2, 2, 3)
    op = build_L(lam, Mt=3, Ms=5, Ts=0.2)
    eye = np.eye(op.shape[1])
    implicit = np.column_stack([op.matvec(eye[:, k]) for k in range(op.shape[1])])
    np.testing.assert_allclose(op.dense(), implicit, atol=1e-14)
    h = rng.standard_normal(op.shape[0])
    np.testing.assert_allclose(op.lstsq(h), pinv_solve(op.dense(), h), atol=1e-9)


def test_scalar_linear_boundary_is_initial_condition():
    x0 = [0.5, -1.0, 2.0]
    ds = _linear_dataset(x0)
    bm = optimal_boundary(ds, lambda x: x, OutputPartition((1,)), [[A]])
    np.testing.assert_allclose(bm.G[0], x0, atol=1e-12)
    assert bm.residuals[0] < 1e-24


def test_zero_target_gives_zero_boundary():
    ds = _random_dataset(np.random.default_rng(0))
    bm = optimal_boundary(ds, lambda x: np.zeros((len(x), 2)), OutputPartition((2, 1)),
                          [[-1, -2], [0.5j]])
    np.testing.assert_array_equal(bm.G, 0)


def test_budget_mismatch_rejected():
    ds = _random_dataset(np.random.default_rng(0))
    with pytest.raises(DimensionError):
        optimal_boundary(ds, lambda x: x, OutputPartition((2, 2)), [[-1, -2], [0.5]])
    with pytest.raises(DimensionError):
        optimal_boundary(ds, lambda x: x[:, :1], OutputPartition((1, 1)), [[-1], [0.5]])


@given(st.integers(0, 10_000))
def test_residual_identity(seed):
    rng = np.random.default_rng(seed)
    ds = _random_dataset(rng)
    lam = rng.uniform(-1, 0.3, 3) + 1j * rng.uniform(-2, 2, 3)
    bm = optimal_boundary(ds, lambda x: x[:, :1], OutputPartition((3,)), [lam])
    obj = LambdaObjective.from_dataset(ds, ds.states[:, :, 0], 3)
    ref = objective_value(obj, lam)
    assert abs(bm.residuals[0] - ref) <= 1e-8 * ref


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_target(seed, a, b):
    rng = np.random.default_rng(seed)
    ds = _random_dataset(rng)
    lam = [[-0.5, 0.2 + 1j]]
    part = OutputPartition((2,))
    h1 = rng.standard_normal((ds.Mt, ds.Ms + 1))
    h2 = rng.standard_normal((ds.Mt, ds.Ms + 1))
    G1 = optimal_boundary(ds, h1, part, lam).G
    G2 = optimal_boundary(ds, h2, part, lam).G
    G = optimal_boundary(ds, a * h1 + b * h2, part, lam).G
    np.testing.assert_allclose(G, a * G1 + b * G2, atol=1e-9)


def test_trajectory_decoupling():
    rng = np.random.default_rng(3)
    ds = _random_dataset(rng, Mt=5)
    lam = np.array([-0.3, 0.1 + 2j, 0.1 - 2j])
    G = optimal_boundary(ds, lambda x: x[:, 1:], OutputPartition((3,)), [lam]).G
    V = vandermonde(lam, ds.Ms, ds.Ts)
    for j in range(ds.Mt):
        np.testing.assert_allclose(G[:, j], pinv_solve(V, ds.states[j, :, 1]), atol=1e-9)


def test_regularizer_smooths_and_reduces_to_plain_at_zero():
    rng = np.random.default_rng(4)
    ds = _random_dataset(rng)
    lam = [[-0.5, 1.0]]
    part = OutputPartition((2,))
    plain = optimal_boundary(ds, lambda x: x[:, :1], part, lam)
    zero = optimal_boundary(ds, lambda x: x[:, :1], part, lam, Regularizer(0.0))
    np.testing.assert_array_equal(plain.G, zero.G)
    reg = optimal_boundary(ds, lambda x: x[:, :1], part, lam, Regularizer(10.0))
    D, V = difference_operator(ds.Ms, ds.Ts), vandermonde(np.array(lam[0]), ds.Ms, ds.Ts)
    rough = lambda G: np.linalg.norm(D @ V @ G)
    assert rough(reg.G) < rough(plain.G)
    assert reg.residuals[0] >= plain.residuals[0]


def test_difference_operator():
    D = difference_operator(3, 0.5)
    np.testing.assert_allclose(D @ np.array([0, 1, 3, 6.0]), [2, 4, 6])


def test_observable_values_accepts_arrays():
    ds = _random_dataset(np.random.default_rng(0), Mt=2, Ms=3)
    flat = ds.samples()
    np.testing.assert_array_equal(observable_values(ds, flat), ds.states)
    with pytest.raises(DimensionError):
        observable_values(ds, np.zeros((3, 3)))


def test_boundary_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    G = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    bm = BoundaryMatrix(G, OutputPartition((2,)), [-1 + 0.5j, 1e-20])
    bm.to_csv(tmp_path / "G.csv")
    lam, G2 = BoundaryMatrix.read_csv(tmp_path / "G.csv")
    np.testing.assert_array_equal(G2, G)
    np.testing.assert_array_equal(lam, bm.eigenvalues)
