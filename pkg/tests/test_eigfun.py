import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigkoop.boundary import OutputPartition, optimal_boundary
from eigkoop.dynamics import TrajectoryDataset
from eigkoop.eigfun import (EigenfunctionSet, ExtensionModel, farthest_point_subsample,
                            fit_extension, product_eigenfunction, propagate_generalized,
                            propagate_values)
from eigkoop.errors import BranchCutError, DimensionError, ExponentialOverflow, UnsupportedOperation
from eigkoop.numerics import JordanBlock, jordan_exp

TS = 0.1


def _ulp_ratio_error(vals, mu):
    """Largest deviation of consecutive samples from the ratio ``mu``, in ulps."""
    err = np.abs(vals[..., 1:] - mu * vals[..., :-1])
    return np.max(err / np.maximum(np.spacing(np.abs(vals[..., 1:])), np.finfo(float).tiny))


def test_constant_eigenfunction():
    vals = propagate_values(np.ones((1, 3)), [0.0], TS, 5)
    np.testing.assert_array_equal(vals, 1.0)


def test_negative_real_eigenvalue_decreases():
    vals = propagate_values(np.ones((1, 2)), [-0.5], TS, 10).reshape(2, 11)
    assert np.all(np.diff(vals.real, axis=1) < 0)


@given(st.integers(0, 10_000))
def test_recursion_ratio_within_ulps(seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(-2, 1, 3) + 1j * rng.uniform(-5, 5, 3)
    G = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    vals = propagate_values(G, lam, 0.01, 60).reshape(3, 4, 61)
    assert _ulp_ratio_error(vals, np.exp(lam * 0.01)[:, None, None]) <= 10
    np.testing.assert_array_equal(vals[:, :, 0], G)


def test_overflow_guard_names_eigenvalue():
    with pytest.raises(ExponentialOverflow, match="lambda"):
        propagate_values(np.ones((1, 1)), [800.0], 1.0, 2)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        propagate_values(np.ones((2, 3)), [0.1], TS, 3)
    with pytest.raises(DimensionError):
        propagate_generalized(JordanBlock(0, 2), np.ones((3, 1)), TS, 3)


def test_generalized_size_one_matches_plain():
    G = np.array([[1.0 + 2j, -0.5]])
    np.testing.assert_array_equal(propagate_generalized(JordanBlock(-0.3 + 1j, 1), G, TS, 7),
                                  propagate_values(G, [-0.3 + 1j], TS, 7))


def test_generalized_nilpotent_closed_form():
    g1, g2 = 0.7, -1.3
    vals = propagate_generalized(JordanBlock(0, 2), [[g1], [g2]], TS, 6)
    k = np.arange(7)
    np.testing.assert_allclose(vals[0], g1 + k * TS * g2, atol=1e-14)
    np.testing.assert_allclose(vals[1], g2)


@given(st.integers(0, 10_000), st.integers(2, 4))
def test_generalized_one_step_property(seed, size):
    rng = np.random.default_rng(seed)
    J = JordanBlock(complex(rng.uniform(-1, 0.5), rng.uniform(-3, 3)), size)
    G = rng.standard_normal((size, 3)) + 1j * rng.standard_normal((size, 3))
    vals = propagate_generalized(J, G, TS, 20).reshape(size, 3, 21)
    E = jordan_exp(J, TS)
    for k in range(20):
        np.testing.assert_array_equal(vals[:, :, k + 1], E @ vals[:, :, k])


def _set_from_rows(lams, G, Ms=20):
    vals = propagate_values(G, lams, TS, Ms)
    return EigenfunctionSet(lams, vals, TS, G.shape[1], Ms)


def test_product_identity_power():
    s = _set_from_rows(np.array([-0.2 + 1j, 0.3]), np.array([[1.0, 2.0], [0.5, -1.0]]))
    row, lam = product_eigenfunction(s, [0], [1])
    np.testing.assert_array_equal(row, s.values[0])
    assert lam == s.eigenvalues[0]


def test_product_preserves_recursion():
    rng = np.random.default_rng(0)
    lams = np.array([-0.4 + 2j, 0.1 - 1j])
    s = _set_from_rows(lams, rng.standard_normal((2, 3)) + 1j)
    row, lam = product_eigenfunction(s, [0, 1], [1, 1])
    assert lam == lams.sum()
    vals = row.reshape(3, 21)
    rel = np.abs(vals[:, 1:] - np.exp(lam * TS) * vals[:, :-1]) / np.abs(vals[:, 1:])
    assert rel.max() < 1e-13


def test_square_of_linear_eigenfunction():
    a, Ms = -0.6, 15
    x0 = np.array([0.4, -1.1, 2.0])
    states = x0[:, None] * np.exp(a * TS * np.arange(Ms + 1))
    ds = TrajectoryDataset(states[..., None], TS)
    bm = optimal_boundary(ds, lambda x: x, OutputPartition((1,)), [[a]])
    s = EigenfunctionSet.from_boundary(ds, bm)
    row, lam = product_eigenfunction(s, [0], [2])
    assert lam == 2 * a
    np.testing.assert_allclose(row, (states ** 2).reshape(-1), rtol=1e-12)


def test_product_branch_cut_rejection():
    s = _set_from_rows(np.array([0.0]), np.array([[-1.0, 2.0]]))
    with pytest.raises(BranchCutError):
        product_eigenfunction(s, [0], [0.5])
    product_eigenfunction(s, [0], [2])  # integer powers are fine
    with pytest.raises(ValueError):
        product_eigenfunction(s, [0], [-1])


def _cloud(rng, count=400):
    return rng.uniform(-1, 1, (count, 2))


@pytest.mark.parametrize("kind", ["linear", "rbf", "nearest"])
def test_extension_reproduces_constant(kind):
    pts = _cloud(np.random.default_rng(1), 200)
    model = fit_extension(pts, np.full(200, 3.0 - 1j), kind)
    q = np.random.default_rng(2).uniform(-1.5, 1.5, (50, 2))
    np.testing.assert_allclose(model.evaluate(q)[:, 0], 3.0 - 1j, atol=1e-6)


@pytest.mark.parametrize("kind", ["linear", "rbf", "nearest"])
def test_extension_interpolates_data(kind):
    rng = np.random.default_rng(3)
    pts = _cloud(rng, 150)
    vals = np.sin(3 * pts[:, 0]) + 1j * pts[:, 1] ** 2
    model = fit_extension(pts, vals, kind)
    np.testing.assert_allclose(model.evaluate(pts)[:, 0], vals, atol=1e-8)


@pytest.mark.parametrize("kind", ["linear", "rbf"])
def test_extension_accuracy_on_smooth_field(kind):
    g = np.linspace(-1, 1, 25)
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    f = lambda p: np.sin(p[:, 0]) * p[:, 1]
    model = fit_extension(pts, f(pts), kind)
    mid = pts[(np.abs(pts) < 0.95).all(axis=1)] + (g[1] - g[0]) / 2
    err = np.abs(model.evaluate(mid)[:, 0] - f(mid))
    assert err.mean() < 0.05 * (f(pts).max() - f(pts).min())


def test_linear_extension_outside_hull_uses_nearest():
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1.0]])
    model = fit_extension(pts, np.array([1.0, 2, 3, 4]), "linear")
    np.testing.assert_allclose(model.evaluate([[5.0, 5.0]])[:, 0], 4.0)


def test_collinear_points_fall_back_to_rbf():
    pts = np.column_stack([np.linspace(0, 1, 10), np.linspace(0, 1, 10)])
    with pytest.warns(UserWarning):
        model = fit_extension(pts, np.ones(10), "linear")
    assert model.kind == "rbf"


def test_extension_argument_checks():
    pts = _cloud(np.random.default_rng(0), 20)
    with pytest.raises(UnsupportedOperation):
        fit_extension(pts, np.ones(20), delta1=0.1)
    with pytest.raises(UnsupportedOperation):
        fit_extension(np.zeros((20, 3)) + np.arange(20)[:, None], np.ones(20), "linear")
    with pytest.raises(DimensionError):
        fit_extension(pts, np.ones(19))


@pytest.mark.parametrize("kind", ["linear", "rbf", "nearest"])
def test_extension_json_round_trip(kind):
    rng = np.random.default_rng(4)
    pts = _cloud(rng, 60)
    vals = rng.standard_normal((60, 2)) + 1j * rng.standard_normal((60, 2))
    model = fit_extension(pts, vals, kind)
    back = ExtensionModel.from_dict(json.loads(json.dumps(model.to_dict())))
    q = rng.uniform(-1.2, 1.2, (30, 2))
    np.testing.assert_array_equal(back.evaluate(q), model.evaluate(q))


def test_farthest_point_subsample():
    pts = np.array([[0, 0], [0.1, 0], [1, 0], [0, 1.0]])
    idx = farthest_point_subsample(pts, 3)
    assert list(idx) == [0, 2, 3]
    assert list(farthest_point_subsample(pts, 10)) == [0, 1, 2, 3]


def test_set_evaluation_on_data_and_products():
    rng = np.random.default_rng(5)
    Mt, Ms = 30, 10
    states = rng.uniform(-1, 1, (Mt, Ms + 1, 2))
    ds = TrajectoryDataset(states, TS)
    G = np.vstack([np.ones(Mt), rng.standard_normal(Mt), rng.standard_normal(Mt) + 0.5j])
    s = _set_from_rows(np.array([0.0, -0.5, 0.2 + 1j]), G, Ms).fit_extensions(ds)
    s2 = s.with_products([([1, 2], [1, 1]), ([1], [2])])
    assert s2.N == 5 and s2.base_rows == [0, 1, 2]
    np.testing.assert_allclose(s2.eigenvalues[3], -0.3 + 1j)
    at_data = s2.evaluate(ds.samples())
    np.testing.assert_allclose(at_data, s2.values.T, atol=1e-8)
    np.testing.assert_allclose(s2.evaluate(np.array([0.3, 0.1]))[0], 1.0)


def test_from_jordan_blocks():
    ds = TrajectoryDataset(np.random.default_rng(0).standard_normal((2, 6, 2)), TS)
    blocks = [JordanBlock(-0.1, 2), JordanBlock(0.4j, 1)]
    s = EigenfunctionSet.from_jordan_blocks(ds, blocks, [np.ones((2, 2)), np.ones((1, 2))])
    assert s.jordan_sizes == (2, 1) and s.N == 3


def test_evaluate_requires_extension():
    s = _set_from_rows(np.array([0.0]), np.ones((1, 2)), 3)
    with pytest.raises(RuntimeError):
        s.evaluate([0.0, 0.0])
