import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_fda.basis import (
    BasisSystem,
    RawCurve,
    difference_penalty,
    evaluate_basis,
    gram_matrix,
    smooth_many,
    smooth_observations,
)
from bilevel_fda.exceptions import DomainError, IllPosedSmoothingError, InputError


def cox_de_boor(knots, i, k, t):
    """Textbook recursion for B_{i,k}(t), 0/0 taken as 0."""
    if k == 1:
        if knots[i] <= t < knots[i + 1]:
            return 1.0
        # closed right end belongs to the last non-degenerate span
        if t == knots[-1] and knots[i] < knots[i + 1] == knots[-1]:
            return 1.0
        return 0.0
    out = 0.0
    d1 = knots[i + k - 1] - knots[i]
    if d1 > 0:
        out += (t - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, t)
    d2 = knots[i + k] - knots[i + 1]
    if d2 > 0:
        out += (knots[i + k] - t) / d2 * cox_de_boor(knots, i + 1, k - 1, t)
    return out


def oracle_values(basis, t):
    return np.array([cox_de_boor(basis.knot_vector, i, basis.order, t) for i in range(basis.M)])


def trapezoid_gram(basis, n=100_001):
    t = np.linspace(*basis.interval, n)
    Phi = evaluate_basis(basis, t)
    return np.trapezoid(Phi[:, :, None] * Phi[:, None, :], t, axis=0)


def test_constant_basis():
    b = BasisSystem((0.0, 1.0), order=1)
    np.testing.assert_array_equal(evaluate_basis(b, 0.5), [1.0])
    np.testing.assert_array_equal(b.gram, [[1.0]])


def test_cubic_single_knot_matches_recursion():
    b = BasisSystem((0.0, 1.0), order=4, interior_knots=(0.5,))
    np.testing.assert_allclose(evaluate_basis(b, 0.25), oracle_values(b, 0.25), atol=1e-12)


@pytest.mark.parametrize("order", [1, 2, 3, 4, 5])
def test_recursion_oracle_random_knots(order):
    rng = np.random.default_rng(order)
    knots = np.sort(rng.uniform(-1.0, 3.0, 5))
    b = BasisSystem((-1.0, 3.0), order, tuple(knots))
    for t in np.concatenate([rng.uniform(-1.0, 3.0, 30), knots, [-1.0, 3.0]]):
        np.testing.assert_allclose(evaluate_basis(b, t), oracle_values(b, t), atol=1e-12)


def test_repeated_interior_knot():
    b = BasisSystem((0.0, 1.0), 3, (0.4, 0.4))
    t = np.linspace(0, 1, 41)
    np.testing.assert_allclose(evaluate_basis(b, t), [oracle_values(b, s) for s in t], atol=1e-12)


def test_partition_of_unity_dense():
    b = BasisSystem.uniform((2.0, 7.0), 9)
    t = np.random.default_rng(0).uniform(2.0, 7.0, 1000)
    vals = evaluate_basis(b, t)
    assert vals.shape == (1000, 9)
    assert np.all(vals >= 0.0)
    np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    order=st.integers(1, 6),
    knots=st.lists(st.floats(0.01, 0.99), max_size=6),
    t=st.floats(0.0, 1.0),
)
def test_partition_of_unity_property(order, knots, t):
    b = BasisSystem((0.0, 1.0), order, tuple(sorted(knots)))
    vals = evaluate_basis(b, t)
    assert vals.shape == (b.M,)
    assert np.all(vals >= -1e-15)
    assert abs(vals.sum() - 1.0) <= 1e-12


def test_endpoints():
    b = BasisSystem.uniform((0.0, 1.0), 6)
    np.testing.assert_allclose(evaluate_basis(b, 0.0), np.eye(6)[0], atol=1e-15)
    np.testing.assert_allclose(evaluate_basis(b, 1.0), np.eye(6)[-1], atol=1e-15)


@pytest.mark.parametrize("t", [-0.1, 1.0 + 1e-9, np.nan])
def test_outside_interval(t):
    b = BasisSystem.uniform((0.0, 1.0), 5)
    with pytest.raises(DomainError):
        evaluate_basis(b, t)


def test_disjoint_indicator_gram():
    b = BasisSystem((0.0, 1.0), order=1, interior_knots=(0.5,))
    np.testing.assert_allclose(b.gram, np.diag([0.5, 0.5]), atol=1e-15)


def test_cubic_gram_trapezoid_oracle():
    b = BasisSystem((0.0, 1.0), order=4)
    assert b.M == 4
    np.testing.assert_allclose(b.gram, trapezoid_gram(b), atol=1e-8)


@pytest.mark.parametrize("order,knots", [(2, (0.3,)), (3, (0.2, 0.7)), (4, (0.1, 0.5, 0.55, 0.9))])
def test_gram_symmetric_psd(order, knots):
    b = BasisSystem((0.0, 2.0), order, knots)
    G = gram_matrix(b)
    np.testing.assert_allclose(G, G.T, atol=1e-12)
    assert np.linalg.eigvalsh(G).min() > -1e-12
    np.testing.assert_allclose(G, trapezoid_gram(b), atol=1e-8)


def test_gram_inner_product_consistency():
    b = BasisSystem.uniform((-2.0, 3.0), 8)
    rng = np.random.default_rng(1)
    a, c = rng.standard_normal((2, 8))
    t = np.linspace(-2.0, 3.0, 200_001)
    Phi = evaluate_basis(b, t)
    direct = np.trapezoid((Phi @ a) * (Phi @ c), t)
    assert abs(a @ b.gram @ c - direct) <= 1e-6 * abs(direct)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(interval=(1.0, 1.0)),
        dict(interval=(0.0, 1.0), order=0),
        dict(interval=(0.0, 1.0), interior_knots=(0.6, 0.4)),
        dict(interval=(0.0, 1.0), interior_knots=(1.0,)),
    ],
)
def test_invalid_basis(kwargs):
    with pytest.raises(InputError):
        BasisSystem(**kwargs)


def test_uniform_and_roundtrip():
    b = BasisSystem.uniform((0.0, 10.0), 7, order=3)
    assert b.M == 7
    np.testing.assert_allclose(b.interior_knots, np.linspace(0, 10, 6)[1:-1])
    assert BasisSystem.from_dict(b.to_dict()) == b
    with pytest.raises(InputError):
        BasisSystem.uniform((0.0, 1.0), 3, order=4)


def test_raw_curve_validation():
    with pytest.raises(InputError):
        RawCurve([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(InputError):
        RawCurve([0.0, 1.0], [1.0])
    with pytest.raises(InputError):
        RawCurve([], [])


def test_difference_penalty():
    D = difference_penalty(5)
    assert D.shape == (3, 5)
    np.testing.assert_array_equal(D[0], [1, -2, 1, 0, 0])
    assert difference_penalty(2).shape == (0, 2)


def test_smoothing_reproduces_basis_function():
    b = BasisSystem.uniform((0.0, 1.0), 6)
    t = np.linspace(0, 1, 15)
    w = smooth_observations(RawCurve(t, evaluate_basis(b, t)[:, 0]), b, ridge=0.0)
    np.testing.assert_allclose(w, np.eye(6)[0], atol=1e-10)


def test_ill_posed_names_predictor():
    b = BasisSystem((0.0, 1.0), order=4)
    with pytest.raises(IllPosedSmoothingError, match="cdc15"):
        smooth_observations(RawCurve([0.1, 0.5, 0.9], [1.0, 2.0, 0.0]), b, ridge=0.0, name="cdc15")


def test_ridge_resolves_underdetermined_fit():
    b = BasisSystem.uniform((0.0, 1.0), 6)
    w = smooth_observations(RawCurve([0.2, 0.8], [1.0, 3.0]), b, ridge=1.0)
    assert np.all(np.isfinite(w))


def test_sine_smoothing_oracle():
    rng = np.random.default_rng(42)
    b = BasisSystem.uniform((0.0, 1.0), 8)
    t = np.linspace(0, 1, 20)
    y = np.sin(2 * np.pi * t) + rng.normal(0, 0.1, t.size)
    ridge = 1e-4
    w = smooth_observations(RawCurve(t, y), b, ridge)
    B = evaluate_basis(b, t)
    D = difference_penalty(8)
    oracle = np.linalg.solve(B.T @ B + ridge * D.T @ D, B.T @ y)
    np.testing.assert_allclose(w, oracle, atol=1e-8)
    grid = np.linspace(0, 1, 200)
    rmse = np.sqrt(np.mean((evaluate_basis(b, grid) @ w - np.sin(2 * np.pi * grid)) ** 2))
    assert rmse < 0.1


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), c=st.floats(-5, 5), seed=st.integers(0, 10_000))
def test_smoothing_is_linear(a, c, seed):
    rng = np.random.default_rng(seed)
    b = BasisSystem.uniform((0.0, 1.0), 6)
    t = np.sort(rng.choice(np.linspace(0, 1, 30), 12, replace=False))
    y1, y2 = rng.standard_normal((2, t.size))
    lhs = smooth_observations(RawCurve(t, a * y1 + c * y2), b, 1e-3)
    rhs = a * smooth_observations(RawCurve(t, y1), b, 1e-3) + c * smooth_observations(RawCurve(t, y2), b, 1e-3)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_smooth_many_handles_missing_points():
    b = BasisSystem.uniform((0.0, 1.0), 5)
    t = np.linspace(0, 1, 10)
    curves = [RawCurve(t, np.cos(t)), RawCurve(np.delete(t, [2, 5]), np.delete(np.cos(t), [2, 5]))]
    W = smooth_many(curves, b, 1e-6)
    assert W.shape == (2, 5)
    np.testing.assert_allclose(W[0], W[1], atol=1e-3)
