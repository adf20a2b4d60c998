import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from wasspo.numerics import (SingularMatrixError, conjugate_gradient, finite_diff, linear_solve,
                             richardson_second_diff, ridge_solve, second_diff, wasserstein2_1d)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# linear_solve -----------------------------------------------------------------

@pytest.mark.parametrize("a, b, x", [
    (np.eye(3), [1, 2, 3], [1, 2, 3]),                    # [TRIVIAL]
    ([[2, 0], [0, 4]], [2, 8], [1, 2]),                   # [TRIVIAL]
    ([[1, 1], [1, -1]], [3, 1], [2, 1]),                  # [DERIVED] hand elimination
])
def test_linear_solve_examples(a, b, x):
    np.testing.assert_allclose(linear_solve(a, b), x, atol=1e-12)


def test_linear_solve_singular():
    with pytest.raises(SingularMatrixError):
        linear_solve([[1, 2], [2, 4]], [1, 2])


def test_linear_solve_shape_errors():
    with pytest.raises(ValueError):
        linear_solve(np.ones((2, 3)), [1, 2])
    with pytest.raises(ValueError):
        linear_solve(np.eye(2), [1, 2, 3])


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_linear_solve_residual(n, seed):
    # well-conditioned random system: singular values in [1, 1e3]
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.normal(size=(n, n)))
    v, _ = np.linalg.qr(rng.normal(size=(n, n)))
    a = u @ np.diag(np.logspace(0, 3, n)) @ v
    b = rng.normal(size=n)
    x = linear_solve(a, b)
    assert np.max(np.abs(a @ x - b)) <= 1e-9 * (1 + np.max(np.abs(b)))


# conjugate gradient -----------------------------------------------------------

def test_cg_identity_one_iteration():
    res = conjugate_gradient(lambda v: v, np.array([5.0, -3.0]), damping=0.0)
    np.testing.assert_allclose(res.x, [5, -3])
    assert res.converged and res.n_iter == 1


def test_cg_diagonal():
    d = np.array([4.0, 2.0])
    res = conjugate_gradient(lambda v: d * v, np.array([4.0, 2.0]), damping=0.0)
    np.testing.assert_allclose(res.x, [1, 1], atol=1e-12)


def test_cg_damping_only():
    res = conjugate_gradient(lambda v: 0 * v, np.array([1.0]), damping=0.5)
    np.testing.assert_allclose(res.x, [2.0])


def test_cg_reports_nonconvergence():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 20))
    a = a @ a.T + 1e-3 * np.eye(20)
    res = conjugate_gradient(lambda v: a @ v, rng.normal(size=20), max_iter=2, damping=0.0)
    assert not res.converged and res.n_iter == 2


def test_cg_zero_rhs():
    res = conjugate_gradient(lambda v: v, np.zeros(3))
    assert res.converged and np.all(res.x == 0)


@given(st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_cg_matches_direct_solve(n, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, n))
    a = g @ g.T / n + np.eye(n)
    b = rng.normal(size=n)
    res = conjugate_gradient(lambda v: a @ v, b, tol=1e-12, max_iter=10 * n, damping=0.0)
    assert res.converged
    x = linear_solve(a, b)
    assert np.linalg.norm(res.x - x) <= 1e-9 * (1 + np.linalg.norm(x))


def test_cg_size_200():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(200, 200))
    a = g @ g.T / 200 + np.eye(200)
    b = rng.normal(size=200)
    res = conjugate_gradient(lambda v: a @ v, b, tol=1e-12, max_iter=400, damping=0.0)
    np.testing.assert_allclose(res.x, linear_solve(a, b), atol=1e-9)


# ridge ------------------------------------------------------------------------

@pytest.mark.parametrize("phi, y, lam, w", [
    (np.eye(2), [[3], [4]], 0.0, [[3], [4]]),            # [TRIVIAL]
    ([[2.0]], [[4.0]], 4.0, [[1.0]]),                     # [DERIVED] (4 + 4)^-1 * 8
    ([[1.0], [1.0]], [[1.0], [3.0]], 0.0, [[2.0]]),        # [DERIVED] least-squares mean
])
def test_ridge_examples(phi, y, lam, w):
    np.testing.assert_allclose(ridge_solve(phi, y, lam), w, atol=1e-12)


def test_ridge_singular_without_penalty():
    with pytest.raises(SingularMatrixError):
        ridge_solve(np.ones((3, 2)), np.ones((3, 1)), 0.0)


def test_ridge_negative_lambda():
    with pytest.raises(ValueError):
        ridge_solve(np.eye(2), np.ones(2), -1.0)


@given(st.integers(1, 40), st.integers(1, 12), st.integers(1, 3),
       st.floats(1e-6, 10.0), st.integers(0, 2**32 - 1))
def test_ridge_normal_equations(n, p, k, lam, seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n, p))
    y = rng.normal(size=(n, k))
    w = ridge_solve(phi, y, lam)
    lhs = (phi.T @ phi + lam * np.eye(p)) @ w
    rhs = phi.T @ y
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * (1 + np.linalg.norm(rhs))


# W2 ---------------------------------------------------------------------------

@pytest.mark.parametrize("mu, nu, d", [
    ([0.0], [1.0], 1.0),                 # [TRIVIAL]
    ([1, 2, 3], [1, 2, 3], 0.0),         # [TRIVIAL]
    ([0, 2], [1, 3], 1.0),               # [DERIVED] both couplings enumerated
])
def test_w2_examples(mu, nu, d):
    assert wasserstein2_1d(mu, nu) == pytest.approx(d, abs=1e-15)


def test_w2_errors():
    with pytest.raises(ValueError):
        wasserstein2_1d([], [])
    with pytest.raises(ValueError):
        wasserstein2_1d([1, 2], [1])


def brute_force_w2(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    best = min(np.mean((x - y[list(p)]) ** 2) for p in itertools.permutations(range(len(y))))
    return math.sqrt(best)


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(float, n, elements=finite), arrays(float, n, elements=finite))))
def test_w2_equals_brute_force_assignment(pair):
    x, y = pair
    assert wasserstein2_1d(x, y) == brute_force_w2(x, y) or math.isclose(
        wasserstein2_1d(x, y), brute_force_w2(x, y), rel_tol=0, abs_tol=1e-12)


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(*[arrays(float, n, elements=finite)] * 3)))
def test_w2_metric_axioms(triple):
    x, y, z = triple
    assert wasserstein2_1d(x, y) == wasserstein2_1d(y, x)
    assert wasserstein2_1d(x, x) == 0.0
    assert wasserstein2_1d(x, z) <= wasserstein2_1d(x, y) + wasserstein2_1d(y, z) + 1e-12


# finite differences -----------------------------------------------------------

def test_finite_diff_examples():
    assert finite_diff(lambda x: x * x, 3.0, 1e-3) == pytest.approx(6.0, abs=1e-8)
    assert finite_diff(lambda x: 7.0, 1.0) == 0.0
    assert second_diff(lambda x: x ** 3, 1.0, 1e-3) == pytest.approx(6.0, abs=1e-5)


def test_finite_diff_nonfinite_flag():
    with pytest.warns(RuntimeWarning):
        val = finite_diff(lambda x: math.inf if x > 0 else 0.0, 0.0)
    assert not math.isfinite(val)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff(lambda x: x, 0.0, 0.0)


def test_richardson_exact_on_quartic():
    # f = x^4: second differences carry an h^2 error that extrapolation removes
    f = lambda x: x ** 4
    assert richardson_second_diff(f, 1.0) == pytest.approx(12.0, rel=1e-9)
