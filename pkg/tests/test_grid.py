import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wasspo import envs
from wasspo.grid import (GridConfig, NonUniqueStationaryError, StateGrid, build_kernel,
                         default_sigma, evaluate, kernel_rows, make_grid, particle_gradient,
                         policy_iteration, project, q_values, solve_values,
                         stationary_distribution, surrogate_loss)
from wasspo.numerics import SingularMatrixError, finite_diff

from helpers import ZeroCostScalar, explicit_kernel


def line(*pts):
    return StateGrid((np.array(pts, dtype=float),), (False,), (1.0,))


# kernel -----------------------------------------------------------------------

def test_symmetric_row():
    np.testing.assert_allclose(kernel_rows(line(-1, 1), [[0.0]], 0.7), [[0.5, 0.5]])


def test_narrow_row():
    row = kernel_rows(line(0, 1), [[0.0]], 0.2)[0]
    e = math.exp(-12.5)
    np.testing.assert_allclose(row, [1 / (1 + e), e / (1 + e)], rtol=1e-12)
    assert row[1] == pytest.approx(3.7e-6, rel=0.01)


def test_single_particle_kernel_is_the_policy_kernel():
    env = envs.make_env("scalar")
    g = make_grid(env, (9,))
    parts = np.random.default_rng(0).uniform(-2, 2, size=(9, 1, 1))
    mdp = build_kernel(env, g, parts, 0.3)
    np.testing.assert_array_equal(mdp.p_pi, mdp.kernel[:, 0])


@pytest.mark.parametrize("name, res", [("scalar", (15,)), ("pendulum", (7, 9))])
def test_factorized_kernel_matches_explicit(name, res):
    env = envs.make_env(name)
    g = make_grid(env, res)
    rng = np.random.default_rng(3)
    s_next = env.sample_states(rng, 20)
    sigma = default_sigma(env)
    np.testing.assert_allclose(kernel_rows(g, s_next, sigma), explicit_kernel(g, s_next, sigma),
                               rtol=1e-10, atol=1e-300)


@pytest.mark.parametrize("name", ["scalar", "pendulum"])
def test_rows_are_probability_vectors(name):
    env = envs.make_env(name)
    g = make_grid(env, (21,) if name == "scalar" else (11, 11))
    parts = env.sample_actions(np.random.default_rng(0), len(g) * 3).reshape(len(g), 3, 1)
    mdp = build_kernel(env, g, parts, default_sigma(env))
    assert np.all(mdp.kernel >= 0)
    assert np.max(np.abs(mdp.kernel.sum(axis=-1) - 1)) <= 1e-12


def test_grid_layout():
    env = envs.make_env("pendulum")
    g = make_grid(env)
    assert g.shape == (41, 41)
    pts = g.points
    assert len(np.unique(pts, axis=0)) == len(pts)
    assert np.all(np.diff(pts[:, 0]) >= 0)  # first coordinate major
    assert np.any(np.isclose(g.axes[0], 0.0))  # upright lies on the grid
    assert g.axes[0].min() > -math.pi and g.axes[0].max() < math.pi
    g1 = make_grid(envs.make_env("scalar"))
    assert len(g1) == 81 and g1.axes[0][0] == -3 and g1.axes[0][-1] == 3


def test_grid_rejects_oscillators():
    with pytest.raises(ValueError):
        make_grid(envs.make_env("oscillators"))


def test_periodic_distance_crosses_seam():
    env = envs.make_env("pendulum")
    g = make_grid(env, (11, 5))
    row = kernel_rows(g, [[math.pi - 0.01, 0.0]], 0.05)[0].reshape(11, 5).sum(axis=1)
    # mass splits between the last and the first angle cell
    assert row[0] > 0.1 and row[-1] > 0.1


# stationary distribution -------------------------------------------------------

def test_stationary_examples():
    np.testing.assert_allclose(stationary_distribution([[0, 1], [1, 0]]), [0.5, 0.5])
    np.testing.assert_allclose(stationary_distribution([[0.9, 0.1], [0.5, 0.5]]), [5 / 6, 1 / 6])
    with pytest.raises(NonUniqueStationaryError):
        stationary_distribution(np.eye(2))


def test_stationary_rejects_non_stochastic():
    with pytest.raises(ValueError):
        stationary_distribution([[0.5, 0.4], [0.5, 0.5]])


@given(st.integers(2, 25), st.integers(0, 2**32 - 1))
def test_stationarity_residual(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 1, size=(n, n))
    p /= p.sum(axis=1, keepdims=True)
    mu = stationary_distribution(p)
    assert np.all(mu >= 0) and abs(mu.sum() - 1) <= 1e-12
    assert np.abs(mu @ p - mu).sum() <= 1e-9


# values ------------------------------------------------------------------------

def test_solve_values_examples():
    sol = solve_values(np.ones((1, 1)), [2.5], 1.0)
    assert sol.avg_cost == 2.5 and sol.v[0] == pytest.approx(0.0)
    p = np.array([[0.9, 0.1], [0.5, 0.5]])
    sol = solve_values(p, [1.0, 0.0], 1.0)
    assert sol.avg_cost == pytest.approx(5 / 6)
    np.testing.assert_allclose(sol.v, [5 / 18, -25 / 18], atol=1e-12)
    sol = solve_values(p, [0.0, 0.0], 0.9)
    assert sol.avg_cost == 0 and np.all(sol.v == 0)


def test_average_cost_needs_centering():
    with pytest.raises(SingularMatrixError):
        solve_values(np.array([[0.9, 0.1], [0.5, 0.5]]), [1.0, 0.0], 1.0, center=False)


def test_discounted_values():
    p = np.array([[0.9, 0.1], [0.5, 0.5]])
    sol = solve_values(p, [1.0, 0.0], 0.95)
    np.testing.assert_allclose((np.eye(2) - 0.95 * p) @ sol.v, [1, 0], atol=1e-12)
    assert sol.avg_cost == pytest.approx(5 / 6)


def test_q_values_examples():
    env = envs.make_env("scalar")
    g = line(0.0, 1.0)
    # s = 1 with a = -(0.5 + 0.1 sin 1) / 0.2 lands on 0, as does s = 0 with a = 0
    parts = np.array([[[0.0]], [[-(0.5 + 0.1 * math.sin(1.0)) / 0.2]]])
    mdp = build_kernel(env, g, parts, 1e-6, gamma=0.9)
    np.testing.assert_allclose(mdp.p_pi, [[1, 0], [1, 0]], atol=1e-12)
    sol = evaluate(mdp)
    q = q_values(mdp, sol)
    np.testing.assert_allclose(q[:, 0], mdp.costs[:, 0] + 0.9 * sol.v[0], atol=1e-12)
    zero = type(sol)(sol.mu, np.zeros(2), sol.avg_cost, 0.9, False)
    np.testing.assert_array_equal(q_values(mdp, zero), mdp.costs)


def test_q_values_two_state_hand_expansion():
    p = np.array([[0.9, 0.1], [0.5, 0.5]])
    sol = solve_values(p, [1.0, 0.0], 1.0)
    c_tilde = np.array([1.0, 0.0]) - 5 / 6
    expected = c_tilde + p @ sol.v
    env = envs.make_env("scalar")
    mdp = build_kernel(env, line(0, 1), np.zeros((2, 1, 1)), 1.0, gamma=1.0)
    mdp.kernel[:] = p[:, None, :]
    mdp.costs[:] = np.array([[1.0], [0.0]])
    np.testing.assert_allclose(q_values(mdp, sol)[:, 0], expected, atol=1e-12)
    np.testing.assert_allclose(expected, sol.v, atol=1e-12)


@pytest.mark.parametrize("gamma", [0.9, 1.0])
def test_bellman_consistency(gamma):
    env = envs.make_env("scalar")
    g = make_grid(env, (31,))
    parts = np.random.default_rng(4).uniform(-5, 5, size=(31, 3, 1))
    mdp = build_kernel(env, g, parts, 0.2, gamma)
    sol = evaluate(mdp)
    np.testing.assert_allclose(q_values(mdp, sol).mean(axis=1), sol.v, atol=1e-9)
    if gamma == 1.0:
        assert abs(sol.mu @ sol.v) <= 1e-9


# particle gradient ---------------------------------------------------------------

def test_gradient_with_zero_values_is_cost_gradient():
    env = envs.make_env("scalar")
    g = make_grid(env, (11,))
    parts = np.random.default_rng(5).uniform(-5, 5, size=(11, 2, 1))
    sol = type(evaluate(build_kernel(env, g, parts, 0.2)))(None, np.zeros(11), 0.0, 0.95, False)
    np.testing.assert_allclose(particle_gradient(env, g, parts, sol, 0.2), 0.2 * parts, rtol=1e-12)


@pytest.mark.parametrize("name", ["scalar", "pendulum"])
def test_particle_gradient_matches_finite_differences(name):
    env = envs.make_env(name)
    g = make_grid(env, (15,) if name == "scalar" else (9, 9))
    rng = np.random.default_rng(6)
    lo, hi = 0.8 * env.action_low, 0.8 * env.action_high
    parts = rng.uniform(lo, hi, size=(len(g), 2, 1))
    sigma = default_sigma(env)
    mdp = build_kernel(env, g, parts, sigma)
    sol = evaluate(mdp)
    grad = particle_gradient(env, g, parts, sol, sigma)
    probes = [(rng.integers(len(g)), rng.integers(2)) for _ in range(50)]
    for s, i in probes:
        def f(t):
            q = parts.copy()
            q[s, i, 0] = t
            return surrogate_loss(env, g, q, sol.v, sol.gamma, sigma)
        fd = finite_diff(f, parts[s, i, 0], 1e-4)
        assert grad[s, i, 0] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_projection_returns_to_bound():
    env = envs.make_env("scalar")
    out = project(env, np.array([[[5.3], [-7.0], [1.0]]]))
    np.testing.assert_array_equal(out.ravel(), [5.0, -5.0, 1.0])


# policy iteration --------------------------------------------------------------------

def test_zero_cost_environment():
    env = ZeroCostScalar()
    rng = np.random.default_rng(0)
    cfg = GridConfig(resolution=(11,), iterations=5)
    start = np.random.default_rng(1).uniform(-5, 5, size=(11, 3, 1))
    res = policy_iteration(env, cfg, rng, particles=start)
    assert all(r["avg_cost"] == 0 for r in res.history)
    np.testing.assert_array_equal(res.particles, start)


def test_frozen_policy():
    env = envs.make_env("scalar")
    res = policy_iteration(env, GridConfig(resolution=(21,), n_particles=1, lr=0.0, iterations=4))
    costs = [r["avg_cost"] for r in res.history]
    assert len(costs) == 5 and max(costs) == min(costs)


def test_deterministic_per_seed():
    env = envs.make_env("scalar")
    a = policy_iteration(env, GridConfig(resolution=(21,), iterations=3, seed=2))
    b = policy_iteration(env, GridConfig(resolution=(21,), iterations=3, seed=2))
    assert a.particles.tobytes() == b.particles.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        GridConfig(n_particles=0)
    with pytest.raises(ValueError):
        GridConfig(gamma=0.0)
    with pytest.raises(ValueError):
        GridConfig(sigma=-1.0)
