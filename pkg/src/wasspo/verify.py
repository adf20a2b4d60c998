"""Numerical certificates for the transport geometry of particle policies on
small grid MDPs.

All checks use the average-cost setting (``gamma = 1``). A policy is a
particle tensor of shape (N, M, action_dim); a velocity field ``v`` has the
same shape and moves each particle along the straight line ``a + t v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .grid import (StateGrid, action_gradient, build_kernel, make_grid, poisson_solve,
                   stationary_distribution, solve_values)
from .numerics import finite_diff, richardson_second_diff, wasserstein2_1d

FD_STEP = 1e-3
HESS_STEP = 1e-4
RICHARDSON_STEPS = (1e-2, 5e-3, 2.5e-3)


class GeodesicCrossingError(ValueError):
    """Two particles of one state meet along the straight-line geodesic."""


def geodesic_crossing(particles, v, t_max: float, tol: float = 1e-12) -> bool:
    """True if two particles of some state collide for ``|t| <= t_max``.

    Particles ``a_i + t v_i`` and ``a_j + t v_j`` meet when their
    difference vanishes; the closest approach time is found in closed form.
    """
    a = np.asarray(particles, dtype=float)
    v = np.asarray(v, dtype=float)
    m = a.shape[1]
    for i in range(m):
        for j in range(i + 1, m):
            da = a[:, i] - a[:, j]
            dv = v[:, i] - v[:, j]
            vv = np.sum(dv * dv, axis=-1)
            t = np.where(vv > 0, -np.sum(da * dv, axis=-1) / np.where(vv > 0, vv, 1.0), 0.0)
            t = np.clip(t, -t_max, t_max)
            gap = np.linalg.norm(da + t[:, None] * dv, axis=-1)
            if np.any(gap <= tol * (1.0 + np.linalg.norm(da, axis=-1))):
                return True
    return False


def avg_cost(env, grid: StateGrid, particles, sigma: float) -> float:
    """Stationary average cost of a particle policy (``mu`` solved exactly)."""
    mdp = build_kernel(env, grid, particles, sigma, gamma=1.0)
    return float(stationary_distribution(mdp.p_pi) @ mdp.c_pi)


def _solution(env, grid, particles, sigma):
    mdp = build_kernel(env, grid, particles, sigma, gamma=1.0)
    return mdp, solve_values(mdp.p_pi, mdp.c_pi, 1.0)


def local_alignment(env, grid, particles, v, sigma, sol=None) -> np.ndarray:
    """``G(s) = (1/M) sum_i <grad_a Q(s, a_i), v(s, a_i)>`` per grid state."""
    if sol is None:
        sol = _solution(env, grid, particles, sigma)[1]
    dq = action_gradient(env, grid, particles, sol.v, 1.0, sigma)
    return np.sum(dq * v, axis=-1).mean(axis=1)


@dataclass
class GradientReport:
    analytic: float
    fd_slope: float
    relative_error: float


def gradient_identity_check(env, grid: StateGrid, particles, v, sigma: float,
                            h: float = FD_STEP) -> GradientReport:
    """Stationary-weighted pairing of ``grad_a Q`` with ``v`` against the
    finite-difference slope of the average cost along ``a + eps v``."""
    particles = np.asarray(particles, dtype=float)
    v = np.asarray(v, dtype=float)
    _, sol = _solution(env, grid, particles, sigma)
    analytic = float(sol.mu @ local_alignment(env, grid, particles, v, sigma, sol))
    slope = finite_diff(lambda e: avg_cost(env, grid, particles + e * v, sigma), 0.0, h)
    return GradientReport(analytic, slope, abs(analytic - slope) / (abs(analytic) + 1e-12))


@dataclass
class HessianReport:
    t1: float
    t2_local: float
    total: float
    fd_second_derivative: float
    relative_error: float
    poisson_residual: float = 0.0
    psi_mean: float = 0.0


def hessian_check(env, grid: StateGrid, particles, v, sigma: float,
                  steps=RICHARDSON_STEPS, h: float = HESS_STEP) -> HessianReport:
    """Second variation of the average cost along the particle geodesic.

    ``t2_local`` is the stationary average of ``v^T Hess_a Q v`` (V frozen),
    from a central difference of the reverse-mode action gradient.
    ``t1`` pairs ``v`` with the action gradient of the kernel applied to
    ``Psi``, the zero-mean solution of ``(I - P) Psi = G - <mu, G>``. The
    total ``t2_local + 2 t1`` is compared with a Richardson-extrapolated
    second difference of the average cost.
    """
    particles = np.asarray(particles, dtype=float)
    v = np.asarray(v, dtype=float)
    if geodesic_crossing(particles, v, max(steps)):
        raise GeodesicCrossingError("particles cross along the finite-difference segment")
    mdp, sol = _solution(env, grid, particles, sigma)
    mu = sol.mu
    gp = action_gradient(env, grid, particles + h * v, sol.v, 1.0, sigma)
    gm = action_gradient(env, grid, particles - h * v, sol.v, 1.0, sigma)
    curv = np.sum((gp - gm) * v, axis=-1).mean(axis=1) / (2 * h)
    t2 = float(mu @ curv)
    g = local_alignment(env, grid, particles, v, sigma, sol)
    rhs = g - mu @ g
    p = mdp.p_pi
    psi = poisson_solve(p, mu, rhs)
    dpsi = action_gradient(env, grid, particles, psi, 1.0, sigma, with_cost=False)
    t1 = float(mu @ np.sum(dpsi * v, axis=-1).mean(axis=1))
    total = t2 + 2.0 * t1
    f2 = richardson_second_diff(lambda e: avg_cost(env, grid, particles + e * v, sigma), 0.0, steps)
    residual = float(np.max(np.abs(psi - p @ psi - rhs)))
    return HessianReport(t1, t2, total, f2, abs(total - f2) / (abs(f2) + 1e-9),
                         residual, float(mu @ psi))


def convexity_probe(env, grid: StateGrid, sigma: float, trials: int = 100,
                    rng: np.random.Generator | None = None, n_particles: int = 2,
                    action_range: float = 2.0, zero_velocity: bool = False) -> float:
    """Smallest second difference of the average cost over random particle
    policies and random velocity fields; trials whose geodesics cross are
    skipped."""
    rng = np.random.default_rng(0) if rng is None else rng
    lo = np.maximum(env.action_low, -action_range)
    hi = np.minimum(env.action_high, action_range)
    worst = math.inf
    for _ in range(trials):
        a = rng.uniform(lo, hi, size=(len(grid), n_particles, env.action_dim))
        v = np.zeros_like(a) if zero_velocity else rng.normal(size=a.shape)
        if geodesic_crossing(a, v, max(RICHARDSON_STEPS)):
            continue
        f2 = richardson_second_diff(lambda e: avg_cost(env, grid, a + e * v, sigma), 0.0)
        worst = min(worst, f2)
    return worst


@dataclass
class ContractionReport:
    kappa: float
    bound: float
    ratios: np.ndarray = field(repr=False)
    skipped: int = 0


def _lipschitz_state(env, n: int = 20001) -> float:
    p = env.params
    s = np.linspace(p.s_min, p.s_max, n)
    return float(np.max(np.abs(p.alpha + p.beta * np.cos(s))))


def contraction_ratio(env, nu1, nu2, action, noise=None, horizon: int = 1) -> float | None:
    """W2 ratio of two clouds after ``horizon`` coupled steps (per step).

    The k-th smallest samples of the two clouds share the noise draw, a
    valid coupling of the two pushed measures. Returns ``None`` when the
    clouds start at distance zero.
    """
    x = np.sort(np.asarray(nu1, dtype=float).ravel())
    y = np.sort(np.asarray(nu2, dtype=float).ravel())
    d0 = wasserstein2_1d(x, y)
    if d0 == 0.0:
        return None
    a = np.full((x.size, 1), float(action))
    for t in range(horizon):
        xi = None if noise is None else np.asarray(noise[t], dtype=float).reshape(-1, 1)
        x = env.step(x[:, None], a, xi)[:, 0]
        y = env.step(y[:, None], a, xi)[:, 0]
        order_x, order_y = np.argsort(x), np.argsort(y)
        # keep the rank pairing so the next step shares noise by rank
        x, y = x[order_x], y[order_y]
    return (wasserstein2_1d(x, y) / d0) ** (1.0 / horizon)


def contraction_estimate(env, action: float = 0.0, trials: int = 100, samples: int = 200,
                         horizon: int = 1, rng: np.random.Generator | None = None,
                         policy_lipschitz: float = 0.0) -> ContractionReport:
    """Empirical one-step W2 contraction of the scalar regulator kernel under a
    constant policy, against ``sup|alpha + beta cos s| + delta * K_pi``."""
    if env.name != "scalar":
        raise ValueError("contraction estimate needs the scalar environment (1-D W2)")
    rng = np.random.default_rng(0) if rng is None else rng
    bound = _lipschitz_state(env) + env.params.delta * policy_lipschitz
    ratios, skipped = [], 0
    p = env.params
    for _ in range(trials):
        c1, c2 = rng.uniform(p.s_min, p.s_max, size=2) * 0.5
        w1, w2 = rng.uniform(0.05, 1.0, size=2)
        nu1 = np.clip(rng.normal(c1, w1, samples), p.s_min, p.s_max)
        nu2 = np.clip(rng.normal(c2, w2, samples), p.s_min, p.s_max)
        noise = env.sample_noise(rng, (horizon, samples))
        r = contraction_ratio(env, nu1, nu2, action, noise, horizon)
        if r is None:
            skipped += 1
            continue
        ratios.append(r)
    ratios = np.asarray(ratios)
    kappa = float(ratios.max()) if ratios.size else 0.0
    return ContractionReport(kappa, bound, ratios, skipped)


def doeblin_coefficient(p, m: int = 1) -> float:
    """``sum_s' min_s P^m(s, s')``; positive values certify a unique invariant law."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("kernel must be square")
    if m < 1:
        raise ValueError("m must be >= 1")
    pm = np.linalg.matrix_power(p, m)
    return float(np.clip(pm.min(axis=0).sum(), 0.0, 1.0))


# small certification instances ---------------------------------------------

@dataclass
class Instance:
    name: str
    env: object
    grid: StateGrid
    particles: np.ndarray
    v: np.ndarray
    sigma: float


SMALL_INSTANCES = (
    # name, grid points, particles, sigma, seed
    ("scalar-5", 5, 2, 0.5, 11),
    ("scalar-11", 11, 3, 0.4, 12),
    ("scalar-21", 21, 3, 0.3, 13),
)


def small_instances(**env_overrides) -> list:
    """The shipped certification instances on the scalar regulator.

    Actions stay within ``[-2, 2]`` so the state clip is never active.
    """
    out = []
    env = envs.make_env("scalar", **env_overrides)
    for name, n, m, sigma, seed in SMALL_INSTANCES:
        rng = np.random.default_rng(seed)
        grid = make_grid(env, (n,))
        a = rng.uniform(-2.0, 2.0, size=(n, m, 1))
        v = rng.normal(size=a.shape)
        out.append(Instance(name, env, grid, a, v, sigma))
    return out


def null_region_instance() -> Instance:
    """Instance whose invariant law sits on the centre state only.

    With ``alpha = beta = 0`` every next state is ``delta * a``; small
    actions and a narrow kernel send all mass to ``s = 0``. The velocity
    field is supported on the other states, which carry (numerically) no
    stationary mass.
    """
    env = envs.make_env("scalar", alpha=0.0, beta=0.0)
    grid = make_grid(env, (5,))
    rng = np.random.default_rng(7)
    a = rng.uniform(-0.2, 0.2, size=(5, 2, 1))
    v = rng.normal(size=a.shape)
    v[2] = 0.0
    return Instance("scalar-null", env, grid, a, v, 0.05)
