"""Grid-based policy iteration with action particles.

Every grid state carries ``M`` action particles. The induced Markov chain on
the grid comes from the deterministic step followed by Gaussian smoothing,
and particles move by gradient descent on the summed Q-values with the
value function held fixed.

Because the grid is a tensor-product lattice, the Gaussian weights factor
into one normalized 1-D kernel per axis; the full kernel row is their outer
product, and the normalization factors the same way.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .numerics import SingularMatrixError, linear_solve

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-9
NEG_TOL = 1e-12


class NonUniqueStationaryError(np.linalg.LinAlgError):
    """The kernel admits more than one invariant distribution."""


@dataclass(frozen=True)
class StateGrid:
    """Regular lattice over the state box.

    ``scale`` converts coordinate differences into the units in which the
    smoothing bandwidth is expressed.
    """

    axes: tuple
    periodic: tuple
    scale: tuple

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def __len__(self):
        return math.prod(self.shape)

    @property
    def points(self) -> np.ndarray:
        """All points, lexicographically ordered (first coordinate major)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


DEFAULT_RESOLUTION = {"scalar": (81,), "pendulum": (41, 41)}
# scalar kernel bandwidth in state units (the environment noise level);
# pendulum bandwidth in units of each axis' range
DEFAULT_SIGMA_PENDULUM = 0.05


def make_grid(env, resolution=None) -> StateGrid:
    """Default lattice for ``env``; periodic axes use cell-centred points so
    the seam is not duplicated and zero lies on the grid for odd sizes."""
    if env.state_dim > 2:
        raise ValueError(f"grid solver supports state dimension <= 2; "
                         f"{env.name!r} has {env.state_dim}")
    if resolution is None:
        resolution = DEFAULT_RESOLUTION.get(env.name, (41,) * env.state_dim)
    resolution = tuple(int(n) for n in np.atleast_1d(resolution))
    if len(resolution) != env.state_dim or min(resolution) < 2:
        raise ValueError(f"resolution must give >= 2 points for each of {env.state_dim} axes")
    axes, scale = [], []
    for k, n in enumerate(resolution):
        lo, hi = float(env.state_low[k]), float(env.state_high[k])
        if env.periodic[k]:
            step = (hi - lo) / n
            axes.append(lo + (np.arange(n) + 0.5) * step)
        else:
            axes.append(np.linspace(lo, hi, n))
        scale.append(hi - lo if env.name == "pendulum" else 1.0)
    return StateGrid(tuple(axes), tuple(env.periodic), tuple(scale))


def default_sigma(env) -> float:
    if env.name == "scalar":
        return float(env.params.sigma)
    return DEFAULT_SIGMA_PENDULUM


def axis_weights(grid: StateGrid, s_next, sigma: float) -> list:
    """Normalized 1-D Gaussian weights of ``s_next`` on each grid axis.

    ``s_next`` has shape (..., d) and may be a Var; each entry of the result
    has shape (..., n_k). The max-logit shift is a constant and cancels in
    the normalization, so it is not recorded.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = []
    for k, axis in enumerate(grid.axes):
        sk = ad.getitem(s_next, (Ellipsis, slice(k, k + 1)))
        diff = ad.sub(axis, sk)
        if grid.periodic[k]:
            diff = ad.wrap_angle(diff)
        logit = ad.mul(ad.square(diff), -0.5 / (sigma * grid.scale[k]) ** 2)
        shift = np.max(ad.value_of(logit), axis=-1, keepdims=True)
        w = ad.exp(ad.sub(logit, shift))
        out.append(ad.div(w, ad.vsum(w, axis=-1, keepdims=True)))
    return out


def kernel_rows(grid: StateGrid, s_next, sigma: float) -> np.ndarray:
    """Full kernel rows over the grid, shape (..., len(grid))."""
    ws = axis_weights(grid, np.asarray(s_next, dtype=float), sigma)
    row = ws[0]
    for w in ws[1:]:
        row = (row[..., :, None] * w[..., None, :]).reshape(*row.shape[:-1], -1)
    return row


def expected_value(grid: StateGrid, weights: list, v):
    """``sum_j P(j) v_j`` from per-axis weights; records when weights are Vars."""
    v = np.asarray(v, dtype=float)
    if grid.ndim == 1:
        return ad.vsum(ad.mul(weights[0], v), axis=-1)
    table = v.reshape(grid.shape)
    # contract the second axis with a constant matrix, then the first
    inner = ad.affine(weights[1], table.T, np.zeros(grid.shape[0]))
    return ad.vsum(ad.mul(weights[0], inner), axis=-1)


@dataclass
class GridMdp:
    grid: StateGrid
    particles: np.ndarray  # (N, M, action_dim)
    kernel: np.ndarray  # (N, M, N), per-particle rows
    costs: np.ndarray  # (N, M)
    gamma: float
    sigma: float

    @property
    def p_pi(self) -> np.ndarray:
        return self.kernel.mean(axis=1)

    @property
    def c_pi(self) -> np.ndarray:
        return self.costs.mean(axis=1)


def _broadcast_states(grid, particles):
    pts = grid.points
    return np.broadcast_to(pts[:, None, :], particles.shape[:2] + (pts.shape[1],))


def build_kernel(env, grid: StateGrid, particles, sigma: float, gamma: float = 0.95) -> GridMdp:
    """Per-particle smoothed kernel and costs for the particle policy."""
    particles = np.asarray(particles, dtype=float)
    if particles.ndim != 3 or particles.shape[0] != len(grid) or particles.shape[2] != env.action_dim:
        raise ValueError(f"particles must have shape ({len(grid)}, M, {env.action_dim}), "
                         f"got {particles.shape}")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    s = _broadcast_states(grid, particles)
    s_next = env.step(s, particles)
    return GridMdp(grid, particles, kernel_rows(grid, s_next, sigma),
                   np.asarray(env.cost(s, particles), dtype=float), float(gamma), float(sigma))


def _check_stochastic(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"kernel must be square, got shape {p.shape}")
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise ValueError("kernel rows must be nonnegative and sum to 1")
    return p


def stationary_distribution(p) -> np.ndarray:
    """Invariant distribution of a row-stochastic matrix.

    Solves the balance equations with the last one replaced by the
    normalization constraint. Raises :class:`NonUniqueStationaryError` when
    that system is singular, which happens when the chain has several
    closed classes (the Doeblin coefficient is then zero).
    """
    p = _check_stochastic(p)
    n = p.shape[0]
    a = p.T - np.eye(n)
    a[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        mu = linear_solve(a, b)
    except SingularMatrixError as exc:
        raise NonUniqueStationaryError(
            "kernel has more than one invariant distribution; check the Doeblin "
            "coefficient (verify.doeblin_coefficient) of the kernel") from exc
    if mu.min() < -1e-9:
        raise NonUniqueStationaryError(
            f"balance solve returned a negative mass {mu.min():.3e}; the chain is "
            "numerically reducible (see verify.doeblin_coefficient)")
    mu = np.where(mu < NEG_TOL, np.maximum(mu, 0.0), mu)
    return mu / mu.sum()


def poisson_solve(p, mu, rhs) -> np.ndarray:
    """Solution of ``(I - P) x = rhs`` with ``<mu, x> = 0``.

    ``rhs`` must satisfy ``<mu, rhs> = 0``. The rank-one term ``1 mu^T``
    makes the system nonsingular without changing that solution.
    """
    n = p.shape[0]
    return linear_solve(np.eye(n) - p + np.outer(np.ones(n), mu), rhs)


@dataclass
class ValueSolution:
    mu: np.ndarray
    v: np.ndarray
    avg_cost: float
    gamma: float
    centered: bool


def solve_values(p, c, gamma: float = 0.95, center: bool | None = None) -> ValueSolution:
    """Policy evaluation on the grid.

    ``gamma < 1`` solves ``(I - gamma P) V = C``. ``gamma = 1`` needs the
    centred cost ``C - <mu, C>``; the system is then solved on the
    ``<mu, V> = 0`` subspace through ``(I - P + 1 mu^T) V = C_centred``.
    """
    p = _check_stochastic(p)
    c = np.asarray(c, dtype=float)
    if c.shape != (p.shape[0],):
        raise ValueError("cost vector length must match the kernel")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    center = (gamma == 1.0) if center is None else bool(center)
    n = p.shape[0]
    if gamma == 1.0 and not center:
        raise SingularMatrixError("I - P is singular for gamma = 1; solve with center=True "
                                  "(average-cost Poisson equation)")
    mu = stationary_distribution(p)
    avg = float(mu @ c)
    rhs = c - avg if center else c
    if gamma == 1.0:
        v = poisson_solve(p, mu, rhs)
    else:
        v = linear_solve(np.eye(n) - gamma * p, rhs)
    return ValueSolution(mu, v, avg, float(gamma), center)


def evaluate(mdp: GridMdp, center: bool | None = None) -> ValueSolution:
    return solve_values(mdp.p_pi, mdp.c_pi, mdp.gamma, center)


def q_values(mdp: GridMdp, sol: ValueSolution) -> np.ndarray:
    """``Q[s, i] = c[s, i] + gamma * sum_s' P(s'|s, i) V[s']``, shape (N, M)."""
    c = mdp.costs - sol.avg_cost if sol.centered else mdp.costs
    return c + mdp.gamma * mdp.kernel @ sol.v


def _q_expr(env, grid, a, w, gamma, sigma, with_cost=True):
    """Per-particle ``c(s, a) + gamma * sum_s' P(s'|s, a) w(s')``; records on Vars."""
    s = _broadcast_states(grid, ad.value_of(a))
    s_next = env.step_recorded(s, a)
    q = ad.mul(gamma, expected_value(grid, axis_weights(grid, s_next, sigma), w))
    return ad.add(env.cost(s, a), q) if with_cost else q


def surrogate_loss(env, grid, particles, v, gamma: float, sigma: float) -> float:
    """Sum of Q-values over all grid states and particles, V held fixed."""
    return float(np.sum(_q_expr(env, grid, np.asarray(particles, dtype=float), v, gamma, sigma)))


def action_gradient(env, grid: StateGrid, particles, w, gamma: float, sigma: float,
                    with_cost: bool = True) -> np.ndarray:
    """``d/da`` of ``c(s, a) + gamma * sum_s' P(s'|s, a) w(s')`` at every particle.

    Each term depends on its own particle only, so one reverse sweep over
    the sum gives all per-particle gradients.
    """
    particles = np.asarray(particles, dtype=float)
    tape = ad.Tape()
    a = tape.var(particles)
    q = _q_expr(env, grid, a, w, gamma, sigma, with_cost)
    return tape.gradient(ad.vsum(q), [a]).reshape(particles.shape)


def particle_gradient(env, grid: StateGrid, particles, sol: ValueSolution, sigma: float) -> np.ndarray:
    """Gradient of the surrogate (summed Q-values, V frozen) per particle.

    The cost centring is a constant and does not change it.
    """
    return action_gradient(env, grid, particles, sol.v, sol.gamma, sigma)


def project(env, particles) -> np.ndarray:
    return np.clip(particles, env.action_low, env.action_high)


def init_particles(env, grid: StateGrid, n_particles: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(env.action_low, env.action_high,
                       size=(len(grid), n_particles, env.action_dim))


@dataclass
class GridConfig:
    resolution: tuple | None = None
    n_particles: int = 3
    sigma: float | None = None
    gamma: float = 0.95
    lr: float = 1.0
    iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def resolved(self, env) -> "GridConfig":
        sigma = self.sigma if self.sigma is not None else default_sigma(env)
        return replace(self, sigma=sigma)


@dataclass
class GridResult:
    grid: StateGrid
    particles: np.ndarray
    mdp: GridMdp
    solution: ValueSolution
    history: list = field(default_factory=list)
    config: GridConfig | None = None

    @property
    def mean_action(self) -> np.ndarray:
        return self.particles.mean(axis=1)


def policy_iteration(env, config: GridConfig | None = None,
                     rng: np.random.Generator | None = None,
                     particles=None) -> GridResult:
    """Evaluate, record the average cost, improve; ``iterations`` times.

    The history has one row per evaluated policy, iterations ``0..K``, where
    iteration 0 is the random initial policy.
    """
    cfg = (config or GridConfig()).resolved(env)
    grid = make_grid(env, cfg.resolution)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if particles is None:
        particles = init_particles(env, grid, cfg.n_particles, rng)
    particles = project(env, np.array(particles, dtype=float))
    history = []
    for k in range(cfg.iterations + 1):
        mdp = build_kernel(env, grid, particles, cfg.sigma, cfg.gamma)
        sol = evaluate(mdp)
        history.append({"iter": k, "avg_cost": sol.avg_cost})
        log.debug("grid iteration %d: avg cost %.6g", k, sol.avg_cost)
        if k == cfg.iterations:
            break
        grad = particle_gradient(env, grid, particles, sol, cfg.sigma)
        particles = project(env, particles - cfg.lr * grad)
    return GridResult(grid, particles, mdp, sol, history, cfg)
