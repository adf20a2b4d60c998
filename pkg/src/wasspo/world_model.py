"""Model-based policy optimization through a learned, differentiable world
model.

The model predicts a state derivative ``s_dot = [Body(s, a), 1] W`` and steps
``s' = s + dt * s_dot``. The body is a tanh network trained by gradient
descent; the linear head is re-solved in closed form (ridge regression) on
every batch before the body step, with the head held constant during the
body backward pass (variable projection).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .numerics import ridge_solve
from .policy import Mlp, make_policy
from .trajopt import (RolloutError, clip_by_norm, natural_gradient_step, rollout,
                      DEFAULT_CLIP, DEFAULT_HORIZON)

log = logging.getLogger(__name__)

HEAD_GUARD = 10.0


class ReplayBuffer:
    """Bounded FIFO of transitions ``(s, a, s')`` with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        width = 2 * self.state_dim + self.action_dim
        self._data = np.empty((self.capacity, width))
        self._size = 0
        self._head = 0

    def __len__(self):
        return self._size

    def add(self, s, a, s_next) -> None:
        s = np.asarray(s, dtype=float).reshape(-1, self.state_dim)
        a = np.asarray(a, dtype=float).reshape(-1, self.action_dim)
        s_next = np.asarray(s_next, dtype=float).reshape(-1, self.state_dim)
        if not (len(s) == len(a) == len(s_next)):
            raise ValueError("transition arrays must have the same number of rows")
        rows = np.concatenate([s, a, s_next], axis=1)[-self.capacity:]
        idx = (self._head + np.arange(len(rows))) % self.capacity
        self._data[idx] = rows
        self._head = int((self._head + len(rows)) % self.capacity)
        self._size = min(self.capacity, self._size + len(rows))

    def _split(self, rows):
        d, k = self.state_dim, self.action_dim
        return rows[:, :d], rows[:, d:d + k], rows[:, d + k:]

    def sample(self, n: int, rng: np.random.Generator):
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self._split(self._data[rng.integers(0, self._size, size=n)])

    def transitions(self):
        """All stored transitions, oldest first."""
        order = (self._head - self._size + np.arange(self._size)) % self.capacity
        return self._split(self._data[order])


class WorldModel:
    """Residual dynamics model with a tanh body and a ridge-fitted linear head.

    Parameters
    ----------
    env : Env
        Supplies dimensions, ``dt``, angle handling and input ranges.
    feature_dim : int
        Width of the learned feature layer; a constant feature is appended.
    hidden : tuple of int
        Hidden layer widths of the body before the feature layer.
    ridge : float
        Ridge penalty of the head solve.
    """

    def __init__(self, env, feature_dim: int = 128, hidden=(128,), ridge: float = 1e-3,
                 rng: np.random.Generator | None = None):
        if ridge < 0:
            raise ValueError("ridge must be >= 0")
        self.env = env
        self.dt = float(env.dt)
        self.ridge = float(ridge)
        self.feature_dim = int(feature_dim)
        periodic = tuple(env.periodic) + (False,) * env.action_dim
        scale = np.concatenate([0.5 * (env.state_high - env.state_low),
                                0.5 * (env.action_high - env.action_low)])
        n_in = env.state_dim + env.action_dim + sum(periodic)
        self.body = Mlp([n_in, *hidden, self.feature_dim], activation="tanh",
                        output_activation="tanh", input_scale=scale, periodic=periodic)
        if rng is not None:
            self.body.init_params(rng)
        self.W = np.zeros((self.feature_dim + 1, env.state_dim))

    def features(self, s, a, theta=None):
        """``[Body(s, a), 1]``; records when any input is a Var."""
        x = ad.concat([s, a], axis=-1)
        phi = self.body.forward(x, theta)
        ones = np.ones(ad.value_of(phi).shape[:-1] + (1,))
        return ad.concat([phi, ones], axis=-1)

    def velocity(self, s, a):
        return ad.affine(self.features(s, a), self.W, np.zeros(self.env.state_dim))

    def predict(self, s, a):
        """Next state ``normalize(s + dt * s_dot)``; angles wrap, nothing is clipped."""
        return self.env.normalize(ad.add(s, ad.mul(self.dt, self.velocity(s, a))))

    __call__ = predict

    def targets(self, s, s_next) -> np.ndarray:
        """Finite-difference velocities, angle differences wrapped."""
        return self.env.state_delta(s_next, s) / self.dt

    def fit_head(self, s, a, s_next) -> float:
        """Ridge-solve the head on one batch; returns the batch loss.

        The loss is the mean over rows of the squared residual norm.
        """
        phi = np.asarray(self.features(np.asarray(s, float), np.asarray(a, float)))
        y = self.targets(s, s_next)
        self.W = head_solve(phi, y, self.ridge, self.dt)
        r = phi @ self.W - y
        return float(np.mean(np.sum(r * r, axis=-1)))

    def body_gradient(self, s, a, s_next) -> np.ndarray:
        """Gradient of the batch loss in the body parameters, head fixed."""
        s, a = np.asarray(s, float), np.asarray(a, float)
        x = np.concatenate([s, a], axis=-1)
        phi = np.asarray(self.features(s, a))
        r = phi @ self.W - self.targets(s, s_next)
        d_phi = 2.0 * (r @ self.W.T) / len(s)
        return self.body.vjp(x, d_phi[:, :-1])

    def one_step_error(self, s, a, s_next) -> float:
        """Mean squared one-step prediction error with wrapped angles."""
        d = self.env.state_delta(np.asarray(self.predict(np.asarray(s, float), np.asarray(a, float))), s_next)
        return float(np.mean(np.sum(d * d, axis=-1)))


def head_solve(phi, y, lam: float, dt: float, max_refits: int = 6) -> np.ndarray:
    """Ridge head, re-solved with a 10x larger penalty while ``||W||_2 dt``
    exceeds the divergence guard.

    If ``max_refits`` penalty increases are not enough, the last solution is
    scaled down to just inside the guard.
    """
    w = ridge_solve(phi, y, lam)
    for _ in range(max_refits):
        if np.linalg.norm(w, 2) * dt < HEAD_GUARD:
            break
        lam = max(10.0 * lam, 1e-6)
        log.debug("head norm guard: refitting with ridge %.3g", lam)
        w = ridge_solve(phi, y, lam)
    norm = np.linalg.norm(w, 2) * dt
    if norm >= HEAD_GUARD:
        w = w * (0.99 * HEAD_GUARD / norm)
    return w


def train_world_model(wm: WorldModel, buffer: ReplayBuffer, n_updates: int, lr: float,
                      batch_size: int, rng: np.random.Generator) -> list:
    """Alternate head solve and body gradient step; returns per-update losses."""
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    losses = []
    for _ in range(n_updates):
        s, a, s2 = buffer.sample(batch_size, rng)
        losses.append(wm.fit_head(s, a, s2))
        wm.body.theta = wm.body.theta - lr * wm.body_gradient(s, a, s2)
    return losses


@dataclass
class WorldModelConfig:
    iterations: int = 300
    horizon: int | None = None
    batch_policy: int = 32
    batch_wm: int = 256
    wm_updates: int = 50
    lr_wm: float = 0.2
    feature_dim: int = 128
    wm_hidden: tuple = (128,)
    ridge: float = 1e-3
    lr: float = 0.02
    cg_tol: float = 1e-10
    cg_max_iter: int = 20
    cg_damping: float = 1e-2
    grad_clip: float | None = None
    random_start_frac: float = 0.1
    init_trajectories: int = 20
    buffer_capacity: int = 100_000
    hidden: tuple | None = None
    oracle: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("batch_policy", "batch_wm", "feature_dim", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("iterations", "wm_updates", "init_trajectories"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if not 0.0 <= self.random_start_frac <= 1.0:
            raise ValueError("random_start_frac must lie in [0, 1]")

    def resolved(self, env) -> "WorldModelConfig":
        horizon = self.horizon or DEFAULT_HORIZON.get(env.name, 60)
        hidden = tuple(self.hidden) if self.hidden else ((128, 128) if env.name == "oscillators" else (64, 64))
        clip = self.grad_clip if self.grad_clip is not None else DEFAULT_CLIP["ng"]
        return replace(self, horizon=horizon, hidden=hidden, grad_clip=clip)


@dataclass
class JointResult:
    policy: Mlp
    world_model: WorldModel | None
    policy_history: list = field(default_factory=list)
    wm_history: list = field(default_factory=list)
    config: WorldModelConfig | None = None


def collect(env, policy, buffer: ReplayBuffer, starts, horizon: int, actions=None) -> None:
    """Real-environment rollouts from ``starts``; random ``actions`` of shape
    (horizon, B, action_dim) replace the policy when given."""
    s = np.atleast_2d(np.asarray(starts, dtype=float))
    for t in range(horizon):
        a = policy(s) if actions is None else actions[t]
        s2 = env.step(s, a)
        buffer.add(s, a, s2)
        s = s2


def joint_train(env, config: WorldModelConfig | None = None,
                rng: np.random.Generator | None = None, callback=None) -> JointResult:
    """Collect real data, fit the world model, improve the policy in imagination.

    With ``config.oracle`` the imagined rollouts use the true recorded
    dynamics and the model is never trained (the ablation baseline).
    """
    cfg = (config or WorldModelConfig()).resolved(env)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    init_rng, data_rng, wm_rng = rng.spawn(3)
    policy = make_policy(env, cfg.hidden, init_rng)
    wm = None if cfg.oracle else WorldModel(env, cfg.feature_dim, cfg.wm_hidden, cfg.ridge, init_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim)
    if cfg.init_trajectories:
        n = cfg.init_trajectories
        acts = data_rng.uniform(env.action_low, env.action_high, size=(cfg.horizon, n, env.action_dim))
        collect(env, policy, buffer, env.sample_states(data_rng, n), cfg.horizon, acts)
    step_fn = env.step_recorded if cfg.oracle else wm.predict
    policy_hist, wm_hist = [], []
    for k in range(cfg.iterations):
        collect(env, policy, buffer, env.initial_states(data_rng, 1), cfg.horizon)
        if wm is not None:
            losses = train_world_model(wm, buffer, cfg.wm_updates, cfg.lr_wm, cfg.batch_wm, wm_rng)
            wm_hist += [{"iter": k, "update": j, "loss": loss} for j, loss in enumerate(losses)]
        n_rand = int(round(cfg.random_start_frac * cfg.batch_policy))
        s_buf = buffer.sample(cfg.batch_policy - n_rand, data_rng)[0]
        s0 = np.concatenate([s_buf, env.sample_states(data_rng, n_rand)])
        try:
            res = rollout(env, policy, s0, cfg.horizon, record=True, step_fn=step_fn)
        except RolloutError as exc:
            raise RolloutError(f"imagined rollout diverged at iteration {k}: {exc}") from exc
        grad = clip_by_norm(res.gradient(), cfg.grad_clip)
        new_theta, cg = natural_gradient_step(policy, grad, res.visited, cfg.lr, cfg.cg_tol,
                                              cfg.cg_max_iter, cfg.cg_damping)
        step_norm = float(np.linalg.norm(new_theta - policy.theta))
        policy.theta = new_theta
        row = {"iter": k, "J": res.J, "grad_norm": float(np.linalg.norm(grad)),
               "step_norm": step_norm, "cg_iters": cg.n_iter}
        policy_hist.append(row)
        if callback is not None:
            callback(row, policy, wm)
    return JointResult(policy, wm, policy_hist, wm_hist, cfg)
