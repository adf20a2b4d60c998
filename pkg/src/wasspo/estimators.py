"""scikit-learn style estimators over the solvers.

Every estimator takes its hyperparameters in ``__init__`` (so ``get_params``
and ``set_params`` work), does its work in ``fit`` and exposes fitted state
through trailing-underscore attributes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import envs
from .grid import GridConfig, policy_iteration
from .trajopt import OptimizerConfig, rollout, train
from .world_model import ReplayBuffer, WorldModel, WorldModelConfig, joint_train, train_world_model


def _make_env(name, env_params):
    return envs.make_env(name, **(env_params or {}))


def _seed_rng(random_state):
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def _check_states(env, X):
    X = check_array(X, ensure_2d=False, dtype=float)
    X = X.reshape(-1, env.state_dim) if X.ndim == 1 else X
    if X.shape[1] != env.state_dim:
        raise ValueError(f"expected {env.state_dim} state columns, got {X.shape[1]}")
    return X


class GridPolicyIteration(BaseEstimator):
    """Particle policy iteration on a state lattice.

    Parameters
    ----------
    env : {"scalar", "pendulum"}
    env_params : dict, optional
        Environment parameter overrides.
    resolution : tuple of int, optional
        Points per state axis; environment default if omitted.
    n_particles : int
        Action particles per grid state.
    kernel_sigma : float, optional
        Gaussian smoothing bandwidth of the grid kernel.
    gamma : float
        Discount; ``1`` selects the centred average-cost evaluation.
    lr : float
        Particle step size.
    iterations : int
    random_state : int or Generator

    Attributes
    ----------
    grid_, particles_, value_, history_, avg_cost_
    """

    def __init__(self, env="scalar", env_params=None, resolution=None, n_particles=3,
                 kernel_sigma=None, gamma=0.95, lr=1.0, iterations=50, random_state=0):
        self.env = env
        self.env_params = env_params
        self.resolution = resolution
        self.n_particles = n_particles
        self.kernel_sigma = kernel_sigma
        self.gamma = gamma
        self.lr = lr
        self.iterations = iterations
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Run policy iteration; ``X`` and ``y`` are ignored."""
        env = _make_env(self.env, self.env_params)
        cfg = GridConfig(self.resolution, self.n_particles, self.kernel_sigma, self.gamma,
                         self.lr, self.iterations)
        res = policy_iteration(env, cfg, _seed_rng(self.random_state))
        self.env_ = env
        self.result_ = res
        self.grid_ = res.grid
        self.particles_ = res.particles
        self.value_ = res.solution.v
        self.history_ = res.history
        self.avg_cost_ = res.history[-1]["avg_cost"]
        return self

    def _nearest(self, X):
        idx = []
        for k, axis in enumerate(self.grid_.axes):
            x = X[:, k]
            d = x[:, None] - axis[None, :]
            if self.grid_.periodic[k]:
                d = np.angle(np.exp(1j * d))
            idx.append(np.argmin(np.abs(d), axis=1))
        return np.ravel_multi_index(tuple(idx), self.grid_.shape)

    def predict(self, X):
        """Particle-mean action of the nearest grid state."""
        check_is_fitted(self, "particles_")
        X = _check_states(self.env_, X)
        return self.particles_.mean(axis=1)[self._nearest(X)]

    def value(self, X):
        """Value of the nearest grid state."""
        check_is_fitted(self, "value_")
        return self.value_[self._nearest(_check_states(self.env_, X))]


class _PolicyMixin:
    def predict(self, X):
        """Deterministic policy action for each state row."""
        check_is_fitted(self, "policy_")
        return self.policy_(_check_states(self.env_, X))

    def score(self, X, y=None, horizon=None):
        """Negative mean per-step cost of closed-loop rollouts from ``X``."""
        check_is_fitted(self, "policy_")
        X = _check_states(self.env_, X)
        h = horizon or self.config_.horizon
        return -rollout(self.env_, self.policy_, X, h, record=False).J


class TrajectoryOptimizer(_PolicyMixin, BaseEstimator):
    """MLP policy trained through differentiable rollouts.

    Parameters mirror :class:`wasspo.trajopt.OptimizerConfig`;
    ``random_state`` seeds initialization and start sampling.
    """

    def __init__(self, env="pendulum", env_params=None, method="adam", lr=None, horizon=None,
                 batch_size=16, iterations=300, cg_tol=1e-10, cg_max_iter=20, cg_damping=1e-2,
                 grad_clip=None, start_mix=0.5, hidden=None, random_state=0):
        self.env = env
        self.env_params = env_params
        self.method = method
        self.lr = lr
        self.horizon = horizon
        self.batch_size = batch_size
        self.iterations = iterations
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self.cg_damping = cg_damping
        self.grad_clip = grad_clip
        self.start_mix = start_mix
        self.hidden = hidden
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Optimize the policy; ``X`` and ``y`` are ignored."""
        env = _make_env(self.env, self.env_params)
        cfg = OptimizerConfig(method=self.method, lr=self.lr, horizon=self.horizon,
                              batch_size=self.batch_size, iterations=self.iterations,
                              cg_tol=self.cg_tol, cg_max_iter=self.cg_max_iter,
                              cg_damping=self.cg_damping, grad_clip=self.grad_clip,
                              start_mix=self.start_mix, hidden=self.hidden)
        res = train(env, cfg, _seed_rng(self.random_state))
        self.env_ = env
        self.policy_ = res.policy
        self.history_ = res.history
        self.config_ = res.config
        return self


class VarProWorldModel(RegressorMixin, BaseEstimator):
    """Learned one-step dynamics ``s' = s + dt [Body(s, a), 1] W``.

    ``fit(X, y)`` takes rows ``X = [s, a]`` and next states ``y = s'``.

    Parameters
    ----------
    env : str
        Environment whose dimensions, ``dt`` and angle convention apply.
    feature_dim, hidden : body width and hidden layers
    ridge : float
        Head ridge penalty.
    lr : float
        Body gradient step.
    n_updates, batch_size : int
        Alternating head-solve / body-step rounds and rows per round.
    """

    def __init__(self, env="pendulum", env_params=None, feature_dim=128, hidden=(128,),
                 ridge=1e-3, lr=0.2, n_updates=200, batch_size=256, random_state=0):
        self.env = env
        self.env_params = env_params
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.ridge = ridge
        self.lr = lr
        self.n_updates = n_updates
        self.batch_size = batch_size
        self.random_state = random_state

    def _split(self, X):
        X = check_array(X, dtype=float)
        n = self.env_.state_dim
        if X.shape[1] != n + self.env_.action_dim:
            raise ValueError(f"X must have {n + self.env_.action_dim} columns [s, a]")
        return X[:, :n], X[:, n:]

    def fit(self, X, y):
        self.env_ = _make_env(self.env, self.env_params)
        s, a = self._split(X)
        y = check_array(y, dtype=float)
        if y.shape != s.shape:
            raise ValueError(f"y must have shape {s.shape}, got {y.shape}")
        rng = _seed_rng(self.random_state)
        wm = WorldModel(self.env_, self.feature_dim, tuple(self.hidden), self.ridge, rng)
        buf = ReplayBuffer(len(s), self.env_.state_dim, self.env_.action_dim)
        buf.add(s, a, y)
        self.loss_curve_ = train_world_model(wm, buf, self.n_updates, self.lr, self.batch_size, rng)
        wm.fit_head(s, a, y)
        self.model_ = wm
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        s, a = self._split(X)
        return np.asarray(self.model_.predict(s, a))

    def score(self, X, y, sample_weight=None):
        """Negative mean squared one-step error, angle differences wrapped."""
        check_is_fitted(self, "model_")
        s, a = self._split(X)
        return -self.model_.one_step_error(s, a, check_array(y, dtype=float))


class ModelBasedPolicy(_PolicyMixin, BaseEstimator):
    """Policy trained in imagination through a jointly learned world model.

    With ``oracle=True`` the imagined rollouts use the true dynamics.
    Parameters mirror :class:`wasspo.world_model.WorldModelConfig`.
    """

    def __init__(self, env="pendulum", env_params=None, iterations=300, horizon=None,
                 batch_policy=32, batch_wm=256, wm_updates=50, lr_wm=0.2, feature_dim=128,
                 wm_hidden=(128,), ridge=1e-3, lr=0.02, cg_max_iter=20, cg_damping=1e-2,
                 random_start_frac=0.1, init_trajectories=20, hidden=None, oracle=False,
                 random_state=0):
        self.env = env
        self.env_params = env_params
        self.iterations = iterations
        self.horizon = horizon
        self.batch_policy = batch_policy
        self.batch_wm = batch_wm
        self.wm_updates = wm_updates
        self.lr_wm = lr_wm
        self.feature_dim = feature_dim
        self.wm_hidden = wm_hidden
        self.ridge = ridge
        self.lr = lr
        self.cg_max_iter = cg_max_iter
        self.cg_damping = cg_damping
        self.random_start_frac = random_start_frac
        self.init_trajectories = init_trajectories
        self.hidden = hidden
        self.oracle = oracle
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Run joint model learning and policy optimization; ``X``, ``y`` ignored."""
        env = _make_env(self.env, self.env_params)
        cfg = WorldModelConfig(
            iterations=self.iterations, horizon=self.horizon, batch_policy=self.batch_policy,
            batch_wm=self.batch_wm, wm_updates=self.wm_updates, lr_wm=self.lr_wm,
            feature_dim=self.feature_dim, wm_hidden=tuple(self.wm_hidden), ridge=self.ridge,
            lr=self.lr, cg_max_iter=self.cg_max_iter, cg_damping=self.cg_damping,
            random_start_frac=self.random_start_frac, init_trajectories=self.init_trajectories,
            hidden=self.hidden, oracle=self.oracle)
        res = joint_train(env, cfg, _seed_rng(self.random_state))
        self.env_ = env
        self.policy_ = res.policy
        self.world_model_ = res.world_model
        self.history_ = res.policy_history
        self.wm_history_ = res.wm_history
        self.config_ = res.config
        return self
