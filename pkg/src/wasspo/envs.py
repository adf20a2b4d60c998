"""Benchmark control systems: scalar regulator, inverted pendulum and a chain
of coupled Duffing oscillators.

States and actions are arrays with the coordinate on the last axis, so any
leading batch shape works. ``step`` and ``cost`` accept plain arrays;
``step_recorded`` accepts :class:`~wasspo.autodiff.Var` inputs and records
every intermediate on their tape.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ScalarRegulatorParams:
    alpha: float = 0.5
    beta: float = 0.1
    delta: float = 0.2
    sigma: float = 0.2
    lambda_a: float = 0.1
    s_min: float = -3.0
    s_max: float = 3.0
    a_min: float = -5.0
    a_max: float = 5.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (self.s_min < self.s_max and self.a_min < self.a_max):
            raise ValueError("state and action bounds must be non-degenerate")


@dataclass(frozen=True)
class PendulumParams:
    g: float = 10.0
    m: float = 1.0
    l: float = 1.0
    dt: float = 0.05
    thetadot_max: float = 8.0
    u_max: float = 2.0
    w_thetadot: float = 0.1
    w_u: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass(frozen=True)
class OscillatorParams:
    n: int = 5
    k: float = 1.0
    alpha_duff: float = 1.0
    beta_damp: float = 0.1
    repel_amp: float = 10.0
    repel_width: float = 1.0
    dt: float = 0.05
    x_max: float = 5.0
    v_max: float = 5.0
    u_max: float = 5.0
    w_v: float = 0.1
    w_u: float = 0.001

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("n must be an integer >= 2")
        if self.repel_width <= 0 or self.dt <= 0:
            raise ValueError("repel_width and dt must be positive")
        if min(self.x_max, self.v_max, self.u_max) <= 0:
            raise ValueError("limits must be positive")


class Env:
    """Common surface of the three systems."""

    name: str
    state_dim: int
    action_dim: int
    dt: float
    periodic: tuple[bool, ...]

    def __init__(self, params):
        self.params = params

    def __repr__(self):
        return f"{type(self).__name__}({self.params!r})"

    # bounds -----------------------------------------------------------------
    @property
    def state_low(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def state_high(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def action_low(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def action_high(self) -> np.ndarray:
        raise NotImplementedError

    # dynamics ---------------------------------------------------------------
    def _transition(self, s, a, noise, abs_fn):
        raise NotImplementedError

    def _cost(self, s, a):
        raise NotImplementedError

    def _check(self, s, a, noise):
        s_shape, a_shape = ad.value_of(s).shape, ad.value_of(a).shape
        if not s_shape or s_shape[-1] != self.state_dim:
            raise ValueError(f"state must end in dimension {self.state_dim}, got {s_shape}")
        if not a_shape or a_shape[-1] != self.action_dim:
            raise ValueError(f"action must end in dimension {self.action_dim}, got {a_shape}")
        if noise is not None and np.shape(noise)[-1:] != (self.state_dim,):
            raise ValueError(f"noise must end in dimension {self.state_dim}")

    def step(self, s, a, noise=None) -> np.ndarray:
        """Next state for plain-array inputs (``noise=None`` is deterministic)."""
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        self._check(s, a, noise)
        return self._transition(s, a, noise, np.abs)

    def step_recorded(self, s, a, noise=None):
        """Same dynamics, recorded on the tape of ``s``/``a``.

        ``|.|`` is replaced by :func:`~wasspo.autodiff.abs_smoothed`.
        """
        self._check(s, a, noise)
        return self._transition(s, a, noise, ad.abs_smoothed)

    def cost(self, s, a):
        """Immediate cost, shape ``s.shape[:-1]``; records when given Vars."""
        self._check(s, a, None)
        return self._cost(s, a)

    def normalize(self, s):
        """Canonical representative of a state (angle wrapping); no clipping."""
        return s

    def state_delta(self, s_next, s):
        """``s_next - s`` with periodic coordinates wrapped."""
        return np.asarray(s_next, dtype=float) - np.asarray(s, dtype=float)

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.state_low, self.state_high, size=(n, self.state_dim))

    def sample_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.action_low, self.action_high, size=(n, self.action_dim))

    def initial_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Start-buffer seed states."""
        return self.sample_states(rng, n)


class ScalarRegulator(Env):
    name = "scalar"
    state_dim = 1
    action_dim = 1
    dt = 1.0
    periodic = (False,)

    def __init__(self, params: ScalarRegulatorParams | None = None):
        super().__init__(params or ScalarRegulatorParams())

    @property
    def state_low(self):
        return np.array([self.params.s_min])

    @property
    def state_high(self):
        return np.array([self.params.s_max])

    @property
    def action_low(self):
        return np.array([self.params.a_min])

    @property
    def action_high(self):
        return np.array([self.params.a_max])

    def drift(self, s):
        """Deterministic part ``alpha*s + beta*sin(s)`` (no action)."""
        p = self.params
        return p.alpha * s + p.beta * ad.sin(s)

    def _transition(self, s, a, noise, abs_fn):
        p = self.params
        raw = p.alpha * s + p.beta * ad.sin(s) + p.delta * a
        if noise is not None:
            raw = raw + noise
        return ad.clip(raw, p.s_min, p.s_max)

    def _cost(self, s, a):
        return ad.square(s[..., 0]) + self.params.lambda_a * ad.square(a[..., 0])

    def sample_noise(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        return rng.normal(0.0, self.params.sigma, size=tuple(shape) + (1,))


class Pendulum(Env):
    """Angle measured from upright; hanging down is ``theta = +-pi``."""

    name = "pendulum"
    state_dim = 2
    action_dim = 1
    periodic = (True, False)

    def __init__(self, params: PendulumParams | None = None):
        super().__init__(params or PendulumParams())
        self.dt = self.params.dt

    @property
    def state_low(self):
        return np.array([-math.pi, -self.params.thetadot_max])

    @property
    def state_high(self):
        return np.array([math.pi, self.params.thetadot_max])

    @property
    def action_low(self):
        return np.array([-self.params.u_max])

    @property
    def action_high(self):
        return np.array([self.params.u_max])

    def _transition(self, s, a, noise, abs_fn):
        p = self.params
        th, thd, u = s[..., 0], s[..., 1], a[..., 0]
        # -(3g/2l) sin(theta + pi) written as +(3g/2l) sin(theta): exact at theta = 0
        acc = (3.0 * p.g / (2.0 * p.l)) * ad.sin(th) + (3.0 / (p.m * p.l**2)) * u
        thd_raw = thd + p.dt * acc
        if noise is not None:
            thd_raw = thd_raw + noise[..., 1]
        thd_next = ad.clip(thd_raw, -p.thetadot_max, p.thetadot_max)
        th_raw = th + p.dt * thd_next
        if noise is not None:
            th_raw = th_raw + noise[..., 0]
        th_next = ad.wrap_angle(th_raw)
        return ad.stack([th_next, thd_next], axis=-1)

    def _cost(self, s, a):
        p = self.params
        return (ad.square(s[..., 0]) + p.w_thetadot * ad.square(s[..., 1])
                + p.w_u * ad.square(a[..., 0]))

    def normalize(self, s):
        th = ad.wrap_angle(s[..., 0])
        return ad.stack([th, s[..., 1]], axis=-1)

    def state_delta(self, s_next, s):
        d = np.asarray(s_next, dtype=float) - np.asarray(s, dtype=float)
        d[..., 0] = ad.wrap_angle(d[..., 0])
        return d

    def initial_states(self, rng, n):
        """Half near the hanging position, half uniform over the box."""
        n_down = n // 2
        down = np.empty((n_down, 2))
        down[:, 0] = ad.wrap_angle(math.pi + rng.uniform(-0.3, 0.3, size=n_down))
        down[:, 1] = rng.uniform(-0.5, 0.5, size=n_down)
        return np.concatenate([down, self.sample_states(rng, n - n_down)], axis=0)

    def hanging_state(self) -> np.ndarray:
        return np.array([math.pi, 0.0])


class Oscillators(Env):
    """Chain of ``n`` masses between fixed walls at ``x = 0``.

    State layout is ``(x_1..x_n, v_1..v_n)``; actions are one force per mass.
    """

    name = "oscillators"
    periodic = ()

    def __init__(self, params: OscillatorParams | None = None):
        super().__init__(params or OscillatorParams())
        n = int(self.params.n)
        self.n = n
        self.state_dim = 2 * n
        self.action_dim = n
        self.dt = self.params.dt
        self.periodic = (False,) * (2 * n)

    @property
    def state_low(self):
        p = self.params
        return np.concatenate([np.full(self.n, -p.x_max), np.full(self.n, -p.v_max)])

    @property
    def state_high(self):
        return -self.state_low

    @property
    def action_low(self):
        return np.full(self.n, -self.params.u_max)

    @property
    def action_high(self):
        return np.full(self.n, self.params.u_max)

    def forces(self, x, v, abs_fn=np.abs) -> dict:
        """Per-mass force components for positions ``x`` and velocities ``v``."""
        p = self.params
        wall = np.zeros(ad.value_of(x).shape[:-1] + (1,))
        x_left = ad.concat([wall, x[..., :-1]], axis=-1)
        x_right = ad.concat([x[..., 1:], wall], axis=-1)
        spring = p.k * (x_right - 2.0 * x + x_left)
        push_left = p.repel_amp * ad.exp(-abs_fn(x - x_left) / p.repel_width)
        push_right = p.repel_amp * ad.exp(-abs_fn(x_right - x) / p.repel_width)
        return {
            "spring": spring,
            "repulsion": push_left - push_right,
            "duffing": -p.alpha_duff * (ad.square(x) * x),
            "damping": -p.beta_damp * v,
        }

    def _transition(self, s, a, noise, abs_fn):
        p, n = self.params, self.n
        x, v = s[..., :n], s[..., n:]
        f = self.forces(x, v, abs_fn)
        acc = f["spring"] + f["repulsion"] + f["duffing"] + f["damping"] + a
        v_raw = v + p.dt * acc
        if noise is not None:
            v_raw = v_raw + noise[..., n:]
        v_next = ad.clip(v_raw, -p.v_max, p.v_max)
        x_raw = x + p.dt * v_next
        if noise is not None:
            x_raw = x_raw + noise[..., :n]
        x_next = ad.clip(x_raw, -p.x_max, p.x_max)
        return ad.concat([x_next, v_next], axis=-1)

    def _cost(self, s, a):
        p, n = self.params, self.n
        x, v = s[..., :n], s[..., n:]
        per_mass = ad.square(x) + p.w_v * ad.square(v) + p.w_u * ad.square(a)
        return ad.vsum(per_mass, axis=-1)

    def alternating_state(self, amplitude: float = 1.0) -> np.ndarray:
        """Displacements ``+a, -a, +a, ...`` at rest."""
        x = amplitude * np.array([(-1.0) ** i for i in range(self.n)])
        return np.concatenate([x, np.zeros(self.n)])

    def initial_states(self, rng, n):
        """Alternating pattern (both signs, jittered) plus uniform states in a
        half-size box."""
        n_alt = n // 2
        signs = np.where(np.arange(n_alt) % 2 == 0, 1.0, -1.0)[:, None]
        alt = signs * self.alternating_state()[None, :]
        alt = alt + rng.normal(0.0, 0.1, size=alt.shape) * np.r_[np.ones(self.n), np.zeros(self.n)]
        box = 0.5 * self.sample_states(rng, n - n_alt)
        return np.concatenate([alt, box], axis=0)


ENV_CLASSES = {"scalar": (ScalarRegulator, ScalarRegulatorParams),
               "pendulum": (Pendulum, PendulumParams),
               "oscillators": (Oscillators, OscillatorParams)}


def param_names(name: str) -> list[str]:
    return [f.name for f in dataclasses.fields(ENV_CLASSES[name][1])]


def make_env(name: str, **overrides) -> Env:
    """Build an environment by name with selected default parameters overridden."""
    if name not in ENV_CLASSES:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_CLASSES)}")
    cls, params_cls = ENV_CLASSES[name]
    unknown = set(overrides) - set(param_names(name))
    if unknown:
        raise ValueError(f"unknown {name} parameters: {sorted(unknown)}")
    return cls(params_cls(**overrides))
