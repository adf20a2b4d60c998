"""Multilayer perceptrons on a flat parameter vector, the deterministic
(Dirac) policy built on them, and the pullback-metric Gram operator.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = "wasspo-mlp v1"


class Mlp:
    """Affine/activation stack over a flat parameter vector.

    Parameters
    ----------
    layers : sequence of int
        ``[n_in, hidden..., n_out]``.
    activation : {"tanh", "identity"}
        Hidden-layer activation.
    output_activation : {"tanh", "identity"}
    output_scale, output_offset : array-like
        Output is ``offset + scale * output_activation(z)``.
    input_scale : array-like
        Non-periodic inputs are divided by this before the first layer.
    periodic : sequence of bool, optional
        Input coordinates that are angles; each is fed to the first layer
        as ``(cos x, sin x)``, so ``layers[0]`` counts two features for it.
    """

    def __init__(self, layers: Sequence[int], activation="tanh", output_activation="tanh",
                 output_scale=1.0, output_offset=0.0, input_scale=1.0, theta=None,
                 periodic=None):
        self.layers = [int(n) for n in layers]
        if len(self.layers) < 2 or min(self.layers) < 1:
            raise ValueError(f"invalid layer sizes {layers}")
        periodic = tuple(bool(p) for p in periodic) if periodic is not None else ()
        if periodic and len(periodic) + sum(periodic) != self.layers[0]:
            raise ValueError("layers[0] must equal input dim plus one per periodic coordinate")
        self.periodic = periodic if any(periodic) else ()
        for act in (activation, output_activation):
            if act not in ("tanh", "identity"):
                raise ValueError(f"unknown activation {act!r}")
        self.activation = activation
        self.output_activation = output_activation
        self.output_scale = np.broadcast_to(np.asarray(output_scale, float), (self.n_out,)).copy()
        self.output_offset = np.broadcast_to(np.asarray(output_offset, float), (self.n_out,)).copy()
        self.input_scale = np.broadcast_to(np.asarray(input_scale, float), (self.n_in,)).copy()
        self.input_scale[list(np.flatnonzero(self.periodic))] = 1.0
        shapes = []
        for n_in, n_out in zip(self.layers[:-1], self.layers[1:]):
            shapes += [(n_in, n_out), (n_out,)]
        self.shapes = shapes
        self.offsets = np.cumsum([0] + [math.prod(s) for s in shapes])
        self.theta = np.zeros(self.n_params) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"theta must have {self.n_params} entries, got {self.theta.shape}")

    @property
    def n_in(self) -> int:
        """Raw input dimension."""
        return len(self.periodic) if self.periodic else self.layers[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1]

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    def copy(self) -> "Mlp":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.theta = self.theta.copy()
        return new

    def init_params(self, rng: np.random.Generator, output_gain: float = 1.0) -> "Mlp":
        """Fan-in scaled uniform initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

        The last weight matrix is additionally multiplied by ``output_gain``;
        a small gain keeps the initial outputs away from saturation.
        """
        parts = []
        last_w = len(self.shapes) - 2
        for k, shape in enumerate(self.shapes):
            fan_in = self.layers[k // 2]
            bound = 1.0 / math.sqrt(fan_in) * (output_gain if k == last_w else 1.0)
            parts.append(rng.uniform(-bound, bound, size=math.prod(shape)))
        self.theta = np.concatenate(parts)
        return self

    def unpack(self, theta=None) -> list:
        """Per-layer ``(W, b)`` views of ``theta`` (array or Var)."""
        theta = self.theta if theta is None else theta
        out = []
        for k, shape in enumerate(self.shapes):
            lo, hi = self.offsets[k], self.offsets[k + 1]
            piece = theta[lo:hi]
            out.append(piece.reshape(shape) if len(shape) == 2 else piece)
        return list(zip(out[0::2], out[1::2]))

    def features(self, x):
        """First-layer input: scaled coordinates, angles as (cos, sin)."""
        if not self.periodic:
            return x / self.input_scale
        cols = []
        for j, per in enumerate(self.periodic):
            xj = x[..., j:j + 1]
            if per:
                cols += [ad.cos(xj), ad.sin(xj)]
            else:
                cols.append(xj / self.input_scale[j])
        return ad.concat(cols, axis=-1)

    def _act(self, name, z):
        return ad.tanh(z) if name == "tanh" else z

    def forward(self, x, theta=None):
        """Network output for inputs ``x`` of shape (..., n_in).

        ``theta`` may be a :class:`~wasspo.autodiff.Var`, in which case the
        whole forward pass is recorded on its tape.
        """
        xv = ad.value_of(x)
        if xv.shape[-1:] != (self.n_in,):
            raise ValueError(f"input must end in dimension {self.n_in}, got {xv.shape}")
        h = self.features(x)
        params = self.unpack(theta)
        for w, b in params[:-1]:
            h = self._act(self.activation, ad.affine(h, w, b))
        w, b = params[-1]
        z = self._act(self.output_activation, ad.affine(h, w, b))
        return self.output_offset + self.output_scale * z

    __call__ = forward

    # per-sample derivatives ---------------------------------------------------
    def _forward_cache(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.n_in)
        hs = [self.features(x)]
        params = self.unpack()
        for k, (w, b) in enumerate(params):
            z = hs[-1] @ w + b
            act = self.output_activation if k == len(params) - 1 else self.activation
            hs.append(np.tanh(z) if act == "tanh" else z)
        return hs, params

    def _act_deriv(self, k, h):
        last = k == len(self.shapes) // 2 - 1
        act = self.output_activation if last else self.activation
        return 1.0 - h * h if act == "tanh" else np.ones_like(h)

    def jacobians(self, x) -> np.ndarray:
        """Per-sample Jacobians ``d out / d theta``, shape (N, n_out, n_params)."""
        hs, params = self._forward_cache(x)
        n = hs[0].shape[0]
        n_layers = len(params)
        # delta[n, k, j]: d out_k / d z_j of the current layer
        delta = np.zeros((n, self.n_out, self.n_out))
        idx = np.arange(self.n_out)
        delta[:, idx, idx] = self.output_scale * self._act_deriv(n_layers - 1, hs[-1])
        blocks = [None] * (2 * n_layers)
        for k in range(n_layers - 1, -1, -1):
            w, _ = params[k]
            blocks[2 * k] = np.einsum("ni,nkj->nkij", hs[k], delta).reshape(n, self.n_out, -1)
            blocks[2 * k + 1] = delta
            if k > 0:
                delta = (delta @ w.T) * self._act_deriv(k - 1, hs[k])[:, None, :]
        return np.concatenate(blocks, axis=2)

    def jvp(self, x, v) -> np.ndarray:
        """``J(x) v`` for every sample, shape (N, n_out)."""
        hs, params = self._forward_cache(x)
        dparams = self.unpack(np.asarray(v, dtype=float))
        dh = np.zeros_like(hs[0])
        for k, ((w, _), (dw, db)) in enumerate(zip(params, dparams)):
            dz = dh @ w + hs[k] @ dw + db
            dh = self._act_deriv(k, hs[k + 1]) * dz
        return self.output_scale * dh

    def vjp(self, x, u) -> np.ndarray:
        """``sum_n J(x_n)^T u_n`` as a flat parameter vector."""
        hs, params = self._forward_cache(x)
        n_layers = len(params)
        delta = np.asarray(u, dtype=float).reshape(-1, self.n_out) * self.output_scale
        delta = delta * self._act_deriv(n_layers - 1, hs[-1])
        grads = [None] * (2 * n_layers)
        for k in range(n_layers - 1, -1, -1):
            w, _ = params[k]
            grads[2 * k] = (hs[k].T @ delta).ravel()
            grads[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ w.T) * self._act_deriv(k - 1, hs[k])
        return np.concatenate(grads)

    # persistence ----------------------------------------------------------------
    def save(self, path) -> None:
        """Plain-text checkpoint; see :func:`load_mlp` for the layout."""
        lines = [
            f"# {CHECKPOINT_MAGIC}",
            "layers " + " ".join(str(n) for n in self.layers),
            f"activation {self.activation}",
            f"output_activation {self.output_activation}",
            "output_scale " + " ".join(f"{x:.17g}" for x in self.output_scale),
            "output_offset " + " ".join(f"{x:.17g}" for x in self.output_offset),
            "input_scale " + " ".join(f"{x:.17g}" for x in self.input_scale),
            "periodic " + " ".join(str(int(p)) for p in (self.periodic or (0,) * self.n_in)),
            f"params {self.n_params}",
        ]
        lines += [f"{x:.17g}" for x in self.theta]
        Path(path).write_text("\n".join(lines) + "\n")


def load_mlp(path) -> Mlp:
    """Read a checkpoint written by :meth:`Mlp.save`.

    Layout: a magic comment line, seven ``key values...`` header lines
    (layers, activation, output_activation, output_scale, output_offset,
    input_scale, periodic as 0/1 flags), ``params N``, then N lines with one parameter each in
    flat order (layer by layer, ``W`` row-major then ``b``).
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != f"# {CHECKPOINT_MAGIC}":
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    header = {}
    i = 1
    while not lines[i].startswith("params"):
        key, *vals = lines[i].split()
        header[key] = vals
        i += 1
    n = int(lines[i].split()[1])
    theta = np.array([float(t) for t in lines[i + 1:i + 1 + n]])
    if theta.size != n:
        raise ValueError(f"{path}: expected {n} parameters, found {theta.size}")
    net = Mlp([int(t) for t in header["layers"]],
              activation=header["activation"][0],
              output_activation=header["output_activation"][0],
              output_scale=[float(t) for t in header["output_scale"]],
              output_offset=[float(t) for t in header["output_offset"]],
              input_scale=[float(t) for t in header["input_scale"]],
              periodic=[bool(int(t)) for t in header["periodic"]],
              theta=theta)
    return net


def make_policy(env, hidden=None, rng=None, output_gain: float = 0.1) -> Mlp:
    """Deterministic policy ``mu_theta`` with outputs inside the action box.

    Angles enter as ``(cos, sin)`` and other coordinates unscaled; the
    output layer starts small (``output_gain``) so early updates do not
    push the tanh output into saturation.
    """
    if hidden is None:
        hidden = (128, 128) if env.name == "oscillators" else (64, 64)
    lo, hi = env.action_low, env.action_high
    half = 0.5 * (hi - lo)
    periodic = tuple(env.periodic)
    net = Mlp([env.state_dim + sum(periodic), *hidden, env.action_dim],
              output_scale=half, output_offset=0.5 * (hi + lo),
              periodic=periodic)
    if rng is not None:
        net.init_params(rng, output_gain)
    return net


class StateBuffer:
    """Bounded FIFO of states with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self._data = np.empty((self.capacity, self.state_dim))
        self._size = 0
        self._head = 0

    def __len__(self):
        return self._size

    def add(self, states) -> None:
        states = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        if len(states) >= self.capacity:
            self._data[:] = states[-self.capacity:]
            self._size, self._head = self.capacity, 0
            return
        idx = (self._head + np.arange(len(states))) % self.capacity
        self._data[idx] = states
        self._head = (self._head + len(states)) % self.capacity
        self._size = min(self.capacity, self._size + len(states))

    def states(self) -> np.ndarray:
        """Contents, oldest first."""
        if self._size < self.capacity:
            return self._data[:self._size].copy()
        return np.roll(self._data, -self._head, axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self._data[rng.integers(0, self._size, size=n)].copy()

    def clear(self) -> None:
        self._size = 0
        self._head = 0


class GramOperator:
    """``v -> (1/N) sum_s J_s^T J_s v`` over a fixed batch of states.

    Per-state Jacobians are computed once and cached when they fit in
    ``max_cache_entries`` floats; larger batches fall back to a matrix-free
    Jacobian-vector / vector-Jacobian product pair with identical values.
    """

    def __init__(self, net: Mlp, states, max_cache_entries: int = 30_000_000):
        states = np.asarray(states, dtype=float).reshape(-1, net.n_in)
        if len(states) == 0:
            raise ValueError("metric buffer is empty")
        self.net = net.copy()
        self.states = states
        self.n = len(states)
        self.cached = self.n * net.n_out * net.n_params <= max_cache_entries
        self._jac = None
        if self.cached:
            self._jac = self.net.jacobians(states).reshape(-1, net.n_params)

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.cached:
            return self._jac.T @ (self._jac @ v) / self.n
        return self.net.vjp(self.states, self.net.jvp(self.states, v)) / self.n

    def matrix(self) -> np.ndarray:
        """Explicit Gram matrix (testing and small networks only)."""
        jac = self.net.jacobians(self.states).reshape(-1, self.net.n_params)
        return jac.T @ jac / self.n


def gram_matvec(net: Mlp, states, v) -> np.ndarray:
    return GramOperator(net, states)(v)
