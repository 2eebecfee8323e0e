"""Fully-connected velocity field with a hand-written reverse pass.

All parameters live in one flat float64 vector; per-layer weights and biases
are views into it.  That keeps the optimizer, the EMA shadow, finite
differences and checkpointing trivially shape-compatible.
"""

from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import DimensionError, StateError


def time_embedding(tau, dim):
    """Sinusoidal features ``[sin(tau f_k), cos(tau f_k)]`` with ``f_k`` log-spaced in [1, 100]."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(100.0), half))
    ang = tau * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, tau], axis=1)
    return emb


@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by :meth:`VelocityField.backward`.

    A tape may be replayed any number of times with different output
    gradients; it refers to the parameter vector used in the forward pass.
    """

    inputs: list
    batched: bool
    params_id: int


class VelocityField:
    """``v(M, tau, o)``: tanh MLP over ``concat(flatten(M), embed(tau), o)``."""

    def __init__(self, horizon, action_dim, obs_dim, hidden=(128, 128),
                 time_embed_dim=16, rng=0, params=None):
        self.horizon = int(horizon)
        self.action_dim = int(action_dim)
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_embed_dim = int(time_embed_dim)
        self.out_dim = self.horizon * self.action_dim
        self.in_dim = self.out_dim + self.time_embed_dim + self.obs_dim
        self.sizes = (self.in_dim, *self.hidden, self.out_dim)
        self.shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        self.num_params = sum(a * b + b for a, b in self.shapes)
        self.nfe = 0
        if params is None:
            params = self.init_params(rng)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got {params.shape}")
        self.params = params.copy()

    def init_params(self, rng):
        """Glorot-uniform weights, zero biases."""
        rng = _rng.as_generator(rng)
        chunks = []
        for fan_in, fan_out in self.shapes:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def layers(self, params=None):
        p = self.params if params is None else params
        out, k = [], 0
        for fan_in, fan_out in self.shapes:
            W = p[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = p[k:k + fan_out]
            k += fan_out
            out.append((W, b))
        return out

    def clone(self, params=None):
        net = VelocityField.__new__(VelocityField)
        net.__dict__.update(self.__dict__)
        net.params = (self.params if params is None else np.asarray(params, dtype=np.float64)).copy()
        net.nfe = 0
        return net

    # -- forward / backward ----------------------------------------------

    def _inputs(self, state, tau, obs):
        state = np.asarray(state, dtype=np.float64)
        batched = state.ndim == 3
        if not batched:
            state = state[None]
        if state.shape[1:] != (self.horizon, self.action_dim):
            raise DimensionError(
                f"flow state has shape {state.shape[1:]}, expected "
                f"{(self.horizon, self.action_dim)}"
            )
        B = state.shape[0]
        obs = np.asarray(getattr(obs, "values", obs), dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim or obs.shape[0] not in (1, B):
            raise DimensionError(
                f"observation shape {obs.shape} does not match obs_dim={self.obs_dim} "
                f"for batch {B}"
            )
        if obs.shape[0] == 1 and B > 1:
            obs = np.broadcast_to(obs, (B, self.obs_dim))
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), (B,))
        x = np.concatenate(
            [state.reshape(B, -1), time_embedding(tau, self.time_embed_dim), obs], axis=1
        )
        return x, batched

    def forward(self, state, tau, obs, params=None, record=False):
        """Velocity ``(B, L, d)`` (or ``(L, d)`` for unbatched input).

        With ``record=True`` returns ``(velocity, tape)``.
        """
        p = self.params if params is None else params
        x, batched = self._inputs(state, tau, obs)
        self.nfe += 1
        layers = self.layers(p)
        inputs = [x]
        h = x
        for i, (W, b) in enumerate(layers):
            h = h @ W + b
            if i < len(layers) - 1:
                h = np.tanh(h)
                inputs.append(h)
        out = h.reshape(-1, self.horizon, self.action_dim)
        if not batched:
            out = out[0]
        if record:
            return out, Tape(inputs, batched, id(p))
        return out

    __call__ = forward

    def backward(self, tape, grad_output, params=None):
        """Gradient of ``sum(grad_output * v)`` w.r.t. the parameters."""
        if not isinstance(tape, Tape):
            raise StateError("backward needs a tape from forward(..., record=True)")
        p = self.params if params is None else params
        if id(p) != tape.params_id:
            raise StateError("tape was recorded with a different parameter vector")
        g = np.asarray(grad_output, dtype=np.float64)
        if not tape.batched:
            g = g[None]
        g = g.reshape(tape.inputs[0].shape[0], self.out_dim)
        layers = self.layers(p)
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_in = tape.inputs[i]
            grads.append((h_in.T @ g).ravel())
            grads.append(g.sum(axis=0))
            if i > 0:
                g = (g @ W.T) * (1.0 - h_in * h_in)
        # grads were collected last layer first as (dW, db) pairs
        ordered = []
        for k in range(len(grads) - 2, -1, -2):
            ordered.append(grads[k])
            ordered.append(grads[k + 1])
        return np.concatenate(ordered)

    # -- serialization ---------------------------------------------------

    def architecture(self):
        return {
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "obs_dim": self.obs_dim,
            "hidden": list(self.hidden),
            "time_embed_dim": self.time_embed_dim,
            "layer_shapes": [list(s) for s in self.shapes],
        }

    @classmethod
    def from_architecture(cls, arch, params):
        return cls(arch["horizon"], arch["action_dim"], arch["obs_dim"], arch["hidden"],
                   arch["time_embed_dim"], params=params)


@dataclass
class EmaShadow:
    params: np.ndarray
    max_decay: float = 0.9999

    @classmethod
    def of(cls, net, max_decay=0.9999):
        return cls(net.params.copy(), max_decay)


def ema_decay(step, max_decay=0.9999):
    """Warmup-capped decay ``min(max_decay, (1 + step) / (10 + step))``."""
    return min(max_decay, (1.0 + step) / (10.0 + step))


def ema_update(shadow, live, step, decay=None):
    """In place: ``shadow <- beta shadow + (1 - beta) live``. Returns ``shadow``."""
    live_params = getattr(live, "params", live)
    if shadow.params.shape != live_params.shape:
        raise DimensionError(
            f"shadow has {shadow.params.shape} parameters, live has {live_params.shape}"
        )
    beta = ema_decay(step, shadow.max_decay) if decay is None else float(decay)
    shadow.params *= beta
    shadow.params += (1.0 - beta) * live_params
    return shadow
