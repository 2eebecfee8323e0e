"""OT-path interpolation, terminal prediction, inference and rollouts."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, RangeError
from .trajectory import Normalizer, observation_at, observation_features


@dataclass
class FlowState:
    state: np.ndarray
    time: float
    observation: object = None

    def __post_init__(self):
        t = np.asarray(self.time, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise RangeError(f"flow time must lie in [0, 1], got {self.time}")


def _time_column(t, x):
    """Broadcast a scalar or per-sample time against an ``(..., L, d)`` array."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if x.ndim != 3 or t.shape != (x.shape[0],):
        raise DimensionError(f"per-sample times {t.shape} do not match batch {x.shape}")
    return t[:, None, None]


def ot_interpolate(m0, m1, t):
    """``(1 - t) m0 + t m1``; ``t`` may be a scalar or one time per batch row."""
    m0 = np.asarray(m0, dtype=np.float64)
    m1 = np.asarray(m1, dtype=np.float64)
    if m0.shape != m1.shape:
        raise DimensionError(f"noise shape {m0.shape} != target shape {m1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise RangeError(f"interpolation time must lie in [0, 1], got {t}")
    tc = _time_column(t_arr, m0)
    if t_arr.ndim == 0:
        if t_arr == 0.0:
            return m0.copy()
        if t_arr == 1.0:
            return m1.copy()
    out = (1.0 - tc) * m0 + tc * m1
    if t_arr.ndim:
        # exact endpoints per row
        out[t_arr == 0.0] = m0[t_arr == 0.0]
        out[t_arr == 1.0] = m1[t_arr == 1.0]
    return out


def terminal_prediction(x, t, v):
    """``x + (1 - t) v`` for array inputs."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise DimensionError(f"velocity shape {v.shape} != state shape {x.shape}")
    return x + (1.0 - _time_column(t, x)) * v


def terminal_map(v, state):
    """Predicted clean trajectory from a flow state: ``state + (1 - time) v``."""
    return terminal_prediction(state.state, state.time, v)


def _obs_values(obs):
    return np.asarray(getattr(obs, "values", obs), dtype=np.float64)


def one_step_infer(net, obs, rng, params=None):
    """Draw ``M_0 ~ N(0, I)`` and map it to the terminal prediction with one evaluation."""
    o = _obs_values(obs)
    shape = (net.horizon, net.action_dim) if o.ndim == 1 else (o.shape[0], net.horizon, net.action_dim)
    m0 = rng.standard_normal(shape)
    v = net.forward(m0, 0.0, o, params=params)
    return terminal_prediction(m0, 0.0, v)


def euler_infer(net, obs, rng, steps=10, params=None):
    """Multi-step Euler integration of the learned ODE (the plain flow-matching arm)."""
    o = _obs_values(obs)
    shape = (net.horizon, net.action_dim) if o.ndim == 1 else (o.shape[0], net.horizon, net.action_dim)
    x = rng.standard_normal(shape)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * net.forward(x, k * dt, o, params=params)
    return x


@dataclass
class Policy:
    """A velocity field plus everything needed to act in raw task coordinates."""

    field: object
    normalizer: Normalizer
    chunk_size: int = 4
    num_chunks: int = 3
    n_obs: int = 2
    params: np.ndarray = None
    inference: str = "one_step"
    euler_steps: int = 10

    @property
    def horizon(self):
        return self.chunk_size * self.num_chunks

    def predict_normalized(self, obs_norm, rng):
        if self.inference == "euler":
            return euler_infer(self.field, obs_norm, rng, self.euler_steps, params=self.params)
        return one_step_infer(self.field, obs_norm, rng, params=self.params)

    def act(self, obs, rng):
        """Raw-coordinate ``(L, d)`` actions for a raw observation."""
        feats = observation_features(_obs_values(obs), self.n_obs, self.field.action_dim)
        o = self.normalizer.normalize_obs(feats)
        return self.normalizer.denormalize_actions(self.predict_normalized(o, rng))

    @property
    def nfe_per_decision(self):
        return self.euler_steps if self.inference == "euler" else 1


class TaskEnv:
    """Kinematic point environment replaying a demonstration's start and context.

    The position integrates executed actions; the observation is built from
    the realized history (demonstration history before ``start``).
    """

    def __init__(self, demo, start=0, n_obs=2):
        if not 0 <= start < demo.length:
            raise RangeError(f"start {start} outside demonstration of length {demo.length}")
        self.demo = demo
        self.start = start
        self.n_obs = n_obs
        self.reset()

    def reset(self):
        self.history = [s for s in self.demo.states[:self.start + 1]]
        return self.observation()

    @property
    def t(self):
        return len(self.history) - 1

    @property
    def position(self):
        return self.history[-1]

    @property
    def remaining(self):
        return self.demo.length - self.t

    def observation(self):
        return observation_at(np.asarray(self.history), self.t, self.n_obs, self.demo.context)

    def step(self, action):
        self.history.append(self.history[-1] + np.asarray(action, dtype=np.float64))

    def expert_actions(self, start, count):
        return self.demo.actions[start:start + count]


class ExpertOracle:
    """Velocity field returning the exact straight-flow velocity toward the expert future.

    Bound to an environment: the target is the normalized expert macro-trajectory
    starting at the environment's current step (zero-padded past the demo end).
    """

    def __init__(self, env, normalizer, horizon):
        self.env = env
        self.normalizer = normalizer
        self.horizon = horizon
        self.action_dim = env.demo.dim
        self.nfe = 0

    def target(self):
        a = self.env.expert_actions(self.env.t, self.horizon)
        if a.shape[0] < self.horizon:
            a = np.vstack([a, np.zeros((self.horizon - a.shape[0], self.action_dim))])
        return self.normalizer.normalize_actions(a)

    def forward(self, state, tau, obs, params=None):
        self.nfe += 1
        state = np.asarray(state, dtype=np.float64)
        tau = float(np.asarray(tau).ravel()[0])
        return (self.target() - state) / (1.0 - tau)

    __call__ = forward


@dataclass
class RolloutTrace:
    mode: str
    start: int
    positions: np.ndarray
    actions: np.ndarray
    expert_positions: np.ndarray
    expert_actions: np.ndarray
    inference_calls: int
    nfe: int
    truncated: bool = False
    goal: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def length(self):
        return self.actions.shape[0]

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("positions", "actions", "expert_positions", "expert_actions", "goal"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)


def _path(origin, actions):
    return np.cumsum(np.vstack([origin[None, :], actions]), axis=0)


def rollout(policy, env, exec_steps=4, mode="closed_loop", max_steps=None, rng=None):
    """Run a policy in ``env``.

    ``open_loop``: predict once from the current observation and integrate all
    ``L`` actions from the origin, with no re-observation.
    ``closed_loop``: predict ``L`` actions, execute the first ``exec_steps``,
    re-observe, repeat until the demonstration's remaining length or
    ``max_steps`` (then the trace is marked truncated) is reached.
    """
    from .trajectory import task_goal

    if rng is None:
        rng = np.random.default_rng(0)
    L = policy.horizon
    env.reset()
    nfe0 = getattr(policy.field, "nfe", 0)
    start = env.t
    if mode == "open_loop":
        if start + L > env.demo.length:
            raise RangeError(f"open-loop rollout from {start} needs {L} expert steps")
        pred = policy.act(env.observation(), rng)
        origin = np.zeros(env.demo.dim)
        expert = env.expert_actions(start, L)
        return RolloutTrace(
            mode, start, _path(origin, pred), pred, _path(origin, expert), expert,
            inference_calls=1, nfe=getattr(policy.field, "nfe", 0) - nfe0,
            goal=None,
        )
    if mode != "closed_loop":
        raise ValueError(f"unknown rollout mode {mode!r}")
    if not 1 <= exec_steps <= L:
        raise RangeError(f"exec_steps must lie in [1, {L}], got {exec_steps}")
    horizon = env.remaining
    budget = horizon if max_steps is None else min(horizon, max_steps)
    truncated = max_steps is not None and max_steps < horizon
    executed, calls = [], 0
    while len(executed) < budget:
        pred = policy.act(env.observation(), rng)
        calls += 1
        for a in pred[:min(exec_steps, budget - len(executed))]:
            env.step(a)
            executed.append(a)
    actions = np.asarray(executed)
    origin = env.demo.states[start]
    expert = env.expert_actions(start, len(executed))
    return RolloutTrace(
        mode, start, np.asarray(env.history[start:]), actions, _path(origin, expert), expert,
        inference_calls=calls, nfe=getattr(policy.field, "nfe", 0) - nfe0,
        truncated=truncated, goal=task_goal(env.demo),
    )
