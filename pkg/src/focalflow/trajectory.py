"""Trajectory containers, synthetic experts and dataset assembly.

Actions are per-step position deltas, so ``states[k + 1] = states[k] +
actions[k]`` holds exactly and any action sequence integrates to a path by
cumulative summation.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .errors import ConfigurationError, DimensionError, OrderingError, RangeError

DEMO_FORMAT = "focalflow-demos/1"
TASKS = ("lissajous", "reach", "pick-sketch")
TASK_DIMS = {"lissajous": 2, "reach": 2, "pick-sketch": 3}
CONTEXT_DIMS = {"lissajous": 6, "reach": 2, "pick-sketch": 6}


def _finite(a, what):
    if not np.all(np.isfinite(a)):
        raise RangeError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class ActionChunk:
    actions: np.ndarray
    start_step: int = 0

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionError(f"chunk must be H x d with H, d >= 1, got {a.shape}")
        _finite(a, "chunk")
        object.__setattr__(self, "actions", a)

    @property
    def size(self):
        return self.actions.shape[0]


@dataclass(frozen=True)
class MacroTrajectory:
    actions: np.ndarray
    chunk_size: int
    num_chunks: int

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.float64)
        if a.ndim != 2:
            raise DimensionError(f"macro-trajectory must be L x d, got {a.shape}")
        if a.shape[0] != self.chunk_size * self.num_chunks:
            raise DimensionError(
                f"macro-trajectory has {a.shape[0]} rows, expected "
                f"N*H = {self.num_chunks}*{self.chunk_size}"
            )
        _finite(a, "macro-trajectory")
        object.__setattr__(self, "actions", a)

    @property
    def length(self):
        return self.actions.shape[0]

    @property
    def dim(self):
        return self.actions.shape[1]

    def split(self, start_step=0):
        H = self.chunk_size
        return [
            ActionChunk(self.actions[k * H:(k + 1) * H], start_step + k * H)
            for k in range(self.num_chunks)
        ]


@dataclass(frozen=True)
class Observation:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        _finite(v, "observation")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


@dataclass
class Demonstration:
    states: np.ndarray
    actions: np.ndarray
    task_id: str
    seed: int = 0
    index: int = 0
    context: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def length(self):
        return self.actions.shape[0]

    @property
    def dim(self):
        return self.actions.shape[1]


def concat_chunks(chunks):
    """Stack ``N`` consecutive chunks into one macro-trajectory."""
    if not chunks:
        raise DimensionError("need at least one chunk")
    H, d = chunks[0].actions.shape
    for k, c in enumerate(chunks):
        if c.actions.shape != (H, d):
            raise DimensionError(
                f"chunk {k} has shape {c.actions.shape}, expected {(H, d)}"
            )
        expected = chunks[0].start_step + k * H
        if c.start_step != expected:
            raise OrderingError(
                f"chunk {k} starts at step {c.start_step}, expected {expected}"
            )
    return MacroTrajectory(np.concatenate([c.actions for c in chunks]), H, len(chunks))


def observation_at(states, t, n_obs=2, context=None):
    """Positions at steps ``t, t-1, ..., t-n_obs+1`` (clamped at 0), newest first,
    followed by the task context."""
    idx = np.clip(t - np.arange(n_obs), 0, None)
    parts = [np.asarray(states)[idx].ravel()]
    if context is not None and len(context):
        parts.append(np.asarray(context, dtype=np.float64))
    return Observation(np.concatenate(parts))


def observation_features(values, n_obs, dim):
    """Network input features of raw observations (one per row, or a single vector).

    Stacked positions ``p_t, p_{t-1}, ...`` become ``p_t, p_t - p_{t-1}, ...``;
    the context is passed through.  The map is linear and invertible, and it
    keeps the small per-step motion on its own scale after normalization.
    """
    v = np.array(values, dtype=np.float64)
    k = n_obs * dim
    frames = v[..., :k].reshape(v.shape[:-1] + (n_obs, dim))
    v[..., dim:k] = (frames[..., :-1, :] - frames[..., 1:, :]).reshape(v.shape[:-1] + (k - dim,))
    return v


def extract_macro(demo, t, chunk_size, num_chunks, n_obs=2):
    L = chunk_size * num_chunks
    if t < 0 or t + L > demo.length:
        raise RangeError(
            f"window [{t}, {t + L}) exceeds demonstration with {demo.length} actions; "
            f"valid starts are 0..{demo.length - L}"
        )
    obs = observation_at(demo.states, t, n_obs, demo.context)
    macro = MacroTrajectory(demo.actions[t:t + L], chunk_size, num_chunks)
    return obs, macro


# -- synthetic experts -------------------------------------------------------

def min_jerk(s):
    """Minimum-jerk blend ``10 s^3 - 15 s^4 + 6 s^5`` (0 at s=0, 1 at s=1)."""
    s = np.asarray(s, dtype=np.float64)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


def _integrate(start, actions):
    # cumsum adds sequentially, so states[k + 1] == states[k] + actions[k] bitwise
    return np.cumsum(np.vstack([start[None, :], actions]), axis=0)


def _from_path(path):
    actions = np.diff(path, axis=0)
    return _integrate(path[0].copy(), actions), actions


def _lissajous(rng, T):
    amp = rng.uniform(0.5, 1.0, size=2)
    ratios = [(1, 2), (2, 1), (1, 1), (3, 2), (2, 3)]
    a, b = ratios[rng.integers(len(ratios))]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    center = rng.uniform(-0.3, 0.3, size=2)
    w = 2.0 * np.pi * np.arange(T + 1) / T
    path = center + np.stack(
        [amp[0] * np.sin(a * w + phase), amp[1] * np.sin(b * w)], axis=1
    )
    path[-1] = path[0]  # close the curve exactly
    context = np.array([amp[0], amp[1], a, b, np.cos(phase), np.sin(phase)])
    return path, context


def _reach(rng, T):
    start = rng.uniform(-1.0, 1.0, size=2)
    while True:
        goal = rng.uniform(-1.0, 1.0, size=2)
        if np.linalg.norm(goal - start) >= 0.5:
            break
    s = min_jerk(np.arange(T + 1) / T)
    path = start + s[:, None] * (goal - start)
    return path, goal.copy()


def _pick_sketch(rng, T):
    start = np.concatenate([rng.uniform(-1.0, 1.0, 2), rng.uniform(0.5, 1.0, 1)])
    pick = np.concatenate([rng.uniform(-1.0, 1.0, 2), rng.uniform(0.0, 0.2, 1)])
    goal = np.concatenate([rng.uniform(-1.0, 1.0, 2), rng.uniform(0.2, 0.6, 1)])
    t1 = int(round(T * rng.uniform(0.35, 0.45)))
    tp = int(round(T * rng.uniform(0.10, 0.20)))
    t2 = T - t1 - tp
    if t1 < 1 or t2 < 1:
        raise ConfigurationError(f"pick-sketch needs a longer demonstration than T={T}")
    seg1 = start + min_jerk(np.arange(t1 + 1) / t1)[:, None] * (pick - start)
    pause = np.repeat(pick[None, :], tp, axis=0)
    seg2 = pick + min_jerk(np.arange(1, t2 + 1) / t2)[:, None] * (goal - pick)
    path = np.vstack([seg1, pause, seg2])
    return path, np.concatenate([pick, goal])


_GENERATORS = {"lissajous": _lissajous, "reach": _reach, "pick-sketch": _pick_sketch}


def task_goal(demo):
    """Target end position for goal-directed tasks, else ``None``."""
    if demo.task_id == "reach":
        return demo.context[:2]
    if demo.task_id == "pick-sketch":
        return demo.context[3:6]
    return None


def generate_expert(task, seed, count, length=200):
    """Deterministic expert demonstrations for a synthetic task family.

    Demo ``i`` depends only on ``(task, seed, i)``, so a larger ``count``
    extends rather than reshuffles a smaller set.
    """
    if task not in _GENERATORS:
        raise ConfigurationError(f"unknown task {task!r}; choose from {TASKS}")
    if count < 0:
        raise RangeError(f"count must be non-negative, got {count}")
    if length < 2:
        raise RangeError(f"length must be at least 2, got {length}")
    demos = []
    for i in range(count):
        rng = _rng.stream(seed, f"demo/{task}/{i}")
        path, context = _GENERATORS[task](rng, length)
        states, actions = _from_path(path)
        demos.append(Demonstration(states, actions, task, int(seed), i, context))
    return demos


# -- normalization and dataset ----------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine maps ``(x - shift) / scale`` for actions and observations."""

    action_shift: np.ndarray
    action_scale: np.ndarray
    obs_shift: np.ndarray
    obs_scale: np.ndarray

    @staticmethod
    def _stats(x):
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return shift, scale

    @classmethod
    def fit(cls, actions, observations):
        a_shift, a_scale = cls._stats(np.asarray(actions, dtype=np.float64))
        o_shift, o_scale = cls._stats(np.asarray(observations, dtype=np.float64))
        return cls(a_shift, a_scale, o_shift, o_scale)

    @classmethod
    def identity(cls, action_dim, obs_dim):
        return cls(np.zeros(action_dim), np.ones(action_dim), np.zeros(obs_dim), np.ones(obs_dim))

    def normalize_actions(self, a):
        return (np.asarray(a) - self.action_shift) / self.action_scale

    def denormalize_actions(self, a):
        return np.asarray(a) * self.action_scale + self.action_shift

    def normalize_obs(self, o):
        return (np.asarray(o) - self.obs_shift) / self.obs_scale

    def denormalize_obs(self, o):
        return np.asarray(o) * self.obs_scale + self.obs_shift

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("action_shift", "action_scale", "obs_shift", "obs_scale")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


class Dataset:
    """All ``(observation, macro-trajectory)`` windows of a demo set, with
    observations encoded by :func:`observation_features` and both normalized.

    A window starts at every ``t`` in ``[0, T - L]``; one epoch is one pass
    over these windows.
    """

    def __init__(self, demos, chunk_size=4, num_chunks=3, n_obs=2, normalizer=None):
        if not demos:
            raise ConfigurationError("dataset needs at least one demonstration")
        self.demos = list(demos)
        self.chunk_size = chunk_size
        self.num_chunks = num_chunks
        self.n_obs = n_obs
        L = self.horizon
        obs, macros, index = [], [], []
        for j, demo in enumerate(self.demos):
            if demo.length < L:
                raise RangeError(
                    f"demo {j} has {demo.length} actions, shorter than horizon {L}"
                )
            for t in range(demo.length - L + 1):
                o, m = extract_macro(demo, t, chunk_size, num_chunks, n_obs)
                obs.append(o.values)
                macros.append(m.actions)
                index.append((j, t))
        raw_obs = observation_features(np.stack(obs), n_obs, self.demos[0].dim)
        raw_macro = np.stack(macros)
        if normalizer is None:
            # statistics over windows, so every sample is weighted as it is trained on
            normalizer = Normalizer.fit(raw_macro.reshape(-1, raw_macro.shape[-1]), raw_obs)
        self.normalizer = normalizer
        self.obs = normalizer.normalize_obs(raw_obs)
        self.macros = normalizer.normalize_actions(raw_macro)
        self.index = index

    @property
    def horizon(self):
        return self.chunk_size * self.num_chunks

    @property
    def action_dim(self):
        return self.demos[0].dim

    @property
    def obs_dim(self):
        return self.obs.shape[1]

    def __len__(self):
        return len(self.index)

    def sample_batch(self, rng, batch_size):
        """Windows drawn uniformly with replacement."""
        idx = rng.integers(0, len(self.index), size=batch_size)
        return self.obs[idx], self.macros[idx]


# -- file format -------------------------------------------------------------

def demo_to_record(demo):
    return {
        "version": DEMO_FORMAT,
        "task_id": demo.task_id,
        "seed": demo.seed,
        "index": demo.index,
        "length": demo.length,
        "dim": demo.dim,
        "context": np.asarray(demo.context).tolist(),
        "states": demo.states.ravel().tolist(),
        "actions": demo.actions.ravel().tolist(),
    }


def demo_from_record(rec):
    if rec.get("version") != DEMO_FORMAT:
        raise ConfigurationError(f"unsupported demo record version {rec.get('version')!r}")
    T, d = rec["length"], rec["dim"]
    return Demonstration(
        states=np.asarray(rec["states"], dtype=np.float64).reshape(T + 1, d),
        actions=np.asarray(rec["actions"], dtype=np.float64).reshape(T, d),
        task_id=rec["task_id"],
        seed=rec["seed"],
        index=rec["index"],
        context=np.asarray(rec["context"], dtype=np.float64),
    )


def save_demos(demos, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for demo in demos:
            fh.write(json.dumps(demo_to_record(demo)) + "\n")
    return path


def load_demos(path):
    path = Path(path)
    with path.open() as fh:
        return [demo_from_record(json.loads(line)) for line in fh if line.strip()]
