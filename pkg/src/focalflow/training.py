"""Optimization loop: AdamW with decoupled decay, warmup-cosine schedule,
EMA teacher, JSONL metrics log and exactly resumable checkpoints."""

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _rng
from .errors import ConfigurationError, StateError, TrainingDivergedError
from .flow import Policy
from .network import EmaShadow, VelocityField, ema_update
from .objectives import ObjectiveConfig, draw, evaluate_objective
from .sampler import AnchorConfig
from .trajectory import Normalizer

CKPT_FORMAT = "focalflow-ckpt/1"
TRAIN_STREAMS = ("data", "noise", "tau", "r")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    epochs: int = None
    batch_size: int = 128
    learning_rate: float = 1e-4
    betas: tuple = (0.95, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    warmup_steps: int = 500
    ema_max_decay: float = 0.9999
    hidden: tuple = (128, 128)
    time_embed_dim: int = 16
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 5
    eval_mode: str = "closed_loop"
    exec_steps: int = 4
    tolerance: float = 0.05
    top_k: int = 5
    checkpoint_every: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.learning_rate <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate and eps must be positive, weight_decay non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigurationError("batch_size and steps must be positive")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigurationError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigurationError(
                f"warmup_steps ({self.warmup_steps}) must be smaller than steps ({self.steps})"
            )
        if self.eval_mode not in ("open_loop", "closed_loop"):
            raise ConfigurationError(f"unknown eval_mode {self.eval_mode!r}")

    def for_dataset(self, dataset):
        """Resolve an epoch budget into steps; one epoch visits every window once on average."""
        if self.epochs is None:
            return self
        per_epoch = math.ceil(len(dataset) / self.batch_size)
        return replace(self, steps=self.epochs * per_epoch, epochs=None)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["betas"] = list(self.betas)
        d["hidden"] = list(self.hidden)
        d["objective"] = self.objective.to_dict()
        d["anchor"] = self.anchor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "objective" in d:
            d["objective"] = ObjectiveConfig.from_dict(d["objective"])
        if "anchor" in d:
            d["anchor"] = AnchorConfig(**d["anchor"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step, cfg):
    """Linear warmup from 0 to the peak rate, then cosine decay to 0 at ``cfg.steps``."""
    peak, warm, total = cfg.learning_rate, cfg.warmup_steps, cfg.steps
    step = min(max(step, 0), total)
    if step < warm:
        return peak * step / warm
    progress = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with weight decay applied directly to the parameters."""

    def __init__(self, size, betas=(0.95, 0.999), eps=1e-8, weight_decay=1e-6):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad, lr):
        """Update ``params`` in place."""
        b1, b2 = self.betas
        self.t += 1
        params *= 1.0 - lr * self.weight_decay
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1 ** self.t)
        v_hat = self.v / (1.0 - b2 ** self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params

    def state_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load_state_dict(self, d):
        self.m = np.asarray(d["m"], dtype=np.float64)
        self.v = np.asarray(d["v"], dtype=np.float64)
        self.t = int(d["t"])


@dataclass
class TrainerState:
    net: VelocityField
    ema: EmaShadow
    opt: AdamW
    step: int
    rngs: dict


def init_state(cfg, dataset):
    net = VelocityField(dataset.horizon, dataset.action_dim, dataset.obs_dim, cfg.hidden,
                        cfg.time_embed_dim, rng=_rng.stream(cfg.seed, "init"))
    return TrainerState(
        net=net,
        ema=EmaShadow.of(net, cfg.ema_max_decay),
        opt=AdamW(net.num_params, cfg.betas, cfg.eps, cfg.weight_decay),
        step=0,
        rngs={name: _rng.stream(cfg.seed, name) for name in TRAIN_STREAMS},
    )


def train_step(state, batch, cfg):
    """One optimization step on ``batch = (obs, macros)``; mutates ``state``.

    The teacher branch uses the EMA parameters as they stand before the step.
    Returns the metrics row for the step.
    """
    obs, macros = batch
    B, L, d = macros.shape
    draws = draw(cfg.objective, cfg.anchor, B, L, d,
                 state.rngs["noise"], state.rngs["tau"], state.rngs["r"])
    total, grad, rep = evaluate_objective(cfg.objective, state.net, state.ema.params,
                                          obs, macros, draws)
    if not math.isfinite(total) or not np.all(np.isfinite(grad)):
        snapshot = {
            "step": state.step,
            "loss_time": rep.loss_time,
            "loss_freq": rep.loss_freq,
            "loss_total": total,
            "max_abs_grad": float(np.max(np.abs(grad))),
        }
        raise TrainingDivergedError(f"non-finite loss or gradient at step {state.step}", snapshot)
    lr = lr_schedule(state.step, cfg)
    state.opt.step(state.net.params, grad, lr)
    ema_update(state.ema, state.net, state.step)
    state.step += 1
    row = {"kind": "train", "step": state.step, "lr": lr}
    row.update(rep.to_dict())
    return row


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    state: TrainerState
    config: TrainConfig
    normalizer: Normalizer
    data: dict

    def policy(self, use_ema=True, inference="one_step"):
        net = self.state.net.clone()
        params = self.state.ema.params if use_ema else self.state.net.params
        return Policy(net, self.normalizer, self.data["chunk_size"], self.data["num_chunks"],
                      self.data["n_obs"], params=params.copy(), inference=inference)


def data_meta(dataset):
    return {
        "chunk_size": dataset.chunk_size,
        "num_chunks": dataset.num_chunks,
        "n_obs": dataset.n_obs,
        "task": dataset.demos[0].task_id,
    }


def save_checkpoint(path, state, cfg, normalizer, data):
    path = Path(path)
    doc = {
        "format": CKPT_FORMAT,
        "step": state.step,
        "architecture": state.net.architecture(),
        "params": state.net.params.tolist(),
        "ema": state.ema.params.tolist(),
        "ema_max_decay": state.ema.max_decay,
        "optimizer": state.opt.state_dict(),
        "rng": {k: _rng.get_state(g) for k, g in state.rngs.items()},
        "normalizer": normalizer.to_dict(),
        "config": cfg.to_dict(),
        "data": data,
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(json.dumps(doc))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CKPT_FORMAT:
        raise StateError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    cfg = TrainConfig.from_dict(doc["config"])
    net = VelocityField.from_architecture(doc["architecture"], np.asarray(doc["params"]))
    ema = EmaShadow(np.asarray(doc["ema"], dtype=np.float64), doc["ema_max_decay"])
    opt = AdamW(net.num_params, cfg.betas, cfg.eps, cfg.weight_decay)
    opt.load_state_dict(doc["optimizer"])
    rngs = {k: _rng.set_state(_rng.stream(0, k), s) for k, s in doc["rng"].items()}
    state = TrainerState(net, ema, opt, int(doc["step"]), rngs)
    return Checkpoint(state, cfg, Normalizer.from_dict(doc["normalizer"]), doc["data"])


# -- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainerState
    rows: list
    summary: dict
    checkpoint_path: Path = None


def _dumps(row):
    return json.dumps(row, sort_keys=True)


def evaluation_row(state, cfg, dataset, demos=None):
    from .evaluation import evaluate_policy

    policy = Policy(state.net.clone(), dataset.normalizer, dataset.chunk_size, dataset.num_chunks,
                    dataset.n_obs, params=state.ema.params.copy())
    _, _, agg = evaluate_policy(
        policy, demos or dataset.demos, cfg.eval_episodes, cfg.eval_mode, cfg.exec_steps,
        rng=_rng.stream(cfg.seed, f"eval/{state.step}"), tolerance=cfg.tolerance,
    )
    row = {"kind": "eval", "step": state.step}
    row.update({k: v for k, v in agg.row().items() if isinstance(v, (int, float))})
    return row


def top_k_average(rows, k=5, key="success_rate"):
    scores = sorted((r[key] for r in rows if r.get("kind") == "eval"), reverse=True)
    return float(np.mean(scores[:k])) if scores else None


def _read_log(path, upto):
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in rows if r["step"] <= upto]


def run_training(cfg, dataset, out_dir=None, resume=None, stop_at=None, eval_demos=None,
                 progress=None):
    """Train for ``cfg.steps`` steps (or until ``stop_at``).

    ``resume`` is a :class:`Checkpoint` (or a path to one); the metrics log in
    ``out_dir`` is trimmed to the checkpoint's step and appended to, so an
    interrupted run continues exactly as if it had never stopped.
    """
    cfg = cfg.for_dataset(dataset)
    cfg.objective.check_horizon(dataset.horizon)
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "metrics.jsonl" if out is not None else None
    if resume is not None:
        if not isinstance(resume, Checkpoint):
            resume = load_checkpoint(resume)
        state = resume.state
        rows = _read_log(log_path, state.step) if log_path is not None else []
    else:
        state = init_state(cfg, dataset)
        rows = []
    meta = data_meta(dataset)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(_dumps(r) + "\n" for r in rows))
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    ckpt_path = out / "checkpoint.json" if out is not None else None
    fh = log_path.open("a") if log_path is not None else None
    try:
        while state.step < end:
            batch = dataset.sample_batch(state.rngs["data"], cfg.batch_size)
            new = [train_step(state, batch, cfg)]
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                new.append(evaluation_row(state, cfg, dataset, eval_demos))
            rows.extend(new)
            if fh is not None:
                fh.write("".join(_dumps(r) + "\n" for r in new))
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out / f"checkpoint_{state.step:07d}.json", state, cfg,
                                dataset.normalizer, meta)
            if progress is not None:
                progress(new)
    finally:
        if fh is not None:
            fh.close()
    summary = {
        "steps": state.step,
        "final_loss_total": next((r["loss_total"] for r in reversed(rows) if r["kind"] == "train"), None),
        f"top{cfg.top_k}_success_rate": top_k_average(rows, cfg.top_k),
        "eval_rows": sum(r["kind"] == "eval" for r in rows),
    }
    if out is not None:
        save_checkpoint(ckpt_path, state, cfg, dataset.normalizer, meta)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return TrainResult(state, rows, summary, ckpt_path)


def policy_from_state(state, dataset, use_ema=True, inference="one_step"):
    params = state.ema.params if use_ema else state.net.params
    return Policy(state.net.clone(), dataset.normalizer, dataset.chunk_size, dataset.num_chunks,
                  dataset.n_obs, params=params.copy(), inference=inference)
