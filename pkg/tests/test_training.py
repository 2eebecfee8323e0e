import json
import math

import numpy as np
import pytest

from focalflow.errors import ConfigurationError, StateError, TrainingDivergedError
from focalflow.objectives import Draws, ObjectiveConfig, evaluate_objective
from focalflow.trajectory import Dataset, generate_expert
from focalflow.training import (
    AdamW, TrainConfig, init_state, load_checkpoint, lr_schedule, run_training, save_checkpoint,
    top_k_average, train_step,
)


def tiny_cfg(**kw):
    base = dict(steps=30, batch_size=8, warmup_steps=5, hidden=(16,), time_embed_dim=4,
                learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return Dataset(generate_expert("reach", 0, 3, 40), 4, 3, 2)


def test_lr_schedule_examples():
    cfg = TrainConfig(steps=2000, warmup_steps=500)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(250, cfg) == pytest.approx(5e-5)
    assert lr_schedule(500, cfg) == 1e-4
    assert lr_schedule(1250, cfg) == pytest.approx(5e-5)
    assert abs(lr_schedule(2000, cfg)) < 1e-12


def test_lr_schedule_is_monotone_after_warmup():
    cfg = TrainConfig(steps=300, warmup_steps=50)
    lrs = [lr_schedule(s, cfg) for s in range(301)]
    assert all(b >= a for a, b in zip(lrs[:50], lrs[1:51]))
    assert all(b <= a for a, b in zip(lrs[50:], lrs[51:]))


def test_adamw_matches_hand_unrolled_recurrence():
    b1, b2, eps, wd, lr = 0.95, 0.999, 1e-8, 1e-2, 0.1
    c = np.array([1.0, -2.0, 0.5])
    p = np.array([0.3, 0.1, -0.7])
    opt = AdamW(3, (b1, b2), eps, wd)
    # oracle: explicit scalar recurrences for grad = p - c (quadratic 0.5||p - c||^2)
    q = p.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in (1, 2, 3):
        g = q - c
        q = q * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        q = q - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        opt.step(p, p - c, lr)
        np.testing.assert_allclose(p, q, rtol=0, atol=1e-12)


def test_adamw_first_step_moves_by_lr():
    # bias correction makes the first step lr * sign(g) up to eps
    p = np.array([1.0, -1.0])
    AdamW(2, weight_decay=0.0).step(p, np.array([3.0, -0.2]), 0.01)
    np.testing.assert_allclose(p, [0.99, -0.99], atol=1e-8)


def test_weight_decay_is_decoupled():
    p = np.array([2.0])
    opt = AdamW(1, weight_decay=0.5)
    opt.step(p, np.array([0.0]), 0.1)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))
    assert opt.m[0] == 0.0 and opt.v[0] == 0.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=100, warmup_steps=100)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(betas=(1.0, 0.9))
    cfg = TrainConfig(objective=ObjectiveConfig("wo_las", lam=1e-3))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"stepz": 3})


def test_epochs_resolve_to_steps(dataset):
    cfg = TrainConfig(epochs=2, batch_size=16, warmup_steps=0).for_dataset(dataset)
    assert cfg.steps == 2 * math.ceil(len(dataset) / 16)


def test_identical_branches_give_zero_loss(dataset):
    cfg = tiny_cfg(objective=ObjectiveConfig("focal", lam=0.0))
    state = init_state(cfg, dataset)
    obs, macros = dataset.sample_batch(np.random.default_rng(0), 8)
    tau = np.random.default_rng(1).random(8)
    draws = Draws(np.random.default_rng(2).standard_normal(macros.shape), tau, tau.copy())
    total, grad, _ = evaluate_objective(cfg.objective, state.net, state.ema.params, obs, macros, draws)
    assert total == 0.0 and np.all(grad == 0.0)


def test_train_step_row_and_state(dataset):
    cfg = tiny_cfg()
    state = init_state(cfg, dataset)
    before = state.net.params.copy()
    row = train_step(state, dataset.sample_batch(state.rngs["data"], 8), cfg)
    assert row["kind"] == "train" and row["step"] == 1 and row["lr"] == 0.0
    assert state.step == 1 and state.opt.t == 1
    row = train_step(state, dataset.sample_batch(state.rngs["data"], 8), cfg)
    assert not np.array_equal(state.net.params, before)
    for k in ("loss_time", "loss_freq", "loss_total", "grad_norm", "grad_cos"):
        assert math.isfinite(row[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_snapshot(dataset):
    cfg = tiny_cfg()
    state = init_state(cfg, dataset)
    obs, macros = dataset.sample_batch(state.rngs["data"], 8)
    macros = macros.copy()
    macros[0, 0, 0] = np.inf
    with pytest.raises(TrainingDivergedError) as info:
        train_step(state, (obs, macros), cfg)
    snap = info.value.snapshot
    assert snap["step"] == 0 and set(snap) >= {"loss_time", "loss_freq", "loss_total", "max_abs_grad"}


@pytest.mark.parametrize("variant", ["focal", "wo_las", "wo_fco_las", "fm_baseline",
                                     "time_only_fco", "weighted_spectral"])
def test_runs_are_bit_identical(variant, dataset, tmp_path):
    cfg = tiny_cfg(objective=ObjectiveConfig(variant, prefix_len=4))
    run_training(cfg, dataset, out_dir=tmp_path / "a")
    run_training(cfg, dataset, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert len(a.splitlines()) == 30


def test_log_rows_count_train_and_eval(dataset, tmp_path):
    cfg = tiny_cfg(steps=12, eval_every=4, eval_episodes=2, eval_mode="open_loop")
    result = run_training(cfg, dataset, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    kinds = [json.loads(x)["kind"] for x in lines]
    assert len(lines) == 12 + 3
    assert kinds.count("eval") == 3 and result.summary["eval_rows"] == 3
    assert result.summary["top5_success_rate"] is not None
    assert json.loads((tmp_path / "summary.json").read_text())["steps"] == 12


def test_resume_matches_uninterrupted_run(dataset, tmp_path):
    cfg = tiny_cfg(steps=24, eval_every=8, eval_episodes=2, eval_mode="open_loop")
    full = run_training(cfg, dataset, out_dir=tmp_path / "full")
    run_training(cfg, dataset, out_dir=tmp_path / "cut", stop_at=13)
    # a partially written log past the checkpoint is discarded on resume
    with (tmp_path / "cut" / "metrics.jsonl").open("a") as fh:
        fh.write(json.dumps({"kind": "train", "step": 14}) + "\n")
    resumed = run_training(cfg, dataset, out_dir=tmp_path / "cut",
                           resume=tmp_path / "cut" / "checkpoint.json")
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "cut" / "metrics.jsonl").read_bytes()
    assert resumed.state.net.params.tobytes() == full.state.net.params.tobytes()
    assert resumed.state.ema.params.tobytes() == full.state.ema.params.tobytes()


def test_checkpoint_round_trip(dataset, tmp_path):
    cfg = tiny_cfg(steps=6, warmup_steps=1)
    result = run_training(cfg, dataset)
    path = save_checkpoint(tmp_path / "sub" / "c.json", result.state, cfg, dataset.normalizer,
                           {"chunk_size": 4, "num_chunks": 3, "n_obs": 2, "task": "reach"})
    ck = load_checkpoint(path)
    doc = json.loads(path.read_text())
    assert doc["format"] == "focalflow-ckpt/1"
    assert ck.state.net.params.tobytes() == result.state.net.params.tobytes()
    assert ck.state.ema.params.tobytes() == result.state.ema.params.tobytes()
    assert ck.state.opt.m.tobytes() == result.state.opt.m.tobytes()
    assert ck.state.step == 6 and ck.config == cfg
    for name, g in result.state.rngs.items():
        assert ck.state.rngs[name].random() == g.random()
    obs = np.concatenate([dataset.demos[0].states[0], dataset.demos[0].states[0],
                          dataset.demos[0].context])
    a = ck.policy().act(obs, np.random.default_rng(0))
    assert a.shape == (12, 2) and np.all(np.isfinite(a))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(OSError, match="missing.json"):
        load_checkpoint(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other/2"}))
    with pytest.raises(StateError):
        load_checkpoint(bad)


def test_top_k_average():
    rows = [{"kind": "eval", "success_rate": s} for s in (0.1, 0.9, 0.5, 0.7)] + [{"kind": "train"}]
    assert top_k_average(rows, 2) == pytest.approx(0.8)
    assert top_k_average([{"kind": "train"}]) is None


def test_loss_stays_finite_and_decreases(dataset):
    cfg = tiny_cfg(steps=200, warmup_steps=20, batch_size=16)
    rows = run_training(cfg, dataset).rows
    losses = np.array([r["loss_total"] for r in rows])
    assert np.all(np.isfinite(losses))
    assert losses[-20:].mean() < losses[:20].mean()
