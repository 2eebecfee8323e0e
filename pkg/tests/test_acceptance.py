"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The directional
experiments train real policies and take a few minutes in total.
"""

import csv
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import yaml

from focalflow import _rng
from focalflow.config import apply_overrides, load_config, resolve
from focalflow.evaluation import (
    atv, is_monotone_decreasing, propagation_efficiency, teacher_error,
)
from focalflow.experiments import build_dataset, run_sweep, train_and_evaluate
from focalflow.flow import TaskEnv, one_step_infer, rollout
from focalflow.training import policy_from_state, run_training
from focalflow.verification import (
    check_anchor_distribution, check_fsd_ordering, check_gradients_fd, check_parseval,
    check_prediction_cosine, check_spectral_gain, check_weighted_gradient,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = (0, 1, 2)
TASKS = ("reach", "pick-sketch")
EXACT_BUDGET = 30.0
DESK_BUDGET = 300.0


def emit(capsys, n, ok, detail, elapsed):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}")
    assert ok, detail


def desk_run(task="reach", variant="focal", seed=0, extra=()):
    cfg = apply_overrides(load_config(CONFIGS / "desk.yaml"),
                          [f"data.task={task}", f"data.seed={seed}", f"train.seed={seed}", *extra])
    return resolve(cfg, variant)


@lru_cache(maxsize=None)
def trained(task, variant, seed):
    result, metrics, _ = train_and_evaluate(desk_run(task, variant, seed))
    return result, metrics


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# -- exact / property suites -------------------------------------------------

def _exact(capsys, n, check, describe):
    with Timer() as t:
        r = check()
    ok = r.passed and t.elapsed < EXACT_BUDGET
    emit(capsys, n, ok, f"{describe(r.measured)} seed={r.seed}", t.elapsed)


def test_criterion_01_parseval(capsys):
    _exact(capsys, 1, lambda: check_parseval(100, (2, 12, 36, 256)),
           lambda m: f"max relative error {m['max_rel_error']:.2e} (tol 1e-10)")


def test_criterion_02_prediction_cosine(capsys):
    _exact(capsys, 2, lambda: check_prediction_cosine(1000),
           lambda m: f"max |cos - |Pe|/|e|| {m['max_abs_error']:.2e} (tol 1e-12), "
                     f"non-positive {m['nonpositive']}")


def test_criterion_03_spectral_gain(capsys):
    def describe(m):
        g = m["gains"]
        return (f"L=1 {g['L=1,c=1.0']:.12f}, L=16 {g['L=16,c=1.0']:.12f}, "
                f"L=144 {g['L=144,c=1.0']:.12f}; max deviation {m['max_abs_error']:.1e}")
    _exact(capsys, 3, lambda: check_spectral_gain((1, 16, 144)), describe)


def test_criterion_04_weighted_gradient(capsys):
    _exact(capsys, 4, lambda: check_weighted_gradient(100),
           lambda m: f"max error {m['max_abs_error']:.2e} (tol 1e-9), "
                     f"low-pass attenuation {m['low_pass_attenuated']}/{m['trials']}")


def test_criterion_05_anchor_distribution(capsys):
    _exact(capsys, 5, lambda: check_anchor_distribution(samples=50_000, grid_points=100),
           lambda m: f"median {m['median']:.4f} in [0.975, 0.989], P(r>=0.5) "
                     f"{m['mass_above_half']:.4f} >= 0.93, strict FSD {m['fsd_strict']}")


def test_criterion_06_fsd_ordering(capsys):
    _exact(capsys, 6, lambda: check_fsd_ordering(samples=50_000),
           lambda m: f"E_LAS {m['e_las']:.5f} vs E_unif {m['e_uniform']:.5f}: "
                     f"{m['separation_se']:.1f} SE apart (>= 5); uniform vs 1/3 "
                     f"{m['uniform_vs_analytic_se']:.2f} SE (<= 3)")


def test_criterion_07_gradients(capsys):
    _exact(capsys, 7, lambda: check_gradients_fd(n_params=50),
           lambda m: f"worst relative error over {len(m['max_rel_error'])} variants "
                     f"{max(m['max_rel_error'].values()):.2e} (tol 1e-5, 50 params each)")


@pytest.mark.slow
def test_criterion_08_determinism(capsys, tmp_path):
    run = desk_run()
    with Timer() as t:
        ds = build_dataset(run.data)
        for name in ("a", "b"):
            run_training(run.train, ds, out_dir=tmp_path / name)
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ok = a == b and len(a.splitlines()) == run.train.steps and t.elapsed < EXACT_BUDGET
    emit(capsys, 8, ok, f"two {run.train.steps}-step runs, metrics logs identical: {a == b} "
                        f"({len(a)} bytes)", t.elapsed)


@pytest.mark.slow
def test_criterion_09_nfe(capsys):
    with Timer() as t:
        result, _ = trained("reach", "focal", 0)
        run = desk_run()
        ds = build_dataset(run.data)
        policy = policy_from_state(result.state, ds)
        rng = np.random.default_rng(0)
        counts = []
        for _ in range(25):
            before = policy.field.nfe
            one_step_infer(policy.field, ds.obs[0], rng, params=policy.params)
            counts.append(policy.field.nfe - before)
        env = TaskEnv(ds.demos[0])
        trace = rollout(policy, env, exec_steps=4, mode="closed_loop", max_steps=36, rng=rng)
    ok = set(counts) == {1} and trace.nfe == trace.inference_calls == 9
    emit(capsys, 9, ok, f"one_step_infer NFE per call {sorted(set(counts))}; closed-loop 36 steps: "
                        f"{trace.inference_calls} decisions, {trace.nfe} evaluations", t.elapsed)


def test_criterion_10_atv(capsys):
    with Timer() as t:
        value = atv(np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]]))
        rng = np.random.default_rng(0)
        constants = [atv(np.tile(rng.standard_normal(d), (T, 1)))
                     for T, d in ((2, 1), (12, 7), (200, 3))]
    ok = value == 1.5 and all(c == 0.0 for c in constants)
    emit(capsys, 10, ok, f"ATV((0,0),(1,2),(3,1)) = {value}; constant sequences {constants}", t.elapsed)


# -- directional desk-scale experiments ---------------------------------------

def _compare(baseline):
    lines, per_task = [], {}
    for task in TASKS:
        wins_end = wins_atv = 0
        for s in SEEDS:
            _, f = trained(task, "focal", s)
            _, b = trained(task, baseline, s)
            wins_end += f["endpoint_error"] < b["endpoint_error"]
            wins_atv += f["atv_gap"] < b["atv_gap"]
            lines.append(f"{task} s{s}: endpoint {f['endpoint_error']:.4f} vs {b['endpoint_error']:.4f}, "
                         f"ATV gap {f['atv_gap']:.5f} vs {b['atv_gap']:.5f}")
        per_task[task] = (wins_end, wins_atv)
    return per_task, lines


@pytest.mark.slow
def test_criterion_11_focal_vs_wo_fco_las(capsys):
    with Timer() as t:
        per_task, lines = _compare("wo_fco_las")
    ok = all(e >= 2 and a >= 2 for e, a in per_task.values()) and t.elapsed < DESK_BUDGET
    summary = "; ".join(f"{k}: endpoint wins {e}/3, ATV-gap wins {a}/3" for k, (e, a) in per_task.items())
    with capsys.disabled():
        print("\n" + "\n".join("    " + x for x in lines))
    emit(capsys, 11, ok, f"focal vs wo_fco_las - {summary}", t.elapsed)


@pytest.mark.slow
def test_criterion_12_focal_vs_wo_las(capsys):
    with Timer() as t:
        per_task, lines = _compare("wo_las")
    ok = all(e >= 2 for e, _ in per_task.values()) and t.elapsed < DESK_BUDGET
    summary = "; ".join(f"{k}: endpoint wins {e}/3" for k, (e, _) in per_task.items())
    with capsys.disabled():
        print("\n" + "\n".join("    " + x for x in lines))
    emit(capsys, 12, ok, f"focal vs wo_las - {summary}", t.elapsed)


@pytest.mark.slow
def test_criterion_13_efficiency_estimators(capsys):
    with Timer() as t:
        result, _ = trained("reach", "focal", 0)
        run = desk_run()
        ds = build_dataset(run.data)
        state = result.state
        rng = _rng.stream(0, "acceptance/efficiency")
        ests = propagation_efficiency(state.net, state.net.params, state.ema.params, run.train.anchor,
                                      ds, [0.25, 0.5, 0.75], 10_000, rng)
        s_grid = np.linspace(0.0, 0.9, 10)
        eps, _ = teacher_error(state.net, state.ema.params, ds, s_grid, 2000, rng)
    ok = all(e.gap_in_se < 2.0 for e in ests)
    with capsys.disabled():
        for e in ests:
            print(f"\n    tau={e.tau}: raw {e.raw:.5f} (se {e.raw_se:.5f}) simplified {e.simplified:.5f} "
                  f"(se {e.simplified_se:.5f}) gap {e.gap_in_se:.2f} SE", end="")
        print("\n    eps(s): " + ", ".join(f"{s:.1f}:{v:.4f}" for s, v in zip(s_grid, eps))
              + f"  monotone decreasing: {is_monotone_decreasing(eps)}")
    emit(capsys, 13, ok, "raw and simplified estimators agree within 2 SE at 10k samples: "
                         + ", ".join(f"{e.gap_in_se:.2f}" for e in ests), t.elapsed)


@pytest.mark.slow
def test_criterion_14_lambda_sweep(capsys, tmp_path):
    doc = yaml.safe_load((CONFIGS / "lambda_sweep.yaml").read_text())
    lams = doc["grid"]["objective.lambda"]
    base = apply_overrides(load_config(CONFIGS / doc["base"]),
                           ["train.steps=200", "train.warmup_steps=50", "eval.episodes=10"])
    with Timer() as t:
        run_sweep(base, doc["grid"], tmp_path)
        rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    got = sorted(float(r["objective.lambda"]) for r in rows)
    finite = all(np.isfinite(float(r["endpoint_error"])) for r in rows)
    ok = len(lams) == 5 and len(rows) == 5 and got == sorted(lams) and finite
    emit(capsys, 14, ok, f"{len(rows)} summary rows for lambda in {sorted(lams)}; "
                         + ", ".join(f"{float(r['objective.lambda']):.0e}: {float(r['endpoint_error']):.6f}"
                                     for r in rows), t.elapsed)
