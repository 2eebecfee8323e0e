"""Trajectory metrics, rollout evaluation and Monte Carlo training diagnostics."""

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, RangeError
from .flow import RolloutTrace, TaskEnv, ot_interpolate, rollout
from .sampler import sample_anchor

DEFAULT_TOLERANCE = 0.05


def _actions(x):
    a = np.asarray(getattr(x, "actions", x), dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"expected a (T, d) action sequence, got shape {a.shape}")
    return a


def atv(actions):
    """Action total variation: mean absolute first difference over steps and dimensions."""
    a = _actions(actions)
    if a.shape[0] < 2:
        raise RangeError(f"ATV needs at least 2 steps, got {a.shape[0]}")
    return float(np.abs(np.diff(a, axis=0)).mean())


def trajectory_smoothness(actions):
    """Mean L2 norm of the second finite difference (a jerk proxy)."""
    a = _actions(actions)
    if a.shape[0] < 3:
        raise RangeError(f"smoothness needs at least 3 steps, got {a.shape[0]}")
    return float(np.linalg.norm(np.diff(a, n=2, axis=0), axis=1).mean())


def ts_score(policy_actions, expert_actions):
    """Absolute gap in smoothness between policy and expert; lower is closer."""
    return abs(trajectory_smoothness(expert_actions) - trajectory_smoothness(policy_actions))


def compounding_error(policy_actions, expert_actions):
    """Per-step distance between positions integrated from a shared origin."""
    p = _actions(policy_actions)
    e = _actions(expert_actions)
    if p.shape != e.shape:
        raise DimensionError(f"policy trace {p.shape} and expert trace {e.shape} differ")
    return np.linalg.norm(np.cumsum(p - e, axis=0), axis=1)


def task_success(trace, task, tolerance=DEFAULT_TOLERANCE):
    """Goal reached within ``tolerance`` (reach, pick-sketch) or mean tracking
    error below it (lissajous)."""
    if task in ("reach", "pick-sketch"):
        if trace.goal is None:
            raise ConfigurationError(f"{task} trace carries no goal")
        return bool(np.linalg.norm(trace.positions[-1] - trace.goal) <= tolerance)
    if task == "lissajous":
        n = min(len(trace.positions), len(trace.expert_positions))
        gap = np.linalg.norm(trace.positions[:n] - trace.expert_positions[:n], axis=1)
        return bool(gap.mean() <= tolerance)
    raise ConfigurationError(f"unknown task {task!r}")


@dataclass
class MetricReport:
    atv: float
    ts_score: float
    endpoint_error: float
    error_curve: np.ndarray
    success_rate: float
    nfe_per_decision: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.atv < 0 or self.ts_score < 0:
            raise RangeError("atv and ts_score are non-negative")

    def row(self):
        d = asdict(self)
        d.pop("error_curve")
        d.update(d.pop("extra"))
        return d


def trace_metrics(trace, task, nfe_per_decision=1, tolerance=DEFAULT_TOLERANCE):
    curve = compounding_error(trace.actions, trace.expert_actions)
    if trace.mode == "closed_loop":
        success = float(task_success(trace, task, tolerance))
    else:
        success = float(curve[-1] <= tolerance)
    return MetricReport(
        atv=atv(trace.actions),
        ts_score=ts_score(trace.actions, trace.expert_actions),
        endpoint_error=float(curve[-1]),
        error_curve=curve,
        success_rate=success,
        nfe_per_decision=nfe_per_decision,
        extra={"atv_expert": atv(trace.expert_actions),
               "atv_gap": abs(atv(trace.actions) - atv(trace.expert_actions)),
               "inference_calls": trace.inference_calls},
    )


def aggregate(reports):
    """Mean of every scalar column; the error curve is averaged pointwise when lengths agree."""
    if not reports:
        raise ConfigurationError("no reports to aggregate")
    rows = [r.row() for r in reports]
    keys = [k for k, v in rows[0].items() if isinstance(v, (int, float))]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    curves = [r.error_curve for r in reports]
    curve = np.mean(curves, axis=0) if len({c.shape for c in curves}) == 1 else np.array([])
    mean.pop("nfe_per_decision")
    return MetricReport(mean.pop("atv"), mean.pop("ts_score"), mean.pop("endpoint_error"), curve,
                        mean.pop("success_rate"), reports[0].nfe_per_decision, extra=mean)


def episode_starts(demos, episodes, horizon, mode):
    """Deterministic ``(demo index, start step)`` pairs cycling over the demos."""
    if episodes < 1:
        raise ConfigurationError(f"episodes must be positive, got {episodes}")
    if not demos:
        raise ConfigurationError("evaluation needs at least one demonstration")
    pairs = []
    for k in range(episodes):
        j = k % len(demos)
        rounds = k // len(demos)
        if mode == "open_loop":
            span = demos[j].length - horizon
            # spread repeated visits across the demo
            start = (rounds * 37) % (span + 1)
        else:
            start = 0
        pairs.append((j, start))
    return pairs


def evaluate_policy(policy, demos, episodes=10, mode="closed_loop", exec_steps=4, rng=None,
                    tolerance=DEFAULT_TOLERANCE, max_steps=None):
    """Roll out ``policy`` on ``episodes`` demonstration contexts.

    Returns ``(per_episode_reports, traces, aggregate_report)``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    reports, traces = [], []
    for j, start in episode_starts(demos, episodes, policy.horizon, mode):
        env = TaskEnv(demos[j], start, policy.n_obs)
        trace = rollout(policy, env, exec_steps=exec_steps, mode=mode, max_steps=max_steps, rng=rng)
        traces.append(trace)
        reports.append(trace_metrics(trace, demos[j].task_id, policy.nfe_per_decision, tolerance))
    return reports, traces, aggregate(reports)


# -- Monte Carlo diagnostics -------------------------------------------------

def _mean_se(x):
    x = np.asarray(x, dtype=np.float64)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    return float(x.mean()), se


def _chunks(total, size):
    for k in range(0, total, size):
        yield min(size, total - k)


def _sample_pairs(dataset, rng, n):
    obs, m1 = dataset.sample_batch(rng, n)
    m0 = rng.standard_normal(m1.shape)
    return obs, m0, m1


def teacher_error(field_net, params, dataset, s_grid, samples, rng, chunk=1024):
    """``eps(s) = E||v(M_s, s, o) - (M_1 - M_0)||^2`` per grid time.

    Returns ``(means, standard_errors)`` arrays over the grid.
    """
    s_grid = list(s_grid)
    if not s_grid:
        raise ConfigurationError("teacher_error needs a non-empty time grid")
    if any(not 0.0 <= s <= 1.0 for s in s_grid):
        raise RangeError("grid times must lie in [0, 1]")
    means, ses = [], []
    for s in s_grid:
        vals = []
        for n in _chunks(samples, chunk):
            obs, m0, m1 = _sample_pairs(dataset, rng, n)
            v = field_net.forward(ot_interpolate(m0, m1, s), np.full(n, s), obs, params=params)
            vals.append(np.sum((v - (m1 - m0)) ** 2, axis=(1, 2)))
        m, se = _mean_se(np.concatenate(vals))
        means.append(m)
        ses.append(se)
    return np.asarray(means), np.asarray(ses)


@dataclass
class EfficiencyEstimate:
    tau: float
    raw: float
    raw_se: float
    simplified: float
    simplified_se: float

    @property
    def gap_in_se(self):
        se = math.hypot(self.raw_se, self.simplified_se)
        return abs(self.raw - self.simplified) / se if se > 0 else 0.0


def _efficiency_terms(field_net, live_params, ema_params, anchor, dataset, tau, n, rng):
    obs, m0, m1 = _sample_pairs(dataset, rng, n)
    r = np.asarray(sample_anchor(anchor, rng, n), dtype=np.float64)
    u = m1 - m0
    v_teacher = field_net.forward(ot_interpolate(m0, m1, r), r, obs, params=ema_params)
    taus = np.full(n, tau)
    v_student = field_net.forward(ot_interpolate(m0, m1, taus), taus, obs, params=live_params)
    return v_student, v_teacher, u


def propagation_efficiency(field_net, live_params, ema_params, anchor, dataset, tau_grid,
                           samples, rng, common_draws=False, chunk=1024):
    """Two Monte Carlo estimators of the propagation efficiency per student time.

    ``raw``: ``-E||g_cons - g_sup||^2`` with ``g_cons = 2(v_student - v_teacher)``
    and ``g_sup = 2(v_student - u*)``, evaluated with the live network.
    ``simplified``: ``-4 E||u* - v_teacher||^2``, where the student has cancelled.
    By default the two use independent draws, so their agreement is a genuine
    sampling check; ``common_draws=True`` reuses one set of draws.
    """
    out = []
    for tau in tau_grid:
        if not 0.0 <= tau <= 1.0:
            raise RangeError(f"student time {tau} outside [0, 1]")
        raw, simp = [], []
        for n in _chunks(samples, chunk):
            vs, vt, u = _efficiency_terms(field_net, live_params, ema_params, anchor, dataset,
                                          tau, n, rng)
            g_cons = 2.0 * (vs - vt)
            g_sup = 2.0 * (vs - u)
            raw.append(-np.sum((g_cons - g_sup) ** 2, axis=(1, 2)))
            if not common_draws:
                _, vt, u = _efficiency_terms(field_net, live_params, ema_params, anchor, dataset,
                                             tau, n, rng)
            simp.append(-4.0 * np.sum((u - vt) ** 2, axis=(1, 2)))
        r_mean, r_se = _mean_se(np.concatenate(raw))
        s_mean, s_se = _mean_se(np.concatenate(simp))
        out.append(EfficiencyEstimate(float(tau), r_mean, r_se, s_mean, s_se))
    return out


def is_monotone_decreasing(values):
    v = np.asarray(values)
    return bool(np.all(np.diff(v) < 0))


# -- CSV output --------------------------------------------------------------

EPISODE_COLUMNS = ("episode", "atv", "atv_expert", "atv_gap", "ts_score", "endpoint_error",
                   "success_rate", "nfe_per_decision", "inference_calls")


def write_episode_csv(path, reports):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPISODE_COLUMNS)
        w.writeheader()
        for k, rep in enumerate(reports):
            row = rep.row()
            w.writerow({c: (k if c == "episode" else row.get(c)) for c in EPISODE_COLUMNS})
    return path


def write_aggregate_csv(path, report, extra=None):
    path = Path(path)
    row = report.row()
    row.update(extra or {})
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    return path


def write_curves_csv(path, traces_or_curves):
    """One row per (episode, step) with the compounding error at that step."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "error"])
        for k, item in enumerate(traces_or_curves):
            curve = item.error_curve if hasattr(item, "error_curve") else np.asarray(item)
            for t, e in enumerate(curve):
                w.writerow([k, t, repr(float(e))])
    return path


def load_trace(d):
    return RolloutTrace.from_dict(d)
