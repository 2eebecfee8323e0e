"""Numerical checks of the method's theoretical properties.

Each ``check_*`` function returns a :class:`CheckResult`; :func:`run_checks`
runs a selection and the ``verify`` command exits nonzero if any fails.
Parameter-space gradient alignment is measured and reported, never asserted.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _rng
from .errors import ConfigurationError
from .network import VelocityField
from .objectives import (
    VARIANTS, ObjectiveConfig, draw, evaluate_objective, grad_inner_product,
    loss_freq_grad, loss_weighted_spectral_grad, objective_value,
    prediction_cosine,
)
from .sampler import AnchorConfig, dominates, sample_anchor
from .spectral import dct_forward, get_plan


@dataclass
class CheckResult:
    name: str
    passed: bool
    seed: int
    measured: dict = field(default_factory=dict)
    message: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.message})" if self.message else ""
        return f"{status} {self.name} seed={self.seed}{extra}"

    def to_dict(self):
        return asdict(self)


def _rel(a, b, floor=0.0):
    return abs(a - b) / max(abs(a), abs(b), floor) if max(abs(a), abs(b), floor) > 0 else 0.0


def check_parseval(trials=100, L_values=(2, 12, 36, 256), seed=0, tol=1e-10):
    rng = _rng.stream(seed, "verify/parseval")
    worst = 0.0
    for L in L_values:
        plan = get_plan(L)
        zero = np.zeros(L)
        if np.sum(dct_forward(plan, zero) ** 2) != 0.0:
            return CheckResult("parseval", False, seed, message=f"zero vector, L={L}")
        for _ in range(trials):
            x = rng.standard_normal(L)
            worst = max(worst, _rel(np.sum(x * x), np.sum(dct_forward(plan, x) ** 2)))
    passed = worst <= tol
    return CheckResult("parseval", passed, seed, {"max_rel_error": worst, "tolerance": tol},
                       "" if passed else f"max relative error {worst:.3e}")


def check_prediction_cosine(trials=1000, seed=0, tol=1e-12, max_len=64):
    rng = _rng.stream(seed, "verify/cosine")
    worst, nonpositive = 0.0, 0
    for _ in range(trials):
        L = int(rng.integers(1, max_len + 1))
        H = int(rng.integers(1, L + 1))
        e = rng.standard_normal(L)
        expected = np.linalg.norm(e[:H]) / np.linalg.norm(e)
        cos = prediction_cosine(e, H)
        worst = max(worst, abs(cos - expected))
        nonpositive += not cos > 0
    passed = worst <= tol and nonpositive == 0
    return CheckResult("prediction_cosine", passed, seed,
                       {"max_abs_error": worst, "nonpositive": nonpositive, "tolerance": tol},
                       "" if passed else f"max error {worst:.3e}, {nonpositive} non-positive")


def spectral_gain(L, c):
    """Max-abs gradient in coefficient space over max-abs gradient in the time domain
    for the constant error ``e = c * 1``."""
    e = np.full((L, 1), float(c))
    zeros = np.zeros_like(e)
    _, g_time = loss_freq_grad(get_plan(L), e, zeros)
    g_coeff = 2.0 * dct_forward(get_plan(L), e[:, 0])
    return float(np.max(np.abs(g_coeff)) / np.max(np.abs(g_time)))


def check_spectral_gain(L_values=(1, 16, 144), c_values=(0.25, 1.0, -3.0), seed=0, tol=1e-9):
    gains, worst = {}, 0.0
    for L in L_values:
        for c in c_values:
            g = spectral_gain(L, c)
            gains[f"L={L},c={c}"] = g
            worst = max(worst, abs(g - math.sqrt(L)))
    passed = worst <= tol
    return CheckResult("spectral_gain", passed, seed, {"gains": gains, "max_abs_error": worst},
                       "" if passed else f"max deviation from sqrt(L) {worst:.3e}")


def high_band_fraction(grad):
    """Share of spectral energy of a time-domain gradient in the upper half of the spectrum."""
    L = grad.shape[0]
    coeff = get_plan(L).basis @ grad
    energy = np.sum(coeff ** 2, axis=tuple(range(1, coeff.ndim)))
    return float(energy[L // 2:].sum() / energy.sum())


def check_weighted_gradient(trials=100, seed=0, tol=1e-9, max_len=32):
    rng = _rng.stream(seed, "verify/weighted")
    worst, attenuated = 0.0, 0
    for _ in range(trials):
        L = int(rng.integers(2, max_len + 1))
        d = int(rng.integers(1, 4))
        w = rng.uniform(0.1, 2.0, L)
        e = rng.standard_normal((L, d))
        D = get_plan(L).basis
        expected = D.T @ np.diag(w ** 2) @ D @ e
        _, g = loss_weighted_spectral_grad(get_plan(L), e, np.zeros_like(e), w)
        worst = max(worst, float(np.max(np.abs(g - expected))))
        low_pass = 1.0 / (1.0 + np.arange(L))
        _, g_lp = loss_weighted_spectral_grad(get_plan(L), e, np.zeros_like(e), low_pass)
        _, g_id = loss_weighted_spectral_grad(get_plan(L), e, np.zeros_like(e), np.ones(L))
        attenuated += high_band_fraction(g_lp) < high_band_fraction(g_id)
    passed = worst <= tol and attenuated == trials
    return CheckResult("weighted_gradient", passed, seed,
                       {"max_abs_error": worst, "low_pass_attenuated": attenuated, "trials": trials},
                       "" if passed else f"max error {worst:.3e}, attenuated {attenuated}/{trials}")


def check_anchor_distribution(anchor=None, samples=50_000, seed=0, grid_points=100):
    """Median, mass above 0.5 and pointwise CDF dominance over uniform."""
    anchor = anchor or AnchorConfig()
    rng = _rng.stream(seed, "verify/anchor")
    r = sample_anchor(anchor, rng, samples)
    u = rng.random(samples)
    grid = np.linspace(0.0, 1.0, grid_points)
    weak, strict = dominates(r, u, grid)
    median = float(np.median(r))
    mass = float(np.mean(r >= 0.5))
    passed = 0.975 <= median <= 0.989 and mass >= 0.93 and strict
    return CheckResult("anchor_distribution", passed, seed,
                       {"median": median, "mass_above_half": mass, "fsd_weak": weak,
                        "fsd_strict": strict},
                       "" if passed else f"median {median:.4f}, mass {mass:.4f}, fsd {strict}")


def _mean_se(x):
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x)))


def check_fsd_ordering(anchor=None, eps_fn=None, samples=50_000, seed=0, separation=5.0):
    """Under a decreasing teacher error, terminal-biased anchors give lower expected error."""
    anchor = anchor or AnchorConfig()
    eps_fn = eps_fn or (lambda s: (1.0 - s) ** 2)
    rng = _rng.stream(seed, "verify/fsd")
    r_las = sample_anchor(anchor, rng, samples)
    r_uni = rng.random(samples)
    m_las, se_las = _mean_se(eps_fn(r_las))
    m_uni, se_uni = _mean_se(eps_fn(r_uni))
    gap = (m_uni - m_las) / math.hypot(se_las, se_uni)
    uniform_z = abs(m_uni - 1.0 / 3.0) / se_uni
    passed = gap >= separation and uniform_z <= 3.0
    return CheckResult("fsd_ordering", passed, seed,
                       {"e_las": m_las, "se_las": se_las, "e_uniform": m_uni, "se_uniform": se_uni,
                        "separation_se": gap, "uniform_vs_analytic_se": uniform_z},
                       "" if passed else f"separation {gap:.2f} SE, uniform off by {uniform_z:.2f} SE")


def _fd_problem(seed, batch=4, horizon=12, action_dim=2, obs_dim=6):
    rng = _rng.stream(seed, "verify/fd")
    net = VelocityField(horizon, action_dim, obs_dim, hidden=(16, 16), time_embed_dim=8, rng=rng)
    teacher = net.params + 0.05 * rng.standard_normal(net.num_params)
    obs = rng.standard_normal((batch, obs_dim))
    m1 = rng.standard_normal((batch, horizon, action_dim))
    return rng, net, teacher, obs, m1


def fd_errors(cfg, seed=0, n_params=50, h=1e-5, anchor=None):
    """Relative errors of analytic vs central-difference gradients on ``n_params``
    randomly chosen parameters. The denominator is floored at ``1e-6 * max|grad|``
    so entries that are zero up to rounding do not produce spurious ratios."""
    rng, net, teacher, obs, m1 = _fd_problem(seed)
    draws = draw(cfg, anchor or AnchorConfig(), m1.shape[0], m1.shape[1], m1.shape[2], rng, rng, rng)
    _, grad, _ = evaluate_objective(cfg, net, teacher, obs, m1, draws)
    floor = 1e-6 * float(np.max(np.abs(grad)))
    idx = rng.choice(net.num_params, size=n_params, replace=False)
    errs = []
    for i in idx:
        p = net.params.copy()
        p[i] += h
        up = objective_value(cfg, net, teacher, obs, m1, draws, params=p)
        p[i] -= 2 * h
        down = objective_value(cfg, net, teacher, obs, m1, draws, params=p)
        errs.append(_rel((up - down) / (2 * h), grad[i], floor))
    return np.asarray(errs)


def check_gradients_fd(variants=VARIANTS, n_params=50, seed=0, tol=1e-5, lam=0.5):
    """Every objective variant's parameter gradient against central differences.

    A large ``lam`` keeps the spectral term visible in the comparison."""
    worst = {}
    for v in variants:
        cfg = ObjectiveConfig(v, lam=lam)
        worst[v] = float(np.max(fd_errors(cfg, seed, n_params)))
    bad = [v for v, e in worst.items() if not e < tol]
    return CheckResult("gradients_fd", not bad, seed, {"max_rel_error": worst, "tolerance": tol},
                       "" if not bad else f"variants over tolerance: {bad}")


def measure_param_cosine(batches=100, seed=0, cfg=None, horizon=12, action_dim=2, obs_dim=6,
                         batch_size=16):
    """Fraction of random batches on which the parameter gradients of the time and
    frequency terms have positive inner product, at a random initialization."""
    rng = _rng.stream(seed, "verify/param_cosine")
    net = VelocityField(horizon, action_dim, obs_dim, rng=rng)
    cosines = []
    for _ in range(batches):
        obs = rng.standard_normal((batch_size, obs_dim))
        m1 = rng.standard_normal((batch_size, horizon, action_dim))
        _, cos = grad_inner_product(net, (obs, m1), rng, cfg=cfg)
        cosines.append(cos)
    cosines = np.asarray(cosines)
    return CheckResult("param_cosine", True, seed,
                       {"positive_fraction": float(np.mean(cosines > 0)),
                        "mean_cosine": float(np.nanmean(cosines)), "batches": batches},
                       "measured only")


CHECKS = {
    "parseval": check_parseval,
    "prediction_cosine": check_prediction_cosine,
    "spectral_gain": check_spectral_gain,
    "weighted_gradient": check_weighted_gradient,
    "anchor_distribution": check_anchor_distribution,
    "fsd_ordering": check_fsd_ordering,
    "gradients_fd": check_gradients_fd,
    "param_cosine": measure_param_cosine,
}


def run_checks(only=None, seed=0):
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
    return [CHECKS[n](seed=seed) for n in names]


def json_default(x):
    return x.item() if isinstance(x, np.generic) else float(x)


def report_json(results):
    return json.dumps([r.to_dict() for r in results], indent=2, default=json_default)


def all_passed(results):
    return all(r.passed for r in results)

