"""Training objectives, their ablations and the gradient-alignment probe.

Every loss is reduced as the mean over the batch of the per-sample squared
norm summed over all ``L x d`` entries (a single ``(L, d)`` sample is just the
squared norm).  Each loss also returns its gradient with respect to the
student prediction so the network can be differentiated by one reverse pass
per term.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, RangeError
from .flow import ot_interpolate, terminal_prediction
from .sampler import AnchorConfig, sample_anchor, sample_tau
from .spectral import get_plan

VARIANTS = (
    "focal", "wo_las", "wo_fco_las", "time_only_fco", "freq_only_fco", "fixed_r_las",
    "fco_full_macro", "fco_prox_freq", "fm_baseline", "flowpolicy_baseline",
    "weighted_spectral",
)
BAND_MASKS = ("all", "low_only", "high_only")
SPECTRAL_VARIANTS = (
    "focal", "wo_las", "freq_only_fco", "fixed_r_las", "fco_full_macro", "fco_prox_freq",
    "weighted_spectral",
)
CONSISTENCY_VARIANTS = ("wo_fco_las", "flowpolicy_baseline")


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "focal"
    lam: float = 1e-4
    alpha: float = 1.0
    delta_tau: float = 1e-2
    prefix_len: int = 4
    spectral_weights: tuple = None
    band_mask: str = "all"
    band_split: int = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown objective variant {self.variant!r}; choose from {VARIANTS}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")
        if not 0 < self.delta_tau < 1:
            raise ConfigurationError(f"delta_tau must lie in (0, 1), got {self.delta_tau}")
        if self.prefix_len < 1:
            raise ConfigurationError(f"prefix_len must be positive, got {self.prefix_len}")
        if self.band_mask not in BAND_MASKS:
            raise ConfigurationError(f"band_mask must be one of {BAND_MASKS}, got {self.band_mask!r}")
        if self.band_mask != "all" and self.variant not in SPECTRAL_VARIANTS:
            raise ConfigurationError(f"band_mask={self.band_mask!r} needs a spectral term; "
                                     f"variant {self.variant!r} has none")
        if self.spectral_weights is not None:
            w = tuple(float(x) for x in self.spectral_weights)
            if any(not x > 0 for x in w):
                raise ConfigurationError("spectral weights must all be positive")
            if self.variant != "weighted_spectral":
                raise ConfigurationError("spectral_weights only apply to the weighted_spectral variant")
            object.__setattr__(self, "spectral_weights", w)

    def check_horizon(self, horizon):
        if self.prefix_len > horizon:
            raise RangeError(f"prefix_len {self.prefix_len} exceeds horizon {horizon}")
        if self.spectral_weights is not None and len(self.spectral_weights) != horizon:
            raise ConfigurationError(
                f"{len(self.spectral_weights)} spectral weights for horizon {horizon}"
            )
        if self.band_split is not None and not 0 < self.band_split < horizon:
            raise ConfigurationError(f"band_split must lie in (0, {horizon}), got {self.band_split}")
        return self

    def anchor_for(self, anchor):
        """Anchor distribution actually used by this variant."""
        if self.variant == "wo_las":
            return AnchorConfig("uniform", anchor.mu, anchor.sigma, anchor.fixed_value)
        if self.variant == "fixed_r_las":
            return AnchorConfig("fixed", anchor.mu, anchor.sigma, 1.0)
        return anchor

    def weights(self, horizon):
        if self.spectral_weights is not None:
            return np.asarray(self.spectral_weights)
        return 1.0 / (1.0 + np.arange(horizon))  # default low-pass profile

    def band(self, horizon):
        if self.band_mask == "all":
            return None
        split = self.band_split or math.ceil(horizon / 4)
        low = np.arange(horizon) < split
        return low if self.band_mask == "low_only" else ~low

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["spectral_weights"] is not None:
            d["spectral_weights"] = list(d["spectral_weights"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if d.get("spectral_weights") is not None:
            d["spectral_weights"] = tuple(d["spectral_weights"])
        return cls(**d)


@dataclass
class LossReport:
    loss_time: float = math.nan
    loss_freq: float = math.nan
    loss_aux: float = math.nan
    loss_total: float = math.nan
    grad_norm: float = math.nan
    grad_norm_time: float = math.nan
    grad_norm_freq: float = math.nan
    grad_inner: float = math.nan
    grad_cos: float = math.nan
    frac_r_below_tau: float = math.nan
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in d.items()}


# -- prediction-level losses -------------------------------------------------

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DimensionError(f"expected (L, d) or (B, L, d), got {a.shape}")
    return a, b


def _batch(a):
    return a.shape[0] if a.ndim == 3 else 1


def squared_norm(diff):
    """Mean over batch of per-sample squared norms, and its gradient."""
    B = _batch(diff)
    return float(np.sum(diff * diff)) / B, (2.0 / B) * diff


def loss_time_grad(student, teacher, prefix_len):
    student, teacher = _check_pair(student, teacher)
    L = student.shape[-2]
    if not 1 <= prefix_len <= L:
        raise RangeError(f"prefix length {prefix_len} outside [1, {L}]")
    diff = np.zeros_like(student)
    diff[..., :prefix_len, :] = student[..., :prefix_len, :] - teacher[..., :prefix_len, :]
    return squared_norm(diff)


def loss_time(student, teacher, prefix_len):
    """Squared distance over the first ``prefix_len`` rows; the teacher is a constant."""
    return loss_time_grad(student, teacher, prefix_len)[0]


def loss_freq_grad(plan, pred, expert, band=None):
    pred, expert = _check_pair(pred, expert)
    if pred.shape[-2] != plan.length:
        raise DimensionError(f"trajectory length {pred.shape[-2]} != DCT length {plan.length}")
    D = plan.basis
    coeff = np.matmul(D, pred - expert)
    if band is not None:
        coeff = coeff * np.asarray(band, dtype=np.float64)[:, None]
    value, g_coeff = squared_norm(coeff)
    if band is not None:
        g_coeff = g_coeff * np.asarray(band, dtype=np.float64)[:, None]
    return value, np.matmul(D.T, g_coeff)


def loss_freq(plan, pred, expert, band=None):
    """``||DCT(pred) - DCT(expert)||^2`` summed over action dimensions."""
    return loss_freq_grad(plan, pred, expert, band)[0]


def loss_weighted_spectral_grad(plan, pred, expert, weights):
    """``1/2 ||W DCT(e)||^2`` and its gradient ``D^T W^2 D e``."""
    pred, expert = _check_pair(pred, expert)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (plan.length,):
        raise DimensionError(f"{w.shape[0]} weights for DCT length {plan.length}")
    D = plan.basis
    coeff = np.matmul(D, pred - expert)
    wc = coeff * w[:, None]
    B = _batch(pred)
    value = 0.5 * float(np.sum(wc * wc)) / B
    grad = np.matmul(D.T, wc * w[:, None]) / B
    return value, grad


def mse_grad(pred, expert):
    """Mean-reduced squared error over all entries of each sample."""
    pred, expert = _check_pair(pred, expert)
    n = pred.shape[-2] * pred.shape[-1]
    value, grad = squared_norm(pred - expert)
    return value / n, grad / n


@dataclass
class Term:
    name: str
    weight: float
    value: float
    grad_pred: np.ndarray = None   # gradient w.r.t. the student terminal prediction
    grad_vel: np.ndarray = None    # gradient w.r.t. the student velocity


def fco_terms(cfg, student, teacher, expert):
    """Prediction-level terms of the FCO family of variants.

    Returns a list of :class:`Term`; the total loss is ``sum(weight * value)``.
    """
    student, expert = _check_pair(student, expert)
    L = student.shape[-2]
    cfg.check_horizon(L)
    v = cfg.variant
    terms = []
    if v != "freq_only_fco":
        if teacher is None:
            raise ConfigurationError(f"variant {v!r} needs a teacher prediction")
        prefix = L if v in ("fco_full_macro", "fco_prox_freq") else cfg.prefix_len
        val, g = loss_time_grad(student, teacher, prefix)
        terms.append(Term("time", 1.0, val, grad_pred=g))
    if v == "time_only_fco":
        val, g = mse_grad(student, expert)
        terms.append(Term("freq", 1.0, val, grad_pred=g))
    elif v == "weighted_spectral":
        val, g = loss_weighted_spectral_grad(get_plan(L), student, expert, cfg.weights(L))
        terms.append(Term("freq", cfg.lam, val, grad_pred=g))
    elif v == "fco_prox_freq":
        H = cfg.prefix_len
        val, g_prefix = loss_freq_grad(get_plan(H), student[..., :H, :], expert[..., :H, :])
        g = np.zeros_like(student)
        g[..., :H, :] = g_prefix
        terms.append(Term("freq", cfg.lam, val, grad_pred=g))
    elif v in SPECTRAL_VARIANTS:
        val, g = loss_freq_grad(get_plan(L), student, expert, cfg.band(L))
        terms.append(Term("freq", cfg.lam, val, grad_pred=g))
    else:
        raise ConfigurationError(f"variant {v!r} is not a composite-objective variant")
    return terms


def loss_fco(cfg, student_pred, teacher_pred, expert):
    """Prediction-level composite objective. Returns ``(total, LossReport)``."""
    terms = fco_terms(cfg, student_pred, teacher_pred, expert)
    return _report_from_terms(terms)


def _report_from_terms(terms, grads=None):
    rep = LossReport()
    total = 0.0
    for t in terms:
        total += t.weight * t.value
        if t.name == "time":
            rep.loss_time = t.value
        elif t.name == "freq":
            rep.loss_freq = t.value
        else:
            rep.loss_aux = t.value
    rep.loss_total = total
    if grads is not None:
        by_name = {t.name: t.weight * g for t, g in zip(terms, grads)}
        g_total = sum(by_name.values())
        rep.grad_norm = float(np.linalg.norm(g_total))
        gt, gf = by_name.get("time"), by_name.get("freq")
        if gt is not None:
            rep.grad_norm_time = float(np.linalg.norm(gt))
        if gf is not None:
            rep.grad_norm_freq = float(np.linalg.norm(gf))
        if gt is not None and gf is not None:
            inner, cos = inner_and_cosine(gt, gf)
            rep.grad_inner, rep.grad_cos = inner, cos
    return total, rep


def inner_and_cosine(a, b):
    """Inner product and cosine; cosine is NaN when either vector is zero."""
    a = np.ravel(a)
    b = np.ravel(b)
    inner = float(a @ b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return inner, math.nan
    return inner, inner / (na * nb)


def prediction_cosine(error, prefix_len):
    """Cosine between the prediction-space gradients of the full-horizon spectral
    loss and the prefix time loss for a single-dimension error vector."""
    e = np.asarray(error, dtype=np.float64).reshape(-1, 1)
    L = e.shape[0]
    zeros = np.zeros_like(e)
    _, g_freq = loss_freq_grad(get_plan(L), e, zeros)
    _, g_time = loss_time_grad(e, zeros, prefix_len)
    return inner_and_cosine(g_freq, g_time)[1]


# -- network-level objectives ------------------------------------------------

@dataclass
class Draws:
    """Random inputs of one objective evaluation: noise and the two flow times."""

    noise: np.ndarray
    tau: np.ndarray
    r: np.ndarray


def draw(cfg, anchor, batch_size, horizon, action_dim, noise_rng, tau_rng, r_rng):
    """Sample ``M_0``, ``tau`` and the teacher time for ``batch_size`` windows."""
    noise = noise_rng.standard_normal((batch_size, horizon, action_dim))
    tau = sample_tau(tau_rng, batch_size)
    if cfg.variant in CONSISTENCY_VARIANTS:
        # uniform on [0, 1 - dt]: same law as rejection-resampling tau + dt > 1
        tau = tau * (1.0 - cfg.delta_tau)
        r = tau + cfg.delta_tau
    elif cfg.variant == "fm_baseline":
        r = tau.copy()
    else:
        r = np.asarray(sample_anchor(cfg.anchor_for(anchor), r_rng, batch_size), dtype=np.float64)
    return Draws(noise, tau, r)


def network_terms(cfg, net, teacher_params, obs, expert, draws):
    """Student forward (recorded), teacher forward (constant) and the loss terms.

    Returns ``(terms, tape)``; each term carries its gradient w.r.t. the
    student velocity in ``grad_vel``.
    """
    expert = np.asarray(expert, dtype=np.float64)
    noise, tau, r = draws.noise, draws.tau, draws.r
    if np.any(r > 1.0):
        raise RangeError("teacher time exceeds 1; resample tau")
    m_tau = ot_interpolate(noise, expert, tau)
    v_s, tape = net.forward(m_tau, tau, obs, record=True)
    one_minus = (1.0 - tau)[:, None, None]
    v = cfg.variant
    if v == "fm_baseline":
        val, g = squared_norm(v_s - (expert - noise))
        return [Term("fm", 1.0, val, grad_vel=g)], tape
    m_r = ot_interpolate(noise, expert, r)
    # teacher branch: parameters theta^-, no tape, so no gradient flows into it
    v_t = net.forward(m_r, r, obs, params=teacher_params)
    f_s = terminal_prediction(m_tau, tau, v_s)
    f_t = terminal_prediction(m_r, r, v_t)
    if v in CONSISTENCY_VARIANTS:
        val_f, g_f = squared_norm(f_s - f_t)
        val_v, g_v = squared_norm(v_s - v_t)
        return [Term("time", 1.0, val_f, grad_vel=one_minus * g_f),
                Term("velocity", cfg.alpha, val_v, grad_vel=g_v)], tape
    terms = fco_terms(cfg, f_s, f_t, expert)
    for t in terms:
        t.grad_vel = one_minus * t.grad_pred
    return terms, tape


def evaluate_objective(cfg, net, teacher_params, obs, expert, draws):
    """Total loss, its parameter gradient and a :class:`LossReport`."""
    terms, tape = network_terms(cfg, net, teacher_params, obs, expert, draws)
    grads = [net.backward(tape, t.grad_vel) for t in terms]
    total, rep = _report_from_terms(terms, grads)
    grad = sum(t.weight * g for t, g in zip(terms, grads))
    rep.frac_r_below_tau = float(np.mean(draws.r < draws.tau))
    return total, grad, rep


def objective_value(cfg, net, teacher_params, obs, expert, draws, params=None):
    """Loss only, optionally at substitute live parameters (for finite differences)."""
    if params is not None:
        net = net.clone(params)
    terms, _ = network_terms(cfg, net, teacher_params, obs, expert, draws)
    return sum(t.weight * t.value for t in terms)


def _draws_from(rng, cfg, anchor, obs, expert):
    expert = np.asarray(expert)
    B, L, d = expert.shape
    return draw(cfg, anchor, B, L, d, rng, rng, rng)


def loss_fm(net, batch, rng):
    """Plain flow-matching regression onto ``x1 - x0`` with uniform ``tau``."""
    obs, expert = batch
    cfg = ObjectiveConfig("fm_baseline", prefix_len=1)
    d = _draws_from(rng, cfg, AnchorConfig(), obs, expert)
    return objective_value(cfg, net, net.params, obs, expert, d)


def loss_flowpolicy(net, ema, batch, rng, alpha=1.0, delta_tau=1e-2):
    """Adjacent-time consistency loss with an EMA teacher at ``tau + delta_tau``."""
    obs, expert = batch
    cfg = ObjectiveConfig("wo_fco_las", alpha=alpha, delta_tau=delta_tau, prefix_len=1)
    d = _draws_from(rng, cfg, AnchorConfig(), obs, expert)
    return objective_value(cfg, net, getattr(ema, "params", ema), obs, expert, d)


def grad_inner_product(net, batch, rng, cfg=None, anchor=None, teacher_params=None):
    """Inner product and cosine of the parameter gradients of the time and
    frequency terms on one batch (two reverse passes over one tape)."""
    cfg = cfg or ObjectiveConfig()
    anchor = anchor or AnchorConfig()
    obs, expert = batch
    d = _draws_from(rng, cfg, anchor, obs, expert)
    tp = net.params if teacher_params is None else teacher_params
    terms, tape = network_terms(cfg, net, tp, obs, expert, d)
    by_name = {t.name: net.backward(tape, t.grad_vel) for t in terms}
    if "time" not in by_name or "freq" not in by_name:
        raise ConfigurationError(f"variant {cfg.variant!r} lacks a time or frequency term")
    return inner_and_cosine(by_name["freq"], by_name["time"])


def with_variant(cfg, variant):
    return replace(cfg, variant=variant)
