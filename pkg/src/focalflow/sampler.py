"""Flow-time sampling: uniform student time and the anchor-time strategies."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError

ANCHOR_KINDS = ("uniform", "logit_normal", "fixed")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class AnchorConfig:
    kind: str = "logit_normal"
    mu: float = 4.0
    sigma: float = 1.6
    fixed_value: float = 1.0

    def __post_init__(self):
        if self.kind not in ANCHOR_KINDS:
            raise ConfigurationError(f"anchor kind must be one of {ANCHOR_KINDS}, got {self.kind!r}")
        if self.kind == "logit_normal" and not self.sigma > 0:
            raise ConfigurationError(f"logit-normal sigma must be positive, got {self.sigma}")
        if self.kind == "fixed" and not 0.0 <= self.fixed_value <= 1.0:
            raise ConfigurationError(f"fixed anchor must lie in [0, 1], got {self.fixed_value}")

    def to_dict(self):
        return asdict(self)


def sample_tau(rng, size=None):
    """Student time ``tau ~ U[0, 1]``."""
    return rng.random(size)


def anchor_from_normal(cfg, eps):
    """Map standard-normal draws to logit-normal anchors ``sigmoid(mu + sigma eps)``."""
    return sigmoid(cfg.mu + cfg.sigma * np.asarray(eps, dtype=np.float64))


def sample_anchor(cfg, rng, size=None):
    """Anchor (teacher) time ``r`` under ``cfg``; independent of ``tau``."""
    if cfg.kind == "logit_normal":
        r = anchor_from_normal(cfg, rng.standard_normal(size))
    elif cfg.kind == "fixed":
        r = np.full(() if size is None else size, float(cfg.fixed_value))
    else:
        r = rng.random(size)
    return float(r) if size is None else r


def logit_normal_median(mu):
    """The median of ``sigmoid(N(mu, sigma^2))`` is ``sigmoid(mu)`` for any sigma."""
    return float(sigmoid(np.array([mu]))[0])


def empirical_cdf(samples, grid):
    s = np.sort(np.asarray(samples))
    return np.searchsorted(s, np.asarray(grid), side="right") / s.size


def dominates(samples_a, samples_b, grid):
    """First-order stochastic dominance of ``a`` over ``b`` on a threshold grid.

    Returns ``(weak, strict)``: ``weak`` when ``F_a <= F_b`` at every grid point,
    ``strict`` when additionally ``F_a < F_b`` somewhere.
    """
    fa = empirical_cdf(samples_a, grid)
    fb = empirical_cdf(samples_b, grid)
    weak = bool(np.all(fa <= fb))
    return weak, weak and bool(np.any(fa < fb))
