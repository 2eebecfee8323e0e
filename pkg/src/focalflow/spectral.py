"""Orthonormal DCT-II over length-L sequences.

The full ``L x L`` basis is built once per plan; transforms are dense matrix
products, which is the right trade at the horizons used here (L <= a few
hundred).
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DimensionError, RangeError


def dct_basis(length):
    """Orthonormal DCT-II matrix; row ``u`` is ``c_u cos(pi/L (i + 1/2) u)``."""
    if length < 1:
        raise RangeError(f"DCT length must be positive, got {length}")
    i = np.arange(length, dtype=np.float64)
    u = np.arange(length, dtype=np.float64)[:, None]
    basis = np.cos(np.pi / length * (i + 0.5) * u)
    scale = np.full(length, np.sqrt(2.0 / length))
    scale[0] = np.sqrt(1.0 / length)
    return basis * scale[:, None]


@dataclass(frozen=True)
class DctPlan:
    """Precomputed basis for one transform length. Immutable."""

    length: int
    basis: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def create(cls, length):
        basis = dct_basis(int(length))
        basis.setflags(write=False)
        return cls(int(length), basis)

    def _check(self, n, what):
        if n != self.length:
            raise DimensionError(
                f"{what} has length {n}, plan expects length {self.length}"
            )


_PLANS = {}


def get_plan(length):
    """Cached plan lookup; plans are immutable so sharing is safe."""
    plan = _PLANS.get(length)
    if plan is None:
        plan = _PLANS.setdefault(length, DctPlan.create(length))
    return plan


def dct_forward(plan, signal):
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"signal must be 1-D, got shape {x.shape}")
    plan._check(x.shape[0], "signal")
    return plan.basis @ x


def dct_inverse(plan, coeffs):
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 1:
        raise DimensionError(f"coefficients must be 1-D, got shape {c.shape}")
    plan._check(c.shape[0], "coefficients")
    return plan.basis.T @ c


def dct_trajectory(plan, traj):
    """Column-wise DCT of an ``(..., L, d)`` array (time along axis -2)."""
    a = np.asarray(getattr(traj, "actions", traj), dtype=np.float64)
    if a.ndim < 2:
        raise DimensionError(f"trajectory must be at least 2-D, got shape {a.shape}")
    plan._check(a.shape[-2], "trajectory")
    return np.matmul(plan.basis, a)


def idct_trajectory(plan, coeffs):
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim < 2:
        raise DimensionError(f"coefficients must be at least 2-D, got shape {c.shape}")
    plan._check(c.shape[-2], "coefficients")
    return np.matmul(plan.basis.T, c)


class DctTransformer(TransformerMixin, BaseEstimator):
    """Per-column orthonormal DCT-II as a scikit-learn transformer.

    ``X`` has shape ``(L, d)``: rows are time steps, columns are action
    dimensions.  ``fit`` only records ``L``.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.length_ = X.shape[0]
        self.plan_ = get_plan(self.length_)
        return self

    def transform(self, X):
        check_is_fitted(self, "plan_")
        X = check_array(X, dtype=np.float64)
        return dct_trajectory(self.plan_, X)

    def inverse_transform(self, X):
        check_is_fitted(self, "plan_")
        X = check_array(X, dtype=np.float64)
        return idct_trajectory(self.plan_, X)
