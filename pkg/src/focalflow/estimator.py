"""scikit-learn style estimator around the training and inference pipeline."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _rng
from .errors import ConfigurationError
from .evaluation import evaluate_policy
from .objectives import ObjectiveConfig
from .sampler import AnchorConfig
from .trajectory import Dataset, Demonstration
from .training import TrainConfig, policy_from_state, run_training


class FocalPolicy(BaseEstimator):
    """One-step action-chunk policy trained with the composite objective.

    ``fit`` takes a list of :class:`Demonstration`; ``predict`` maps raw
    observations to raw ``(L, d)`` action sequences; ``score`` is the negative
    mean open-loop endpoint error on demonstrations.

    Parameters
    ----------
    chunk_size, num_chunks : int
        Executed chunk length ``H`` and number of chunks ``N`` in a macro-trajectory.
    variant : str
        Objective variant, ``"focal"`` for the full method.
    lam : float
        Weight of the spectral term.
    anchor_mu, anchor_sigma : float
        Logit-normal anchor-time parameters.
    """

    def __init__(self, chunk_size=4, num_chunks=3, n_obs=2, variant="focal", lam=1e-4,
                 anchor_mu=4.0, anchor_sigma=1.6, steps=2000, batch_size=64,
                 learning_rate=1e-4, warmup_steps=500, hidden=(128, 128), seed=0):
        self.chunk_size = chunk_size
        self.num_chunks = num_chunks
        self.n_obs = n_obs
        self.variant = variant
        self.lam = lam
        self.anchor_mu = anchor_mu
        self.anchor_sigma = anchor_sigma
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.hidden = hidden
        self.seed = seed

    def _train_config(self):
        objective = ObjectiveConfig(self.variant, lam=self.lam, prefix_len=self.chunk_size)
        anchor = AnchorConfig("logit_normal", self.anchor_mu, self.anchor_sigma)
        return TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, warmup_steps=self.warmup_steps,
                           hidden=tuple(self.hidden), seed=self.seed,
                           objective=objective, anchor=anchor)

    def fit(self, X, y=None):
        demos = list(X)
        if not demos or not all(isinstance(d, Demonstration) for d in demos):
            raise ConfigurationError("fit expects a non-empty list of Demonstration objects")
        self.dataset_ = Dataset(demos, self.chunk_size, self.num_chunks, self.n_obs)
        result = run_training(self._train_config(), self.dataset_)
        self.state_ = result.state
        self.metrics_ = result.rows
        self.policy_ = policy_from_state(self.state_, self.dataset_)
        self.n_features_in_ = self.dataset_.obs_dim
        return self

    def predict(self, X, rng=None):
        """Raw action sequences of shape ``(n, L, d)`` for raw observations ``(n, obs_dim)``."""
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, the policy was fitted with {self.n_features_in_}"
            )
        rng = rng if rng is not None else _rng.stream(self.seed, "predict")
        return np.stack([self.policy_.act(x, rng) for x in X])

    def score(self, X, y=None, episodes=None):
        check_is_fitted(self, "state_")
        demos = list(X)
        _, _, agg = evaluate_policy(self.policy_, demos, episodes or len(demos), "open_loop",
                                    rng=_rng.stream(self.seed, "score"))
        return -agg.endpoint_error
