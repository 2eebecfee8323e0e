"""One-step action-chunk policies trained with consistency flow matching, a
prefix-plus-spectral composite objective and terminal-biased anchor times."""

from .estimator import FocalPolicy
from .objectives import ObjectiveConfig
from .sampler import AnchorConfig
from .training import TrainConfig, run_training
from .trajectory import Dataset, Demonstration, generate_expert

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig", "Dataset", "Demonstration", "FocalPolicy", "ObjectiveConfig",
    "TrainConfig", "generate_expert", "run_training",
]
