"""Consistency-model generative engine for mel-like sequence data."""

from .autodiff import Rng, Tensor
from .model import Conditioning, Sample
from .schedule import Curriculum, TimeGrid, build_grid, curriculum_at
from .training import TrainConfig, Trainer

__all__ = [
    "Rng",
    "Tensor",
    "Sample",
    "Conditioning",
    "TimeGrid",
    "Curriculum",
    "build_grid",
    "curriculum_at",
    "TrainConfig",
    "Trainer",
]

__version__ = "0.1.0"
