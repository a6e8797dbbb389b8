"""SpectralFormer hyperspectral classifier on a from-scratch autodiff core."""

from .model import ModelConfig, forward, init_params
from .training import TrainConfig, train

__all__ = ["ModelConfig", "TrainConfig", "forward", "init_params", "train"]
__version__ = "0.1.0"
