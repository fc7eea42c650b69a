"""Competitive squeeze-and-excitation residual networks on a minimal
numpy autodiff core."""

from .attention import AttentionConfig, AttentionMode
from .network import NetworkSpec, build, param_count
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train

__all__ = [
    "AttentionConfig", "AttentionMode", "NetworkSpec", "build", "param_count",
    "Tensor", "no_grad", "TrainConfig", "evaluate", "train",
]

__version__ = "0.1.0"
