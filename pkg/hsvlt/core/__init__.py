"""
Core engine: reverse-mode tensors, ops, modules, optimizers, config and containers
"""

from .errors import (
    HsvltError,
    ShapeError,
    ConfigError,
    ContainerError,
    NonNegativeError,
    LabelError,
    NoPositiveLabelsError,
    DivergenceError,
    GradientCheckError
)
from .rng import Rng
from .tensor import Tensor, precision, no_grad
from .config import ExperimentConfig, ModelConfig, TrainConfig, get_preset, load_config, dump_config
from .container import save_tensor, load_tensor, save_archive, load_archive
from .gradcheck import grad_check, grad_check_parameters

__all__ = [
    "HsvltError",
    "ShapeError",
    "ConfigError",
    "ContainerError",
    "NonNegativeError",
    "LabelError",
    "NoPositiveLabelsError",
    "DivergenceError",
    "GradientCheckError",
    "Rng",
    "Tensor",
    "precision",
    "no_grad",
    "ExperimentConfig",
    "ModelConfig",
    "TrainConfig",
    "get_preset",
    "load_config",
    "dump_config",
    "save_tensor",
    "load_tensor",
    "save_archive",
    "load_archive",
    "grad_check",
    "grad_check_parameters"
]
