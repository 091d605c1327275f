"""Unrolled convolutional dictionary learning for grayscale image denoising."""

from .errors import CDLError, ContractError, NumericError
from .model import ModelConfig, ModelParams, complexity_estimate, forward, init_params, thresholds_at
from .tensor_core import (
    FilterBank,
    conv_analysis,
    conv_synthesis,
    project_unit_ball,
    soft_threshold,
    spectral_norm,
)

__version__ = "0.1.0"

__all__ = [
    "CDLError",
    "ContractError",
    "NumericError",
    "FilterBank",
    "ModelConfig",
    "ModelParams",
    "complexity_estimate",
    "conv_analysis",
    "conv_synthesis",
    "forward",
    "init_params",
    "project_unit_ball",
    "soft_threshold",
    "spectral_norm",
    "thresholds_at",
]
