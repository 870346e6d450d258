"""Stability-certified residual networks on the nonnegative orthant.

Numpy implementation of ResNet-D / ResNet-S classifiers, their convolution
operators in matrix form, discrete stability certificates, the continuous-time
projected dynamics behind them and a small training/robustness toolkit.
"""

from .conv import PaddingMode, adjoint_conv, conv2d, materialize
from .errors import (
    ConfigError,
    ConstraintViolation,
    ConvergenceError,
    LayerError,
    NumericalError,
    ShapeError,
)
from .network import NetworkSpec, ParamStore, forward, load_model, save_model
from .tensor import Feature, Filter, devectorize, norm, vectorize

__version__ = "0.1.0"

__all__ = [
    "PaddingMode",
    "conv2d",
    "adjoint_conv",
    "materialize",
    "NetworkSpec",
    "ParamStore",
    "forward",
    "save_model",
    "load_model",
    "Feature",
    "Filter",
    "vectorize",
    "devectorize",
    "norm",
    "ShapeError",
    "ConstraintViolation",
    "ConvergenceError",
    "NumericalError",
    "LayerError",
    "ConfigError",
]
