"""A small reverse-mode differentiable core built on numpy."""
from .functional import cross_entropy, softmax, squared_error
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
    Softmax,
)
from .optim import SGD
from .tensor import Buffer, ConfigError, NonFiniteError, Parameter, Tensor, check_finite, resolve_dtype

__all__ = [
    "BatchNorm2d", "Buffer", "ConfigError", "Conv2d", "ConvTranspose2d", "Dense", "Dropout",
    "Flatten", "GradCheckReport", "MaxPool2d", "Module", "NonFiniteError", "Parameter", "ReLU",
    "SGD", "Sequential", "Softmax", "Tensor", "check_finite", "cross_entropy", "grad_check",
    "resolve_dtype", "softmax", "squared_error",
]
