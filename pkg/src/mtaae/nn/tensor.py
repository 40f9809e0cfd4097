from __future__ import annotations

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class ConfigError(ValueError):
    """Inconsistent shapes, kernel geometry or model configuration."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str) and precision in _DTYPES:
        return np.dtype(_DTYPES[precision])
    try:
        dtype = np.dtype(precision)
    except TypeError:
        dtype = None
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unknown precision {precision!r}; use f32 or f64")
    return dtype


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """Dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A trainable tensor."""

    __slots__ = ()


class Buffer(Tensor):
    """Non-trainable state saved with the model (batch-norm running stats)."""

    __slots__ = ()
