from __future__ import annotations

from typing import Iterable

from .tensor import ConfigError, Parameter


class SGD:
    """Plain gradient descent over a named parameter registry.

    ``step(names)`` updates exactly the listed parameters and clears their
    gradients; everything else in the registry is left untouched, which is how
    the training phases freeze the groups they do not own.
    """

    def __init__(self, params: dict[str, Parameter], lr: float):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr

    def step(self, names: Iterable[str]) -> None:
        names = list(names)
        for name in names:
            p = self.params[name]
            if p.grad is None:
                raise RuntimeError(f"sgd_step: no gradient for {name!r}; run backward first")
        for name in names:
            p = self.params[name]
            p.data -= (self.lr * p.grad).astype(p.data.dtype, copy=False)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
