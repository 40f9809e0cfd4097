"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .layers import Dropout, Module


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    input_error: float | None = None

    @property
    def per_layer(self) -> dict[str, float]:
        out: dict[str, float] = defaultdict(float)
        for name, err in self.per_param.items():
            layer = name.rsplit(".", 1)[0] if "." in name else name
            out[layer] = max(out[layer], err)
        return dict(out)

    @property
    def max_error(self) -> float:
        errs = list(self.per_param.values())
        if self.input_error is not None:
            errs.append(self.input_error)
        return max(errs) if errs else 0.0

    def format(self) -> str:
        lines = [f"{name:<40s} {err:.3e}" for name, err in sorted(self.per_layer.items())]
        if self.input_error is not None:
            lines.append(f"{'<input>':<40s} {self.input_error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def _dropouts(module: Module):
    if isinstance(module, Dropout):
        yield module
    for _, child in module.children():
        yield from _dropouts(child)


def grad_check(module: Module, x: np.ndarray, *, train: bool = True, eps: float = 1e-5,
               seed: int = 0, check_input: bool = True, max_entries: int | None = None
               ) -> GradCheckReport:
    """Compare backward-pass gradients with central differences.

    The scalar probed is ``sum(R * module(x))`` for a fixed random ``R``.
    Dropout layers get their mask frozen after one forward so the function
    being differentiated is deterministic.  ``max_entries`` caps how many
    entries per parameter are perturbed (chosen at random); ``None`` checks
    every entry.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    drops = list(_dropouts(module))
    saved = [d.fixed_mask for d in drops]
    try:
        out = module.forward(x, train)
        for d in drops:
            if d._mask is not None:
                d.fixed_mask = d._mask
        proj = rng.standard_normal(out.shape)

        def loss(inp):
            return float((module.forward(inp, train) * proj).sum())

        module.zero_grad()
        module.forward(x, train)
        gx = module.backward(proj)
        report = GradCheckReport()
        for name, p in module.named_parameters():
            analytic = p.grad.copy()
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss(x)
                flat[i] = orig - eps
                down = loss(x)
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
            report.per_param[name] = relative_error(analytic.reshape(-1)[idx], numeric)
        if check_input:
            flat = x.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss(x)
                flat[i] = orig - eps
                down = loss(x)
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
            report.input_error = relative_error(gx.reshape(-1)[idx], numeric)
        module.zero_grad()
        return report
    finally:
        for d, m in zip(drops, saved):
            d.fixed_mask = m
