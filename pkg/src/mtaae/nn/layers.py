"""Layer objects with cached forward state and explicit backward passes.

A layer's ``forward`` stores what its ``backward`` needs; ``backward`` takes the
gradient of the loss w.r.t. the layer output, accumulates parameter gradients
and returns the gradient w.r.t. the layer input.  ``Sequential.backward`` walks
the stack in reverse, which is reverse-mode differentiation over the chain.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Buffer, ConfigError, Parameter


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    kind = "module"

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, Buffer] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train)

    def __getattr__(self, name):
        # only reached when normal lookup fails: expose parameters and buffers by name
        for store in ("_params", "_buffers"):
            table = self.__dict__.get(store, {})
            if name in table:
                return table[name]
        raise AttributeError(f"{type(self).__name__!s} has no attribute {name!r}")

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def _bias(self):
        p = self._params.get("bias")
        return p.data if p is not None else self._zero_bias

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def _init_bias(layer: Module, n: int, dtype, trainable: bool) -> None:
    # a layer feeding batchnorm gets a fixed zero bias: the normalisation cancels any shift
    if trainable:
        layer._params["bias"] = Parameter(np.zeros(n, dtype=dtype))
    else:
        layer._zero_bias = np.zeros(n, dtype=dtype)


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, cin, cout, kernel, stride=1, padding=0, *, rng, dtype=np.float32, bias=True):
        super().__init__()
        kh, kw = F._pair(kernel)
        self.stride, self.padding = F._pair(stride), F._pair(padding)
        self._params["weight"] = Parameter(glorot_uniform(
            rng, (cout, cin, kh, kw), cin * kh * kw, cout * kh * kw, dtype))
        _init_bias(self, cout, dtype, bias)
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.conv2d_forward(
            x, self._params["weight"].data, self._bias(), self.stride, self.padding)
        return out

    def backward(self, gout):
        gx, gw, gb = F.conv2d_backward(gout, self._cache)
        self._params["weight"].accumulate(gw)
        if "bias" in self._params:
            self._params["bias"].accumulate(gb)
        return gx


class ConvTranspose2d(Module):
    kind = "transposed_conv2d"

    def __init__(self, cin, cout, kernel, stride=1, padding=0, *, rng, dtype=np.float32, bias=True):
        super().__init__()
        kh, kw = F._pair(kernel)
        self.stride, self.padding = F._pair(stride), F._pair(padding)
        self._params["weight"] = Parameter(glorot_uniform(
            rng, (cin, cout, kh, kw), cin * kh * kw, cout * kh * kw, dtype))
        _init_bias(self, cout, dtype, bias)
        self._cache = None

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self._params["weight"].shape[2:]
        return (F.tconv_output_size(h, kh, self.stride[0], self.padding[0]),
                F.tconv_output_size(w, kw, self.stride[1], self.padding[1]))

    def forward(self, x, train=False):
        out, self._cache = F.tconv2d_forward(
            x, self._params["weight"].data, self._bias(), self.stride, self.padding)
        return out

    def backward(self, gout):
        gx, gw, gb = F.tconv2d_backward(gout, self._cache)
        self._params["weight"].accumulate(gw)
        if "bias" in self._params:
            self._params["bias"].accumulate(gb)
        return gx


class MaxPool2d(Module):
    kind = "maxpool2d"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = F._pair(kernel)
        self.stride = F._pair(stride if stride is not None else kernel)
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.maxpool2d_forward(x, self.kernel, self.stride)
        return out

    def backward(self, gout):
        return F.maxpool2d_backward(gout, self._cache)


class Dense(Module):
    kind = "dense"

    def __init__(self, fin, fout, *, rng, dtype=np.float32):
        super().__init__()
        self._params["weight"] = Parameter(glorot_uniform(rng, (fin, fout), fin, fout, dtype))
        self._params["bias"] = Parameter(np.zeros(fout, dtype=dtype))
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.dense_forward(x, self._params["weight"].data, self._params["bias"].data)
        return out

    def backward(self, gout):
        gx, gw, gb = F.dense_backward(gout, self._cache)
        self._params["weight"].accumulate(gw)
        self._params["bias"].accumulate(gb)
        return gx


class BatchNorm2d(Module):
    kind = "batchnorm"

    def __init__(self, channels, momentum=0.1, *, dtype=np.float32):
        super().__init__()
        if not 0 < momentum < 1:
            raise ConfigError("batchnorm momentum must lie in (0, 1)")
        self.momentum = momentum
        # running stats are only refreshed while this is true
        self.track = True
        self._params["weight"] = Parameter(np.ones(channels, dtype=dtype))
        self._params["bias"] = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers["running_mean"] = Buffer(np.zeros(channels, dtype=dtype))
        self._buffers["running_var"] = Buffer(np.ones(channels, dtype=dtype))
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.batchnorm_forward(
            x, self._params["weight"].data, self._params["bias"].data,
            self._buffers["running_mean"].data, self._buffers["running_var"].data,
            train, self.momentum, self.track)
        return out

    def backward(self, gout):
        gx, gg, gb = F.batchnorm_backward(gout, self._cache)
        self._params["weight"].accumulate(gg)
        self._params["bias"].accumulate(gb)
        return gx


class ReLU(Module):
    kind = "relu"

    def forward(self, x, train=False):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, gout):
        return F.relu_backward(gout, self._mask)


class Dropout(Module):
    """Inverted dropout.  Setting ``fixed_mask`` reuses one mask for every call."""

    kind = "dropout"

    def __init__(self, rate, *, rng):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.fixed_mask = None
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._mask = None
            return x
        if self.fixed_mask is not None:
            self._mask = self.fixed_mask
        else:
            self._mask = F.dropout_mask(x.shape, self.rate, self.rng, x.dtype)
        return x * self._mask

    def backward(self, gout):
        return gout if self._mask is None else gout * self._mask


class Flatten(Module):
    kind = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        return gout.reshape(self._shape)


class Softmax(Module):
    kind = "softmax"

    def forward(self, x, train=False):
        self._probs = F.softmax(x)
        return self._probs

    def backward(self, gout):
        return F.softmax_backward(gout, self._probs)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, gout):
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)
