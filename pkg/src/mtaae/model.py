"""The adversarial autoencoder: encoder, decoder, latent discriminator and
per-task classifier heads, all operating on 1x128x256 spectrogram segments."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    BatchNorm2d,
    ConfigError,
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
    check_finite,
    resolve_dtype,
)
from .nn import checkpoint

TASKS = ("emotion", "gender", "speaker")
GROUPS = ("encoder", "decoder", "discriminator", "heads")


@dataclass
class ArchConfig:
    input_shape: tuple[int, int] = (128, 256)
    enc_channels: tuple[int, int, int] = (16, 32, 32)
    enc_kernel: int = 5
    pools: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 4))
    head_channels: int = 16
    head_kernel: int = 3
    head_pool: tuple[int, int] = (2, 2)
    head_hidden: int = 256
    dropout: float = 0.3
    bn_momentum: float = 0.1

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        h, w = self.input_shape
        for ph, pw in self.pools:
            h, w = h // ph, w // pw
        return (self.enc_channels[-1], h, w)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["enc_channels"] = tuple(d["enc_channels"])
        d["pools"] = tuple(tuple(p) for p in d["pools"])
        d["head_pool"] = tuple(d["head_pool"])
        return cls(**d)

    def validate(self) -> None:
        if len(self.enc_channels) != len(self.pools):
            raise ConfigError("one pooling stage per encoder block is required")
        h, w = self.input_shape
        for ph, pw in self.pools:
            if h % ph or w % pw:
                raise ConfigError(f"pooling {ph}x{pw} does not divide {h}x{w}")
            h, w = h // ph, w // pw
        if self.enc_kernel % 2 == 0:
            raise ConfigError("encoder kernel must be odd for same-padding")
        _, lh, lw = self.latent_shape
        if lh % self.head_pool[0] or lw % self.head_pool[1]:
            raise ConfigError("head pooling must divide the latent grid")


# Lighter widths with the same latent geometry, used where wall-clock matters.
DESK_ARCH = ArchConfig(enc_channels=(8, 16, 32), enc_kernel=3)


def _block_encoder(arch: ArchConfig, rng, dtype) -> Sequential:
    layers: list[Module] = []
    cin = 1
    pad = arch.enc_kernel // 2
    last = len(arch.enc_channels) - 1
    for i, (cout, pool) in enumerate(zip(arch.enc_channels, arch.pools)):
        conv = Conv2d(cin, cout, arch.enc_kernel, 1, pad, rng=rng, dtype=dtype, bias=False)
        bn = BatchNorm2d(cout, arch.bn_momentum, dtype=dtype)
        if i != last:
            layers += [conv, bn, ReLU(), MaxPool2d(pool)]
        else:
            # the code itself is standardised: no ReLU and no pooling after the
            # normalisation, so it can sit at zero mean and unit variance like the prior
            layers += [conv, MaxPool2d(pool), bn]
        cin = cout
    return Sequential(*layers)


def _block_decoder(arch: ArchConfig, rng, dtype) -> Sequential:
    chans = list(arch.enc_channels)
    # upsampling path mirrors the encoder: C3 -> C2 -> C1 -> C1, then a linear output layer
    targets = chans[-2::-1] + [chans[0]]
    layers: list[Module] = []
    cin = chans[-1]
    for cout, pool in zip(targets, reversed(arch.pools)):
        layers += [ConvTranspose2d(cin, cout, pool, pool, 0, rng=rng, dtype=dtype, bias=False),
                   BatchNorm2d(cout, arch.bn_momentum, dtype=dtype),
                   ReLU()]
        cin = cout
    pad = arch.enc_kernel // 2
    layers.append(ConvTranspose2d(cin, 1, arch.enc_kernel, 1, pad, rng=rng, dtype=dtype))
    return Sequential(*layers)


def _head(arch: ArchConfig, n_classes: int, rng, dtype, dropout: bool) -> Sequential:
    c, h, w = arch.latent_shape
    flat = arch.head_channels * (h // arch.head_pool[0]) * (w // arch.head_pool[1])
    layers: list[Module] = [
        Conv2d(c, arch.head_channels, arch.head_kernel, 1, arch.head_kernel // 2, rng=rng, dtype=dtype),
        ReLU(),
        MaxPool2d(arch.head_pool),
        Flatten(),
        Dense(flat, arch.head_hidden, rng=rng, dtype=dtype),
        ReLU(),
    ]
    if dropout:
        layers.append(Dropout(arch.dropout, rng=rng))
    layers += [Dense(arch.head_hidden, n_classes, rng=rng, dtype=dtype), Softmax()]
    return Sequential(*layers)


# index of the post-activation hidden layer inside a head (the d-vector tap)
DVECTOR_LAYER = 5


class PriorSampler:
    """i.i.d. standard-normal latent batches from a seeded generator."""

    def __init__(self, latent_shape, seed: int = 0, dtype=np.float32):
        self.latent_shape = tuple(latent_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)

    def sample(self, batch: int) -> np.ndarray:
        if batch < 1:
            raise ValueError("batch must be at least 1")
        return self.rng.standard_normal((batch, *self.latent_shape)).astype(self.dtype)


class AAEModel:
    def __init__(self, class_counts: dict[str, int], arch: ArchConfig | None = None, *,
                 seed: int = 0, precision="f32", meta: dict | None = None):
        self.arch = arch or ArchConfig()
        self.arch.validate()
        unknown = set(class_counts) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown task heads: {sorted(unknown)}")
        if "gender" in class_counts and class_counts["gender"] != 2:
            raise ConfigError("the gender head has exactly 2 classes")
        self.class_counts = dict(class_counts)
        self.dtype = resolve_dtype(precision)
        self.seed = seed
        self.meta = dict(meta or {})
        rng = np.random.default_rng(seed)
        self.encoder = _block_encoder(self.arch, rng, self.dtype)
        self.decoder = _block_decoder(self.arch, rng, self.dtype)
        self.discriminator = _head(self.arch, 2, rng, self.dtype, dropout=False)
        # zero output weights: the untrained critic says 50/50 for every input
        self.discriminator.layers[-2].weight.data[...] = 0
        self.heads: dict[str, Sequential] = {}
        for task in TASKS:
            if task in self.class_counts:
                self.heads[task] = _head(self.arch, self.class_counts[task], rng, self.dtype, dropout=True)

    # ------------------------------------------------------------ registry
    def _modules(self):
        yield "encoder", self.encoder
        yield "decoder", self.decoder
        yield "discriminator", self.discriminator
        for task, head in self.heads.items():
            yield f"heads.{task}", head

    def named_parameters(self) -> dict:
        return {f"{prefix}.{name}": p
                for prefix, mod in self._modules() for name, p in mod.named_parameters()}

    def named_buffers(self) -> dict:
        return {f"{prefix}.{name}": b
                for prefix, mod in self._modules() for name, b in mod.named_buffers()}

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def group_params(self, *groups: str, tasks=None) -> list[str]:
        """Parameter names in the given groups; ``tasks`` narrows the heads group."""
        names = []
        for name in self.named_parameters():
            group = self.group_of(name)
            if group not in groups:
                continue
            if group == "heads" and tasks is not None and name.split(".")[1] not in tasks:
                continue
            names.append(name)
        return names

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters().items()}
        state.update({n: b.data.copy() for n, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        targets = {**self.named_parameters(), **self.named_buffers()}
        missing = set(targets) - set(state)
        if strict and missing:
            raise ConfigError(f"state is missing {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name not in targets:
                if strict:
                    raise ConfigError(f"unexpected state entry {name!r}")
                continue
            t = targets[name]
            if t.data.shape != arr.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data[...] = arr

    def set_bn_tracking(self, module: Module, track: bool) -> None:
        for layer in getattr(module, "layers", []):
            if isinstance(layer, BatchNorm2d):
                layer.track = track

    # ------------------------------------------------------------ forward passes
    def _check_input(self, x):
        want = (1, *self.arch.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ConfigError(f"expected a batch shaped (B, {want}), got {x.shape}")

    def _check_latent(self, z):
        if z.ndim != 4 or tuple(z.shape[1:]) != self.arch.latent_shape:
            raise ConfigError(f"expected latent batch (B, {self.arch.latent_shape}), got {z.shape}")

    def encode(self, x, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        z = self.encoder.forward(x, train)
        check_finite(z, "encoder output")
        return z

    def decode(self, z, train: bool = False) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        self._check_latent(z)
        xh = self.decoder.forward(z, train)
        check_finite(xh, "decoder output")
        return xh

    def discriminate(self, v, train: bool = False) -> np.ndarray:
        v = np.asarray(v, dtype=self.dtype)
        self._check_latent(v)
        return self.discriminator.forward(v, train)

    def classify(self, head: str, z, train: bool = False) -> np.ndarray:
        if head not in self.heads:
            raise ConfigError(f"no {head!r} head in this model (heads: {sorted(self.heads)})")
        z = np.asarray(z, dtype=self.dtype)
        self._check_latent(z)
        return self.heads[head].forward(z, train)

    def dvector(self, z, head: str = "speaker") -> np.ndarray:
        """Last-hidden-layer activations of a head, eval mode (no dropout)."""
        if head not in self.heads:
            raise ConfigError(f"no {head!r} head in this model")
        z = np.asarray(z, dtype=self.dtype)
        self._check_latent(z)
        h = z
        for layer in self.heads[head].layers[:DVECTOR_LAYER + 1]:
            h = layer.forward(h, False)
        return h

    # ------------------------------------------------------------ persistence
    def header(self) -> dict:
        return {"arch": self.arch.to_dict(), "class_counts": self.class_counts,
                "seed": self.seed, "precision": self.dtype.name, **self.meta}

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        groups = self.state_dict()
        groups.update(extra or {})
        checkpoint.save(path, groups, self.header())

    @classmethod
    def load(cls, path, precision=None) -> tuple["AAEModel", dict[str, np.ndarray]]:
        """Rebuild a model from a checkpoint; returns it with any non-model groups."""
        groups, header = checkpoint.load(path)
        meta = {k: v for k, v in header.items()
                if k not in ("arch", "class_counts", "seed", "precision")}
        model = cls(header["class_counts"], ArchConfig.from_dict(header["arch"]),
                    seed=header.get("seed", 0),
                    precision=precision or header.get("precision", "float32"), meta=meta)
        own = set(model.named_parameters()) | set(model.named_buffers())
        model.load_state_dict({k: v for k, v in groups.items() if k in own})
        return model, {k: v for k, v in groups.items() if k not in own}
