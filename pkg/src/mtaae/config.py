"""Flat ``key = value`` run configuration with file and command-line layering."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .nn import ConfigError
from .runner import MODES
from .training import TrainConfig


@dataclass
class RunConfig:
    # data
    manifest: str = ""
    cache_dir: str = ""
    aux_manifest: str = ""
    label_mode: str = "categorical"
    n_clusters: int = 3
    merge_excited: bool = True
    segment_hop: int = 128
    # run layout
    out: str = "runs/default"
    seed: int = 0
    mode: str = "mtl"
    scheme: str = "tenfold"
    folds: str = "0"
    arch: str = "desk"
    # training; the step size suits the mean-reduced reconstruction loss
    alpha: float = 0.4
    beta: float = 0.6
    learning_rate: float = 0.01
    lr_floor: float = 0.001
    batch_size: int = 8
    patience: int = 5
    aux_mix_ratio: float = 0.25
    max_epochs: int = 200
    pretrain_epochs: int = 0
    saturating_generator: bool = False
    recon_reduction: str = "mean"
    precision: str = "f32"
    # eval / verify
    checkpoint: str = ""
    enrol_manifest: str = ""
    trial_manifest: str = ""
    enrol_count: int = 20
    # sweep
    sweep_param: str = "beta"
    sweep_values: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    # synthetic corpus
    n_speakers: int = 10
    utterances_per_speaker: int = 20
    snr_db: float = 20.0
    aux_speakers: int = 0
    aux_utterances: int = 4

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.scheme not in ("tenfold", "loso"):
            raise ConfigError(f"scheme must be tenfold or loso, got {self.scheme!r}")
        if self.arch not in ("desk", "full"):
            raise ConfigError(f"arch must be desk or full, got {self.arch!r}")
        if self.sweep_param not in ("alpha", "beta", "aux_speakers"):
            raise ConfigError("sweep_param must be alpha, beta or aux_speakers")
        if not 1 <= self.segment_hop <= 256:
            raise ConfigError(f"segment_hop must lie in [1, 256], got {self.segment_hop}")
        self.train_config().validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, beta=self.beta, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, patience=self.patience, lr_floor=self.lr_floor,
                           seed=self.seed, task_set=MODES[self.mode],
                           aux_mix_ratio=self.aux_mix_ratio if self.mode == "mtl-aux" else 0.0,
                           max_epochs=self.max_epochs, pretrain_epochs=self.pretrain_epochs,
                           saturating_generator=self.saturating_generator,
                           recon_reduction=self.recon_reduction, precision=self.precision)

    def fold_indices(self, n_folds: int) -> list[int]:
        if self.folds.strip() == "all":
            return list(range(n_folds))
        try:
            idx = [int(v) for v in self.folds.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"folds must be 'all' or a comma list of integers, got {self.folds!r}") from None
        bad = [i for i in idx if not 0 <= i < n_folds]
        if bad or not idx:
            raise ConfigError(f"fold indices {bad or idx} outside 0..{n_folds - 1}")
        return idx

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def resolve(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then command-line overrides."""
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = raw if not isinstance(raw, str) else _convert(key, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
