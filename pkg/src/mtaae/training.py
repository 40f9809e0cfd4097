"""Three-phase semi-supervised multi-task training of the adversarial autoencoder.

Every step runs, in order, on the same batch:

1. reconstruction: encoder + decoder minimise ``alpha * ||x - x_hat||^2``;
2. regularisation: the discriminator learns prior samples (real, class 0)
   from encoder codes (fake, class 1), then the encoder alone is updated to
   fool it with the discriminator frozen;
3. classification: encoder + task heads minimise
   ``beta * L_emotion + (1 - beta) * (L_gender + L_speaker)``, where samples
   without an emotion label only feed the gender and speaker terms.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .evaluation import compute_wa_ua, group_posteriors
from .model import TASKS, AAEModel, PriorSampler
from .nn import SGD, ConfigError, NonFiniteError, cross_entropy, squared_error
from .pipeline import SegmentSet

log = logging.getLogger(__name__)

REAL, FAKE = 0, 1


@dataclass
class TrainConfig:
    alpha: float = 0.4
    beta: float = 0.6
    learning_rate: float = 1e-4
    batch_size: int = 32
    patience: int = 5
    lr_floor: float = 1e-5
    seed: int = 0
    task_set: tuple[str, ...] = TASKS
    aux_mix_ratio: float = 0.5
    max_epochs: int = 200
    pretrain_epochs: int = 0
    saturating_generator: bool = False
    recon_reduction: str = "sum"   # "sum": per-sample squared norm; "mean": divided by element count
    precision: str = "f32"

    def validate(self) -> None:
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.learning_rate <= 0 or not self.lr_floor < self.learning_rate:
            raise ConfigError("need 0 < lr_floor < learning_rate")
        if not 0 <= self.aux_mix_ratio < 1:
            raise ConfigError("aux_mix_ratio must lie in [0, 1)")
        if self.patience < 1 or self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("patience must be >= 1 and epoch counts >= 0")
        if self.recon_reduction not in ("sum", "mean"):
            raise ConfigError("recon_reduction must be 'sum' or 'mean'")
        bad = set(self.task_set) - set(TASKS)
        if bad or not self.task_set:
            raise ConfigError(f"task_set must be a non-empty subset of {TASKS}")


@dataclass
class PhaseLosses:
    l_ae: float
    l_e: float
    l_g: float
    l_s: float
    l_disc: float
    l_gen_adv: float
    alpha: float
    beta: float
    l_c: float = field(init=False)
    l_mtae: float = field(init=False)

    def __post_init__(self):
        self.l_c = self.beta * self.l_e + (1 - self.beta) * (self.l_g + self.l_s)
        self.l_mtae = self.alpha * self.l_ae + self.l_c

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("alpha")
        d.pop("beta")
        return d


def _finite(value: float, phase: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"{phase} phase produced a non-finite loss ({value})")
    return value


class Trainer:
    """Owns the model, optimiser and prior sampler for one training run."""

    def __init__(self, model: AAEModel, config: TrainConfig, events: list | None = None):
        config.validate()
        missing = set(config.task_set) - set(model.heads)
        if missing:
            raise ConfigError(f"model lacks heads for {sorted(missing)}")
        self.model = model
        self.config = config
        self.opt = SGD(model.named_parameters(), config.learning_rate)
        self.sampler = PriorSampler(model.arch.latent_shape, seed=config.seed + 1, dtype=model.dtype)
        self.rng = np.random.default_rng(config.seed + 2)
        self.events = events if events is not None else []
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.opt.lr

    # ------------------------------------------------------------ phases
    def reconstruction_phase(self, x: np.ndarray) -> float:
        m = self.model
        self.opt.zero_grad()
        z = m.encoder.forward(x, True)
        xh = m.decoder.forward(z, True)
        loss, g = squared_error(xh, x)
        if self.config.recon_reduction == "mean":
            n = x[0].size
            loss, g = loss / n, g / n
        _finite(loss, "reconstruction")
        m.encoder.backward(m.decoder.backward(self.config.alpha * g))
        self.opt.step(m.group_params("encoder", "decoder"))
        self.events.append("recon")
        return loss

    def regularization_phase(self, x: np.ndarray) -> tuple[float, float]:
        m = self.model
        b = x.shape[0]
        # the shared code is computed once; neither update below touches the other's inputs
        m.set_bn_tracking(m.encoder, False)
        try:
            z = m.encoder.forward(x, True)
        finally:
            m.set_bn_tracking(m.encoder, True)

        self.opt.zero_grad()
        d = self.sampler.sample(b)
        probs = m.discriminator.forward(np.concatenate([d, z]), True)
        labels = np.r_[np.full(b, REAL), np.full(b, FAKE)]
        l_disc, g = cross_entropy(probs, labels)
        _finite(l_disc, "discriminator")
        m.discriminator.backward(g)
        self.opt.step(m.group_params("discriminator"))
        self.events.append("disc")

        self.opt.zero_grad()
        probs = m.discriminator.forward(z, True)
        if self.config.saturating_generator:
            # literal form: minimise mean log(1 - D(z)) = mean log P(fake | z)
            p_fake = np.maximum(probs[:, FAKE], 1e-12)
            l_gen = float(np.log(p_fake).mean())
            g = np.zeros_like(probs)
            g[:, FAKE] = 1.0 / (p_fake * b)
        else:
            l_gen, g = cross_entropy(probs, np.full(b, REAL))
        _finite(l_gen, "generator")
        gz = m.discriminator.backward(g.astype(probs.dtype))
        m.encoder.backward(gz)
        self.opt.step(m.group_params("encoder"))
        self.opt.zero_grad()  # discard the discriminator grads from this pass
        self.events.append("gen")
        return l_disc, l_gen

    def classification_phase(self, x: np.ndarray, targets: dict[str, np.ndarray],
                             beta: float | None = None, task_set: Iterable[str] | None = None
                             ) -> tuple[float, float, float]:
        m = self.model
        beta = self.config.beta if beta is None else beta
        tasks = tuple(self.config.task_set if task_set is None else task_set)
        weights = {"emotion": beta, "gender": 1 - beta, "speaker": 1 - beta}
        self.opt.zero_grad()
        z = m.encoder.forward(x, True)
        gz = np.zeros_like(z)
        losses = {t: 0.0 for t in TASKS}
        for task in tasks:
            y = targets[task]
            probs = m.heads[task].forward(z, True)
            loss, g = cross_entropy(probs, np.maximum(y, 0), y >= 0)
            losses[task] = _finite(loss, f"{task} classification")
            gz += m.heads[task].backward((weights[task] * g).astype(probs.dtype))
        m.encoder.backward(gz)
        self.opt.step(m.group_params("encoder") + m.group_params("heads", tasks=tasks))
        self.events.append("classify")
        return losses["emotion"], losses["gender"], losses["speaker"]

    def train_step(self, x: np.ndarray, targets: dict[str, np.ndarray]) -> PhaseLosses:
        x = np.asarray(x, dtype=self.model.dtype)
        l_ae = self.reconstruction_phase(x)
        l_disc, l_gen = self.regularization_phase(x)
        l_e, l_g, l_s = self.classification_phase(x, targets)
        self.step_count += 1
        return PhaseLosses(l_ae, l_e, l_g, l_s, l_disc, l_gen, self.config.alpha, self.config.beta)

    # ------------------------------------------------------------ batching
    def batches(self, labeled: SegmentSet, aux: SegmentSet | None = None):
        """One epoch over ``labeled``; each batch tops up with auxiliary samples."""
        cfg = self.config
        n_aux = math.ceil(cfg.aux_mix_ratio * cfg.batch_size) if aux is not None and len(aux) else 0
        n_aux = min(n_aux, cfg.batch_size - 1)
        n_lab = cfg.batch_size - n_aux
        order = self.rng.permutation(len(labeled))
        aux_order = self.rng.permutation(len(aux)) if n_aux else None
        aux_pos = 0
        for start in range(0, len(order), n_lab):
            idx = order[start:start + n_lab]
            x = labeled.x[idx]
            targets = {k: v[idx] for k, v in labeled.targets.items()}
            if n_aux:
                take = np.take(aux_order, np.arange(aux_pos, aux_pos + n_aux), mode="wrap")
                aux_pos += n_aux
                x = np.concatenate([x, aux.x[take]])
                targets = {k: np.concatenate([targets[k], aux.targets[k][take]]) for k in targets}
            yield x, targets


# ---------------------------------------------------------------- evaluation helpers

def predict_posteriors(model: AAEModel, data: SegmentSet, head: str = "emotion",
                       chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(data), chunk):
        z = model.encode(data.x[start:start + chunk], train=False)
        out.append(model.classify(head, z, train=False))
    return np.concatenate(out) if out else np.zeros((0, model.class_counts[head]))


def evaluate_utterances(model: AAEModel, data: SegmentSet, head: str = "emotion", classes=None):
    """Utterance-level report for one head via segment posterior averaging."""
    probs = predict_posteriors(model, data, head)
    grouped = group_posteriors(data.utterance_ids, probs)
    truth: dict[str, int] = {}
    for uid, y in zip(data.utterance_ids, data.targets[head]):
        if y >= 0:
            truth[uid] = int(y)
    uids = [u for u in grouped if u in truth]
    if not uids:
        raise ValueError(f"no utterance with a {head} label to evaluate")
    y_true = [truth[u] for u in uids]
    y_pred = [grouped[u][1] for u in uids]
    return compute_wa_ua(y_true, y_pred, model.class_counts[head], classes)


# ---------------------------------------------------------------- schedule

class PlateauSchedule:
    """Halve the learning rate after ``patience`` epochs without improvement.

    ``update`` returns one of ``improved``, ``wait``, ``halve`` or ``stop``;
    ``stop`` is returned when a halving would take the rate below the floor.
    """

    def __init__(self, lr: float, patience: int = 5, floor: float = 1e-5):
        self.lr = lr
        self.patience = patience
        self.floor = floor
        self.best = -math.inf
        self.bad_epochs = 0
        self.halvings = 0

    def update(self, metric: float) -> str:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return "improved"
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return "wait"
        self.bad_epochs = 0
        self.lr /= 2
        self.halvings += 1
        return "stop" if self.lr < self.floor else "halve"


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_ua: float
    best_epoch: int
    epochs_run: int
    history: list[dict]


LogFn = Callable[[dict], None]


def pretrain_auxiliary(trainer: Trainer, aux: SegmentSet, epochs: int, log_fn: LogFn | None = None) -> None:
    """Gender/speaker-only training on emotion-unlabelled data before the main run."""
    if epochs <= 0:
        return
    masked = SegmentSet(aux.x, aux.utterance_ids,
                        {**aux.targets, "emotion": np.full(len(aux), -1, dtype=np.int64)})
    for epoch in range(epochs):
        for x, targets in trainer.batches(masked):
            losses = trainer.train_step(x, targets)
            if log_fn:
                log_fn({"kind": "pretrain_step", "epoch": epoch, "step": trainer.step_count,
                        "lr": trainer.lr, **losses.to_dict()})


def fit(trainer: Trainer, train: SegmentSet, validation: SegmentSet, aux: SegmentSet | None = None,
        log_fn: LogFn | None = None, epoch_end: Callable[[int], None] | None = None) -> FitResult:
    """Train until the halving schedule drops the rate below the floor.

    After each epoch the primary-task UA on ``validation`` drives the
    schedule; a halving restores the best weights first.  Returns the
    best-validation state.
    """
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("fit needs non-empty training and validation splits")
    cfg = trainer.config
    model = trainer.model
    sched = PlateauSchedule(cfg.learning_rate, cfg.patience, cfg.lr_floor)
    best_state = model.state_dict()
    best_epoch = 0
    history = []
    epoch = 0
    while epoch < cfg.max_epochs:
        epoch += 1
        for x, targets in trainer.batches(train, aux):
            losses = trainer.train_step(x, targets)
            if log_fn:
                log_fn({"kind": "step", "epoch": epoch, "step": trainer.step_count,
                        "lr": trainer.lr, **losses.to_dict()})
        report = evaluate_utterances(model, validation)
        action = sched.update(report.ua)
        if action == "improved":
            best_state = model.state_dict()
            best_epoch = epoch
        record = {"kind": "epoch", "epoch": epoch, "val_wa": report.wa, "val_ua": report.ua,
                  "lr": trainer.lr, "halved": action in ("halve", "stop")}
        history.append(record)
        if log_fn:
            log_fn(record)
        if epoch_end:
            epoch_end(epoch)
        if action in ("halve", "stop"):
            model.load_state_dict(best_state)
            trainer.opt.lr = sched.lr
            if action == "stop":
                break
    model.load_state_dict(best_state)
    return FitResult(best_state, sched.best, best_epoch, epoch, history)


class JsonlLog:
    """Append-only JSON-lines writer; floats are written at full precision."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
