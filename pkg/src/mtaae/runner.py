"""Fold-level training and evaluation on manifest-described corpora.

This is the layer the command line drives: it turns manifests plus a fold
into normalised segment sets, builds a model for the requested task set,
runs training, and scores held-out utterances.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio
from .data import (
    Fold,
    UtteranceRecord,
    VAClusterModel,
    emotion_targets,
    fit_va_clusters,
    load_manifest,
)
from .evaluation import EvalReport, compute_wa_ua, group_posteriors
from .model import AAEModel, ArchConfig
from .nn import ConfigError
from .pipeline import Normalizer, SegmentSet, build_segment_set, load_segments, preprocess
from .training import FitResult, Trainer, TrainConfig, fit, predict_posteriors, pretrain_auxiliary

log = logging.getLogger(__name__)

MODES = {"stl": ("emotion",), "mtl": ("emotion", "gender", "speaker"),
         "mtl-aux": ("emotion", "gender", "speaker")}


class Corpus:
    """A manifest plus its spectrogram cache; segments are loaded on demand."""

    def __init__(self, manifest, cache_dir=None, records: list[UtteranceRecord] | None = None,
                 run_preprocess: bool = True, segment_hop: int = audio.DEFAULT_SEGMENT_HOP):
        self.manifest = Path(manifest)
        self.records = records if records is not None else load_manifest(self.manifest)
        self.cache_dir = Path(cache_dir) if cache_dir else self.manifest.parent / "cache"
        self.by_id = {r.utterance_id: r for r in self.records}
        self.failed: dict[str, str] = {}
        if run_preprocess:
            res = preprocess(self.records, self.manifest, self.cache_dir, segment_hop)
            self.failed = res.errors
        self._segments: dict[str, list[audio.SpectrogramSegment]] = {}

    def select(self, ids) -> list[UtteranceRecord]:
        return [self.by_id[u] for u in ids if u not in self.failed]

    def segments(self, records: list[UtteranceRecord]) -> list[audio.SpectrogramSegment]:
        todo = [r for r in records if r.utterance_id not in self._segments]
        for seg in load_segments(todo, self.cache_dir):
            self._segments.setdefault(seg.utterance_id, []).append(seg)
        return [s for r in records for s in self._segments.get(r.utterance_id, [])]

    @property
    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})


@dataclass
class LabelSpace:
    label_mode: str
    classes: list[str]
    clusters: VAClusterModel | None = None

    def targets(self, records) -> dict[str, int | None]:
        _, idx = emotion_targets(records, self.label_mode, self.clusters)
        return {r.utterance_id: i for r, i in zip(records, idx)}

    def to_meta(self) -> dict:
        return {"label_mode": self.label_mode, "classes": self.classes,
                "clusters": self.clusters.to_dict() if self.clusters else None}

    @classmethod
    def from_meta(cls, meta: dict) -> "LabelSpace":
        clusters = VAClusterModel.from_dict(meta["clusters"]) if meta.get("clusters") else None
        return cls(meta["label_mode"], list(meta["classes"]), clusters)


def make_label_space(train_records, label_mode: str = "categorical", k: int = 3, seed: int = 0) -> LabelSpace:
    clusters = None
    if label_mode == "va-cluster":
        clusters = fit_va_clusters([r for r in train_records if r.valence is not None
                                    and r.activation is not None], k, seed)
    classes, _ = emotion_targets([], label_mode, clusters)
    return LabelSpace(label_mode, classes, clusters)


@dataclass
class TrainedFold:
    model: AAEModel
    normalizer: Normalizer
    labels: LabelSpace
    result: FitResult
    speakers: list[str]
    history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        self.model.save(path, extra=self.normalizer.groups())


def train_fold(corpus: Corpus, fold: Fold, config: TrainConfig, *, arch: ArchConfig | None = None,
               label_mode: str = "categorical", n_clusters: int = 3,
               aux: Corpus | None = None, aux_ids=None, log_fn=None,
               meta: dict | None = None, epoch_end=None) -> TrainedFold:
    """Train one fold: fit normalisation on the training split, optionally
    pretrain on auxiliary data, then run the plateau-scheduled fit.  ``epoch_end(model, epoch)``
    sees the weights as they stand after each epoch, before any best-state restore."""
    train_recs = corpus.select(fold.train)
    val_recs = corpus.select(fold.validation)
    if not train_recs or not val_recs:
        raise ValueError("fold has an empty training or validation split")
    labels = make_label_space(train_recs, label_mode, n_clusters, config.seed)
    aux_recs = []
    if aux is not None:
        aux_recs = aux.select(aux_ids) if aux_ids is not None else list(aux.records)
    speakers = sorted({r.speaker_id for r in train_recs} | {r.speaker_id for r in aux_recs})

    train_segs = corpus.segments(train_recs)
    normalizer = Normalizer.fit(np.stack([s.values for s in train_segs]))
    dtype = np.dtype("float64" if config.precision in ("f64", "float64") else "float32")
    train_set = build_segment_set(train_segs, labels.targets(train_recs), speakers, normalizer, dtype)
    val_set = build_segment_set(corpus.segments(val_recs), labels.targets(val_recs), speakers, normalizer, dtype)
    aux_set = None
    if aux_recs:
        aux_set = build_segment_set(aux.segments(aux_recs), {}, speakers, normalizer, dtype)

    counts = {"emotion": len(labels.classes), "gender": 2, "speaker": len(speakers)}
    counts = {t: counts[t] for t in config.task_set}
    model = AAEModel(counts, arch, seed=config.seed, precision=config.precision,
                     meta={**(meta or {}), **labels.to_meta(), "speakers": speakers,
                           "task_set": list(config.task_set)})
    trainer = Trainer(model, config)
    if aux_set is not None and config.pretrain_epochs:
        pretrain_auxiliary(trainer, aux_set, config.pretrain_epochs, log_fn)
    hook = (lambda epoch: epoch_end(model, epoch)) if epoch_end else None
    result = fit(trainer, train_set, val_set, aux_set, log_fn, hook)
    return TrainedFold(model, normalizer, labels, result, speakers, result.history)


def segment_set_for(corpus: Corpus, records, model: AAEModel, normalizer: Normalizer,
                    labels: LabelSpace) -> SegmentSet:
    speakers = list(model.meta.get("speakers", []))
    return build_segment_set(corpus.segments(records), labels.targets(records), speakers,
                             normalizer, model.dtype)


def evaluate_records(model: AAEModel, normalizer: Normalizer, corpus: Corpus, ids,
                     labels: LabelSpace | None = None) -> EvalReport:
    """Utterance-level WA/UA of the emotion head on the given utterances."""
    labels = labels or LabelSpace.from_meta(model.meta)
    records = [r for r in corpus.select(ids)]
    data = segment_set_for(corpus, records, model, normalizer, labels)
    probs = predict_posteriors(model, data, "emotion")
    grouped = group_posteriors(data.utterance_ids, probs)
    truth = labels.targets(records)
    uids = [u for u in grouped if truth.get(u) is not None]
    if not uids:
        raise ValueError("no labelled utterance to evaluate")
    return compute_wa_ua([truth[u] for u in uids], [grouped[u][1] for u in uids],
                         len(labels.classes), labels.classes)


def check_loso_leakage(model: AAEModel, test_records) -> None:
    """Refuse to score speakers the speaker head was trained on."""
    covered = set(model.meta.get("speakers", [])) if "speaker" in model.heads else set()
    leaked = sorted(covered & {r.speaker_id for r in test_records})
    if leaked:
        raise ConfigError(f"checkpoint speaker head covers test speakers {leaked}; "
                          "leave-one-speaker-out scoring would leak")


def utterance_dvectors(model: AAEModel, normalizer: Normalizer, corpus: Corpus,
                       records, chunk: int = 64) -> dict[str, list[np.ndarray]]:
    """Per speaker, the utterance d-vectors (mean of segment embeddings) in manifest order."""
    segs = corpus.segments(records)
    x = normalizer.apply(np.stack([s.values for s in segs])[:, None], model.dtype)
    emb = np.concatenate([model.dvector(model.encode(x[i:i + chunk])) for i in range(0, len(x), chunk)])
    by_utt: dict[str, list[np.ndarray]] = {}
    for s, e in zip(segs, emb):
        by_utt.setdefault(s.utterance_id, []).append(e)
    out: dict[str, list[np.ndarray]] = {}
    for r in records:
        if r.utterance_id in by_utt:
            out.setdefault(r.speaker_id, []).append(np.mean(by_utt[r.utterance_id], axis=0))
    return out


def load_trained(path) -> tuple[AAEModel, Normalizer]:
    model, extra = AAEModel.load(path)
    try:
        normalizer = Normalizer.from_groups(extra)
    except KeyError:
        raise ConfigError(f"{path}: checkpoint carries no normalisation statistics") from None
    return model, normalizer
