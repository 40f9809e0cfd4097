"""Glue between manifests, the spectrogram cache and in-memory training arrays."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio
from .data import GENDERS, UtteranceRecord, resolve_audio

log = logging.getLogger(__name__)

FRONTEND_OPTIONS = {"win": audio.WIN, "hop": audio.HOP, "nfft": audio.NFFT, "rows": audio.N_ROWS,
                    "silence_db": audio.SILENCE_THRESHOLD_DB, "segment": audio.SEGMENT_FRAMES}


@dataclass
class PreprocessResult:
    processed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def cache_paths(cache_dir, utterance_id: str) -> tuple[Path, Path]:
    base = Path(cache_dir) / utterance_id
    return base.with_suffix(".spec"), base.with_suffix(".idx.json")


def preprocess(records: list[UtteranceRecord], manifest_path, cache_dir,
               segment_hop: int = audio.DEFAULT_SEGMENT_HOP,
               silence_db: float = audio.SILENCE_THRESHOLD_DB) -> PreprocessResult:
    """Compute (or reuse) one cached spectrogram plus segment index per utterance.

    An entry is reused when its index records the same content hash of the
    audio and frontend options.  Failures are collected per file.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    options = {**FRONTEND_OPTIONS, "segment_hop": segment_hop, "silence_db": silence_db}
    result = PreprocessResult()
    for rec in records:
        spec_path, idx_path = cache_paths(cache_dir, rec.utterance_id)
        try:
            wav = resolve_audio(rec, manifest_path)
            digest = audio.file_digest(wav, options)
            if spec_path.exists() and idx_path.exists():
                idx = json.loads(idx_path.read_text())
                if idx.get("digest") == digest:
                    result.skipped.append(rec.utterance_id)
                    continue
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                spec = audio.frontend(audio.read_wav(wav), threshold_db=silence_db)
            starts = audio.segment_starts(spec.shape[1], segment_hop)
            audio.write_spec(spec_path, spec)
            idx_path.write_text(json.dumps({
                "utterance_id": rec.utterance_id, "digest": digest, "frames": int(spec.shape[1]),
                "starts": starts, "warnings": [str(w.message) for w in caught]}, sort_keys=True))
            result.processed.append(rec.utterance_id)
        except Exception as exc:  # noqa: BLE001 - one bad file must not stop the batch
            result.errors[rec.utterance_id] = f"{type(exc).__name__}: {exc}"
            log.warning("preprocess failed for %s: %s", rec.utterance_id, exc)
    return result


def load_segments(records: list[UtteranceRecord], cache_dir) -> list[audio.SpectrogramSegment]:
    out = []
    for rec in records:
        spec_path, idx_path = cache_paths(cache_dir, rec.utterance_id)
        if not spec_path.exists():
            raise FileNotFoundError(f"no cached spectrogram for {rec.utterance_id}; run preprocess")
        spec = audio.read_spec(spec_path)
        idx = json.loads(idx_path.read_text())
        segs = []
        for s in idx["starts"]:
            if spec.shape[1] < audio.SEGMENT_FRAMES:
                segs += audio.segment_spectrogram(spec, utterance_id=rec.utterance_id)
            else:
                segs.append(audio.SpectrogramSegment(spec[:, s:s + audio.SEGMENT_FRAMES],
                                                     rec.utterance_id, s))
        out += audio.propagate_labels(segs, rec)
    return out


@dataclass
class Normalizer:
    """Per-frequency-row standardisation with statistics from the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        # values: (N, 128, 256) or (N, 1, 128, 256)
        v = values.reshape(values.shape[0], -1, values.shape[-1]).astype(np.float64)
        mean = v.mean(axis=(0, 2))
        std = v.std(axis=(0, 2))
        return cls(mean, np.maximum(std, 1e-6))

    def apply(self, values: np.ndarray, dtype=np.float32) -> np.ndarray:
        shape = (1,) * (values.ndim - 2) + (-1, 1)
        return ((values - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(dtype)

    def groups(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.mean, "norm.std": self.std}

    @classmethod
    def from_groups(cls, groups) -> "Normalizer":
        return cls(np.asarray(groups["norm.mean"], dtype=np.float64),
                   np.asarray(groups["norm.std"], dtype=np.float64))


@dataclass
class SegmentSet:
    """Stacked segments with integer targets; ``-1`` marks a missing label."""

    x: np.ndarray                 # (N, 1, 128, 256)
    utterance_ids: list[str]
    targets: dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "SegmentSet":
        idx = np.asarray(idx, dtype=np.intp)
        return SegmentSet(self.x[idx], [self.utterance_ids[i] for i in idx],
                          {k: v[idx] for k, v in self.targets.items()})

    @staticmethod
    def concat(a: "SegmentSet", b: "SegmentSet") -> "SegmentSet":
        return SegmentSet(np.concatenate([a.x, b.x]), a.utterance_ids + b.utterance_ids,
                          {k: np.concatenate([a.targets[k], b.targets[k]]) for k in a.targets})


def build_segment_set(segments: list[audio.SpectrogramSegment], emotion_of: dict[str, int | None],
                      speakers: list[str], normalizer: Normalizer | None, dtype=np.float32) -> SegmentSet:
    """Stack labelled segments.

    ``emotion_of`` maps utterance id to its primary-task class (or None);
    speakers outside ``speakers`` get target -1.
    """
    if segments:
        raw = np.stack([s.values for s in segments])[:, None]
    else:
        raw = np.zeros((0, 1, audio.N_ROWS, audio.SEGMENT_FRAMES))
    x = normalizer.apply(raw, dtype) if normalizer is not None else raw.astype(dtype)
    spk_index = {s: i for i, s in enumerate(speakers)}

    def cls(v):
        return -1 if v is None else int(v)

    targets = {
        "emotion": np.array([cls(emotion_of.get(s.utterance_id)) for s in segments], dtype=np.int64),
        "gender": np.array([GENDERS.index(s.labels["gender"]) for s in segments], dtype=np.int64),
        "speaker": np.array([spk_index.get(s.labels["speaker"], -1) for s in segments], dtype=np.int64),
    }
    return SegmentSet(x, [s.utterance_id for s in segments], targets)
