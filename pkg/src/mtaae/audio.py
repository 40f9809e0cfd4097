"""Audio to fixed-size log-magnitude spectrogram segments.

25 ms Hamming frames with a 10 ms hop at 16 kHz, a 512-point DFT of the
zero-padded frame, bins 0..255 averaged in pairs to 128 rows covering 0-8 kHz,
then ``log(1 + |X|)``.  Spectrograms are cut into 256-frame segments.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
WIN = 400
HOP = 160
NFFT = 512
N_ROWS = 128
SEGMENT_FRAMES = 256
DEFAULT_SEGMENT_HOP = 128
SILENCE_FRAME_MS = 25.0
SILENCE_THRESHOLD_DB = -40.0

SPEC_MAGIC = b"SPEC"
SPEC_VERSION = 1


class AudioError(ValueError):
    pass


class SilenceWarning(UserWarning):
    """Silence removal found nothing above threshold and kept the clip as is."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioError("audio clip must be a non-empty mono signal")
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")
        if not np.isfinite(self.samples).all():
            raise AudioError("audio clip contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpectrogramSegment:
    values: np.ndarray
    utterance_id: str = ""
    start: int = 0
    labels: dict = field(default_factory=dict)


# ---------------------------------------------------------------- WAV I/O

def read_wav(path) -> AudioClip:
    """Read PCM WAV (8/16/32-bit); stereo is averaged, other rates resampled to 16 kHz."""
    with wave.open(str(path), "rb") as wf:
        nch, width, rate, nframes = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
        raw = wf.readframes(nframes)
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    elif width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    else:
        raise AudioError(f"{path}: unsupported sample width {width}")
    if data.size == 0:
        raise AudioError(f"{path}: no audio frames")
    if nch > 1:
        data = data[: data.size - data.size % nch].reshape(-1, nch).mean(axis=1)
    clip = AudioClip(data, rate)
    return resample(clip, SAMPLE_RATE) if rate != SAMPLE_RATE else clip


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def resample(clip: AudioClip, rate: int) -> AudioClip:
    """Polyphase resampling with scipy's anti-aliasing filter."""
    if clip.sample_rate == rate:
        return clip
    g = math.gcd(rate, clip.sample_rate)
    out = signal.resample_poly(clip.samples, rate // g, clip.sample_rate // g)
    return AudioClip(np.asarray(out, dtype=np.float64), rate)


# ---------------------------------------------------------------- frontend ops

def frame_rms(samples: np.ndarray, frame_len: int) -> np.ndarray:
    n = int(np.ceil(samples.size / frame_len))
    padded = np.zeros(n * frame_len)
    padded[: samples.size] = samples
    frames = padded.reshape(n, frame_len)
    # the trailing partial frame is measured over its real samples only
    counts = np.full(n, frame_len)
    counts[-1] = samples.size - (n - 1) * frame_len
    return np.sqrt((frames ** 2).sum(axis=1) / counts)


def remove_silence(clip: AudioClip, frame_ms: float = SILENCE_FRAME_MS,
                   threshold_db: float = SILENCE_THRESHOLD_DB) -> AudioClip:
    """Drop frames whose RMS is more than ``-threshold_db`` dB below the loudest frame.

    A clip with no energy at all is returned unchanged with a SilenceWarning.
    """
    frame_len = max(1, int(round(frame_ms * clip.sample_rate / 1000.0)))
    rms = frame_rms(clip.samples, frame_len)
    peak = rms.max()
    if peak <= 0:
        warnings.warn("clip is digital silence; silence removal skipped", SilenceWarning, stacklevel=2)
        return clip
    with np.errstate(divide="ignore"):
        level_db = 20.0 * np.log10(rms / peak)
    keep = level_db > threshold_db
    if not keep.any():
        warnings.warn("no frame above the silence threshold; clip kept", SilenceWarning, stacklevel=2)
        return clip
    if keep.all():
        return clip
    idx = np.flatnonzero(keep)
    pieces = [clip.samples[i * frame_len:(i + 1) * frame_len] for i in idx]
    return AudioClip(np.concatenate(pieces), clip.sample_rate)


def n_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN) // HOP


def stft_spectrogram(clip: AudioClip) -> np.ndarray:
    """128 x T log-magnitude spectrogram with T = 1 + (len - 400) // 160."""
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    x = clip.samples
    if x.size < WIN:
        raise AudioError(f"clip too short: {x.size} samples < one {WIN}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN)[::HOP]
    mag = np.abs(np.fft.rfft(frames * np.hamming(WIN), n=NFFT, axis=1))[:, : 2 * N_ROWS]
    mag = mag.reshape(mag.shape[0], N_ROWS, 2).mean(axis=2)
    return np.log1p(mag).T


def segment_starts(t: int, hop: int = DEFAULT_SEGMENT_HOP, width: int = SEGMENT_FRAMES) -> list[int]:
    if not 1 <= hop <= width:
        raise ValueError(f"segment hop must lie in [1, {width}], got {hop}")
    if t <= width:
        return [0]
    starts = list(range(0, t - width + 1, hop))
    if starts[-1] + width < t:
        starts.append(t - width)
    return starts


def segment_spectrogram(spec: np.ndarray, hop: int = DEFAULT_SEGMENT_HOP,
                        utterance_id: str = "") -> list[SpectrogramSegment]:
    """Cut a 128 x T spectrogram into 256-frame windows.

    Windows start every ``hop`` frames plus one right-aligned at ``T - 256``;
    a spectrogram shorter than 256 frames yields one reflection-padded segment.
    """
    if hop < 1:
        raise ValueError("segment hop must be at least 1")
    t = spec.shape[1]
    if t < 1:
        return []
    if t < SEGMENT_FRAMES:
        if t == 1:
            values = np.repeat(spec, SEGMENT_FRAMES, axis=1)
        else:
            values = np.pad(spec, ((0, 0), (0, SEGMENT_FRAMES - t)), mode="reflect")
        return [SpectrogramSegment(values, utterance_id, 0)]
    return [SpectrogramSegment(spec[:, s:s + SEGMENT_FRAMES].copy(), utterance_id, s)
            for s in segment_starts(t, hop)]


def propagate_labels(segments: list[SpectrogramSegment], utterance) -> list[SpectrogramSegment]:
    """Stamp every segment with its utterance's id and full label set."""
    labels = utterance.labels()
    return [SpectrogramSegment(s.values, utterance.utterance_id, s.start, dict(labels))
            for s in segments]


def frontend(clip: AudioClip, *, remove_silences: bool = True,
             threshold_db: float = SILENCE_THRESHOLD_DB) -> np.ndarray:
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    if remove_silences:
        clip = remove_silence(clip, SILENCE_FRAME_MS, threshold_db)
    return stft_spectrogram(clip)


# ---------------------------------------------------------------- cache files

def write_spec(path, spec: np.ndarray) -> None:
    rows, cols = spec.shape
    header = SPEC_MAGIC + struct.pack("<III", SPEC_VERSION, rows, cols)
    Path(path).write_bytes(header + np.ascontiguousarray(spec, dtype="<f4").tobytes())


def read_spec(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != SPEC_MAGIC:
        raise AudioError(f"{path}: not a spectrogram cache file")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != SPEC_VERSION:
        raise AudioError(f"{path}: unsupported cache version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != rows * cols:
        raise AudioError(f"{path}: payload size mismatch")
    return data.reshape(rows, cols).copy()


def file_digest(path, options: dict) -> str:
    h = hashlib.sha256(Path(path).read_bytes())
    h.update(json.dumps(options, sort_keys=True).encode())
    return h.hexdigest()
