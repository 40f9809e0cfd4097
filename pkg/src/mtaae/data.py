"""Utterance manifests, label mappings and speaker-aware evaluation splits."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CATEGORICAL = ("angry", "happy", "sad", "neutral")
GENDERS = ("female", "male")
LEVELS = ("low", "medium", "high")


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid manifest:\n  " + "\n  ".join(problems))


@dataclass
class UtteranceRecord:
    utterance_id: str
    audio_path: str
    corpus: str
    speaker_id: str
    gender: str
    emotion: str | None = None
    activation: float | None = None
    valence: float | None = None

    def labels(self) -> dict:
        return {"speaker": self.speaker_id, "gender": self.gender, "emotion": self.emotion,
                "activation": self.activation, "valence": self.valence}

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


_REQUIRED = ("utterance_id", "audio_path", "corpus", "speaker_id", "gender")
_FIELDS = set(_REQUIRED) | {"emotion", "activation", "valence"}


def _parse_record(obj, where: str, problems: list[str]) -> UtteranceRecord | None:
    if not isinstance(obj, dict):
        problems.append(f"{where}: record is not a JSON object")
        return None
    bad = len(problems)
    for key in _REQUIRED:
        if obj.get(key) in (None, ""):
            problems.append(f"{where}: missing mandatory field {key!r}")
    extra = set(obj) - _FIELDS
    if extra:
        problems.append(f"{where}: unknown fields {sorted(extra)}")
    if obj.get("gender") not in (None, "") and obj["gender"] not in GENDERS:
        problems.append(f"{where}: gender must be one of {GENDERS}, got {obj['gender']!r}")
    for dim in ("activation", "valence"):
        v = obj.get(dim)
        if v is None:
            continue
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not 1.0 <= v <= 5.0:
            problems.append(f"{where}: {dim} {v!r} outside [1, 5]")
    if len(problems) > bad:
        return None
    return UtteranceRecord(
        utterance_id=str(obj["utterance_id"]), audio_path=str(obj["audio_path"]),
        corpus=str(obj["corpus"]), speaker_id=str(obj["speaker_id"]), gender=obj["gender"],
        emotion=obj.get("emotion"),
        activation=None if obj.get("activation") is None else float(obj["activation"]),
        valence=None if obj.get("valence") is None else float(obj["valence"]))


def parse_manifest(lines, source: str = "<manifest>") -> list[UtteranceRecord]:
    records, problems, seen = [], [], set()
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{where}: not valid JSON ({exc.msg})")
            continue
        rec = _parse_record(obj, where, problems)
        if rec is None:
            continue
        if rec.utterance_id in seen:
            problems.append(f"{where}: duplicate utterance_id {rec.utterance_id!r}")
            continue
        seen.add(rec.utterance_id)
        records.append(rec)
    if problems:
        raise ManifestError(problems)
    return records


def load_manifest(path) -> list[UtteranceRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_manifest(fh, str(path))


def write_manifest(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def resolve_audio(record: UtteranceRecord, manifest_path) -> Path:
    p = Path(record.audio_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------- label maps

def merge_happy_excited(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    out = []
    for r in records:
        if r.emotion == "excited":
            r = UtteranceRecord(**{**asdict(r), "emotion": "happy"})
        out.append(r)
    return out


@dataclass(frozen=True)
class LevelMappingRule:
    corpus: str
    cut1: float
    cut2: float

    def __post_init__(self):
        if not 1.0 <= self.cut1 < self.cut2 <= 5.0:
            raise ValueError(f"cut points must satisfy 1 <= cut1 < cut2 <= 5, got {self.cut1}, {self.cut2}")


LEVEL_RULES = {
    "iemocap": LevelMappingRule("iemocap", 2.0, 3.5),
    "msp-improv": LevelMappingRule("msp-improv", 2.5, 3.5),
}


def rule_for(corpus: str) -> LevelMappingRule:
    key = corpus.lower().replace("_", "-")
    if key not in LEVEL_RULES:
        # corpora without a published rule (e.g. synthetic) use the IEMOCAP cut points
        return LevelMappingRule(corpus, 2.0, 3.5)
    return LEVEL_RULES[key]


def map_levels(value: float, rule: LevelMappingRule) -> str:
    """[1, cut1] -> low, (cut1, cut2] -> medium, (cut2, 5] -> high."""
    if not 1.0 <= value <= 5.0:
        raise ValueError(f"dimensional value {value} outside [1, 5]")
    if value <= rule.cut1:
        return "low"
    if value <= rule.cut2:
        return "medium"
    return "high"


# ---------------------------------------------------------------- k-means

@dataclass
class VAClusterModel:
    k: int
    centroids: np.ndarray  # (k, 2): valence, activation
    inertia: float = 0.0

    def to_dict(self) -> dict:
        return {"k": self.k, "centroids": self.centroids.tolist(), "inertia": self.inertia}

    @classmethod
    def from_dict(cls, d) -> "VAClusterModel":
        return cls(int(d["k"]), np.asarray(d["centroids"], dtype=float), float(d.get("inertia", 0.0)))


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)  # argmin keeps the lowest index on ties


def _kmeanspp(points, k, rng):
    centroids = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = ((points[:, None, :] - np.asarray(centroids)[None]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(points[rng.integers(len(points))])
        else:
            centroids.append(points[rng.choice(len(points), p=d2 / total)])
    return np.asarray(centroids, dtype=float)


def lloyd(points: np.ndarray, init: np.ndarray, max_iter: int = 300):
    """Lloyd iterations from ``init``; returns centroids, labels, inertia trace."""
    centroids = init.copy()
    labels = _nearest(points, centroids)
    trace = []
    for _ in range(max_iter):
        for j in range(len(centroids)):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        trace.append(float(((points - centroids[labels]) ** 2).sum()))
        new = _nearest(points, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
    return centroids, labels, trace


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> VAClusterModel:
    points = np.asarray(points, dtype=float)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(np.unique(points, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct points for k={k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids, _, trace = lloyd(points, _kmeanspp(points, k, rng), max_iter)
        if best is None or trace[-1] < best.inertia:
            best = VAClusterModel(k, centroids, trace[-1])
    return best


def fit_va_clusters(records: list[UtteranceRecord], k: int, seed: int = 0) -> VAClusterModel:
    pts = [(r.valence, r.activation) for r in records
           if r.valence is not None and r.activation is not None]
    if len(pts) < k:
        raise ValueError(f"need at least {k} records with valence and activation")
    return kmeans(np.asarray(pts), k, seed)


def assign_cluster(record_or_point, model: VAClusterModel) -> int:
    if isinstance(record_or_point, UtteranceRecord):
        if record_or_point.valence is None or record_or_point.activation is None:
            raise ValueError(f"{record_or_point.utterance_id}: no valence/activation annotation")
        point = (record_or_point.valence, record_or_point.activation)
    else:
        point = record_or_point
    return int(_nearest(np.asarray([point], dtype=float), model.centroids)[0])


# ---------------------------------------------------------------- target labels

def emotion_targets(records, label_mode: str = "categorical", clusters: VAClusterModel | None = None
                    ) -> tuple[list[str], list[int | None]]:
    """Class names and per-record class index (``None`` when unlabeled) for the primary task."""
    if label_mode == "categorical":
        classes = list(CATEGORICAL)
        return classes, [classes.index(r.emotion) if r.emotion in classes else None for r in records]
    if label_mode in ("activation", "valence"):
        out = []
        for r in records:
            v = getattr(r, label_mode)
            out.append(None if v is None else LEVELS.index(map_levels(v, rule_for(r.corpus))))
        return list(LEVELS), out
    if label_mode == "va-cluster":
        if clusters is None:
            raise ValueError("va-cluster labels need a fitted cluster model")
        out = [None if (r.valence is None or r.activation is None) else assign_cluster(r, clusters)
               for r in records]
        return [f"cluster{i}" for i in range(clusters.k)], out
    raise ValueError(f"unknown label mode {label_mode!r}")


# ---------------------------------------------------------------- splits

@dataclass
class Fold:
    train: list[str]
    validation: list[str]
    test: list[str]


@dataclass
class FoldSplit:
    scheme: str
    seed: int
    folds: list[Fold]

    def to_json(self) -> str:
        return json.dumps({"scheme": self.scheme, "seed": self.seed,
                           "folds": [asdict(f) for f in self.folds]}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldSplit":
        d = json.loads(text)
        return cls(d["scheme"], d["seed"], [Fold(**f) for f in d["folds"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FoldSplit":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


SCHEMES = ("tenfold", "loso")


def _by_speaker(records) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for r in records:
        groups.setdefault(r.speaker_id, []).append(r.utterance_id)
    return {s: groups[s] for s in sorted(groups)}


def make_splits(records: list[UtteranceRecord], scheme: str = "tenfold", seed: int = 0,
                n_folds: int = 10) -> FoldSplit:
    """Speaker-aware folds.

    ``tenfold``: each speaker's utterances are shuffled and dealt round-robin
    over the folds, so every fold holds every speaker that has enough data;
    fold i tests on fold i, validates on fold i+1 and trains on the rest.
    ``loso``: one fold per speaker as test set, the next speaker (cyclically)
    as validation, the remaining speakers for training.
    """
    scheme = {"tenfold_by_speaker": "tenfold", "leave_one_speaker_out": "loso"}.get(scheme, scheme)
    groups = _by_speaker(records)
    if len(groups) < 2:
        raise ValueError("splits need at least 2 speakers")
    rng = np.random.default_rng(seed)
    if scheme == "tenfold":
        buckets: list[list[str]] = [[] for _ in range(n_folds)]
        short = [s for s, u in groups.items() if len(u) < n_folds]
        if short:
            warnings.warn(f"speakers with fewer than {n_folds} utterances miss some folds: {short}",
                          stacklevel=2)
        pos = 0
        for utts in groups.values():
            order = [utts[i] for i in rng.permutation(len(utts))]
            for u in order:
                buckets[pos % n_folds].append(u)
                pos += 1
        folds = []
        for i in range(n_folds):
            v = (i + 1) % n_folds
            train = [u for j, b in enumerate(buckets) if j not in (i, v) for u in b]
            folds.append(Fold(train, list(buckets[v]), list(buckets[i])))
        return FoldSplit("tenfold", seed, folds)
    if scheme == "loso":
        speakers = list(groups)
        folds = []
        for i, spk in enumerate(speakers):
            val_spk = speakers[(i + 1) % len(speakers)] if len(speakers) >= 3 else None
            train = [u for s in speakers if s not in (spk, val_spk) for u in groups[s]]
            val = list(groups[val_spk]) if val_spk else []
            folds.append(Fold(train, val, list(groups[spk])))
        return FoldSplit("loso", seed, folds)
    raise ValueError(f"unknown split scheme {scheme!r}; use one of {SCHEMES}")
