"""Utterance-level scoring (WA/UA) and d-vector speaker verification (EER)."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    confusion: np.ndarray
    wa: float
    ua: float
    per_class_recall: list[float | None]
    n_utterances: int
    classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"wa": self.wa, "ua": self.ua, "n_utterances": self.n_utterances,
                "per_class_recall": self.per_class_recall, "classes": self.classes,
                "confusion": self.confusion.tolist()}

    def format(self) -> str:
        names = self.classes or [str(i) for i in range(len(self.confusion))]
        width = max(8, *(len(n) for n in names))
        lines = [f"WA {self.wa:6.2f}%   UA {self.ua:6.2f}%   n={self.n_utterances}", ""]
        lines.append(" " * width + "".join(f"{n:>{width}}" for n in names) + f"{'recall':>{width}}")
        for name, row, rec in zip(names, self.confusion, self.per_class_recall):
            r = "-" if rec is None else f"{100 * rec:.1f}%"
            lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}d}" for v in row) + f"{r:>{width}}")
        return "\n".join(lines)


def utterance_posteriors(segment_posteriors) -> tuple[np.ndarray, int]:
    """Average the segment posteriors of one utterance; ties go to the lowest class."""
    p = np.asarray(segment_posteriors, dtype=float)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("an utterance needs at least one segment posterior")
    mean = p.mean(axis=0)
    # rounding in the mean must not break exact ties
    tied = np.flatnonzero(mean >= mean.max() - 1e-12)
    return mean, int(tied[0])


def group_posteriors(utterance_ids, posteriors) -> dict[str, tuple[np.ndarray, int]]:
    groups: dict[str, list] = {}
    for uid, row in zip(utterance_ids, posteriors):
        groups.setdefault(uid, []).append(row)
    return {uid: utterance_posteriors(rows) for uid, rows in groups.items()}


def compute_wa_ua(y_true, y_pred, k: int, classes=None) -> EvalReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError("label vectors differ in length")
    if y_true.size and (y_true.min() < 0 or y_true.max() >= k or y_pred.min() < 0 or y_pred.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (y_true, y_pred), 1)
    support = confusion.sum(axis=1)
    recalls: list[float | None] = [None if s == 0 else confusion[i, i] / s for i, s in enumerate(support)]
    present = [r for r in recalls if r is not None]
    if len(present) < k:
        warnings.warn("classes without test samples are left out of UA", stacklevel=2)
    n = int(confusion.sum())
    wa = 100.0 * np.trace(confusion) / n if n else 0.0
    ua = 100.0 * float(np.mean(present)) if present else 0.0
    return EvalReport(confusion, float(wa), ua, recalls, n, list(classes or []))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def error_rates(genuine, impostor, thresholds):
    """FAR(t) = P(impostor >= t), FRR(t) = P(genuine < t) at each threshold."""
    g = np.sort(np.asarray(genuine, dtype=float))
    i = np.sort(np.asarray(impostor, dtype=float))
    t = np.asarray(thresholds, dtype=float)
    far = 1.0 - np.searchsorted(i, t, side="left") / i.size
    frr = np.searchsorted(g, t, side="left") / g.size
    return far, frr


def compute_eer(genuine, impostor) -> tuple[float, float]:
    """Equal error rate (percent) and the threshold where FAR meets FRR.

    Thresholds sweep the sorted union of scores, closed by one point above the
    top score; where FAR - FRR changes sign between neighbours the crossing is
    interpolated linearly.
    """
    genuine = np.asarray(genuine, dtype=float)
    impostor = np.asarray(impostor, dtype=float)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("EER needs genuine and impostor scores")
    scores = np.unique(np.concatenate([genuine, impostor]))
    thresholds = np.append(scores, np.nextafter(scores[-1], np.inf))
    far, frr = error_rates(genuine, impostor, thresholds)
    return _crossing(thresholds, far, frr)


def _crossing(thresholds, far, frr) -> tuple[float, float]:
    d = far - frr
    for k in range(len(d)):
        if d[k] == 0:
            return 100.0 * float(far[k]), float(thresholds[k])
        if k + 1 < len(d) and d[k] > 0 > d[k + 1]:
            lam = d[k] / (d[k] - d[k + 1])
            eer = far[k] + lam * (far[k + 1] - far[k])
            return 100.0 * float(eer), float(thresholds[k] + lam * (thresholds[k + 1] - thresholds[k]))
    raise AssertionError("FAR and FRR curves never cross")  # unreachable: d starts >= 0, ends < 0


@dataclass
class VerificationReport:
    eer: float
    threshold: float
    n_genuine: int
    n_impostor: int
    speakers: list[str]
    excluded: list[str]

    def to_dict(self) -> dict:
        return {"eer": self.eer, "threshold": self.threshold, "n_genuine": self.n_genuine,
                "n_impostor": self.n_impostor, "speakers": self.speakers, "excluded": self.excluded}


def verification_protocol(enrolment: dict[str, list[np.ndarray]], trials: list[tuple[str, np.ndarray]],
                          enrol_count: int = 20, return_scores: bool = False):
    """Score every trial d-vector against every enrolled speaker.

    A speaker's enrolment vector is the mean of its first ``enrol_count``
    enrolment d-vectors; speakers with fewer are excluded (with a warning).
    Same-speaker pairs are genuine trials, all other pairs impostor trials.
    """
    models, excluded = {}, []
    for spk in sorted(enrolment):
        vecs = enrolment[spk]
        if len(vecs) < enrol_count:
            excluded.append(spk)
            continue
        models[spk] = np.mean(np.asarray(vecs[:enrol_count], dtype=float), axis=0)
    if excluded:
        warnings.warn(f"speakers below {enrol_count} enrolment utterances excluded: {excluded}",
                      stacklevel=2)
    if not models:
        raise ValueError("no speaker could be enrolled")
    genuine, impostor = [], []
    for spk, vec in trials:
        for claimed, model in models.items():
            score = cosine_similarity(vec, model)
            (genuine if claimed == spk else impostor).append(score)
    eer, thr = compute_eer(genuine, impostor)
    report = VerificationReport(eer, thr, len(genuine), len(impostor), list(models), excluded)
    if return_scores:
        return report, np.asarray(genuine), np.asarray(impostor)
    return report


def split_enrolment(per_speaker: dict[str, list[np.ndarray]], enrol_count: int = 20):
    """First ``enrol_count`` utterances enrol a speaker; the rest become trials.

    Speakers without at least ``enrol_count + 1`` utterances are dropped.
    """
    enrol, trials, dropped = {}, [], []
    for spk in sorted(per_speaker):
        vecs = per_speaker[spk]
        if len(vecs) < enrol_count + 1:
            dropped.append(spk)
            continue
        enrol[spk] = list(vecs[:enrol_count])
        trials += [(spk, v) for v in vecs[enrol_count:]]
    if dropped:
        warnings.warn(f"speakers with fewer than {enrol_count + 1} utterances dropped: {dropped}",
                      stacklevel=2)
    return enrol, trials


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
