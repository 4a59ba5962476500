"""PU label curation, classification metrics and threshold calibration."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .chemcore import Composition, parse_formula, reduce

HULL_THRESHOLD_EV = 0.050
HULL_NOISE_EV = 1e-6


@dataclass(frozen=True)
class LabeledEntry:
    composition: Composition
    polymorph_id: str
    theoretical: bool
    e_above_hull: Optional[float] = None

    def __post_init__(self):
        e = self.e_above_hull
        if e is not None:
            if e < -HULL_NOISE_EV:
                raise ValueError(f"energy above hull {e} eV/atom is negative beyond DFT noise")
            if e < 0:
                object.__setattr__(self, "e_above_hull", 0.0)


def label_compositions(entries: Iterable[LabeledEntry]) -> dict[Composition, int]:
    """Composition-level labels from polymorph flags.

    A reduced composition gets ``y = 0`` only when every one of its
    polymorphs is flagged theoretical; one non-theoretical polymorph makes
    it ``y = 1``.
    """
    labels: dict[Composition, int] = {}
    for e in entries:
        key = reduce(e.composition)[0]
        y = 0 if e.theoretical else 1
        labels[key] = max(labels.get(key, 0), y)
    if not labels:
        raise ValueError("no entries to label")
    return labels


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> ConfusionCounts:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    return ConfusionCounts(
        tp=int(np.sum(y & p)), fp=int(np.sum(~y & p)), tn=int(np.sum(~y & ~p)), fn=int(np.sum(y & ~p))
    )


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()


def precision_recall_f1(c: ConfusionCounts) -> PRF:
    """Precision, recall and F1; a zero denominator yields 0 and is named in ``undefined``."""
    undefined = []
    if c.tp + c.fp:
        p = c.tp / (c.tp + c.fp)
    else:
        p = 0.0
        undefined.append("precision")
    if c.tp + c.fn:
        r = c.tp / (c.tp + c.fn)
    else:
        r = 0.0
        undefined.append("recall")
    if p + r > 0:
        f1 = 2 * p * r / (p + r)
    else:
        f1 = 0.0
        undefined.append("f1")
    return PRF(p, r, f1, tuple(undefined))


def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=float)
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based positions start+1..end
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = _average_ranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at each distinct threshold, descending."""
    order = np.argsort(-s, kind="mergesort")
    ss = s[order]
    yy = y[order]
    last = np.r_[ss[1:] != ss[:-1], True]
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(~yy)[last]
    return ss[last], tp, fp


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-interpolated area under the precision-recall curve (average precision)."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    _, tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    # weight by new positives, divide once: a perfect ranking gives exactly 1.0
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp * precision) / n_pos)


class Threshold(NamedTuple):
    tau: float
    f1: float


def candidate_thresholds(scores: Sequence[float]) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus one sentinel on each side."""
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.r_[u[0] - 0.5, mids, u[-1] + 0.5]


def calibrate_threshold(scores: Sequence[float], labels: Sequence[int]) -> Threshold:
    """Threshold maximizing F1 for the rule ``score >= tau``; ties go to the higher tau."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("calibrate_threshold needs both classes")
    u, tp, fp = _sweep(s, y)  # u descending
    # predicting positive for score >= u[k] gives (tp[k], fp[k])
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    f1 = np.r_[0.0, f1]  # tau above every score: nothing predicted positive
    # tau for each option: above max, then midpoint below u[k], last one the low sentinel
    mid = (u[:-1] + u[1:]) / 2.0
    # adjacent floats: the midpoint can round onto the lower score; the upper one separates identically
    mid = np.where(mid > u[1:], mid, u[:-1])
    hi = u[0] + 0.5 if u[0] + 0.5 > u[0] else np.nextafter(u[0], np.inf)
    lo = u[-1] - 0.5 if u[-1] - 0.5 < u[-1] else np.nextafter(u[-1], -np.inf)
    taus = np.r_[hi, mid, lo]
    best = f1.max()
    k = int(np.flatnonzero(f1 == best)[0])  # first hit = highest tau
    return Threshold(float(taus[k]), float(best))


def hull_baseline(e_hull: Optional[float], threshold: float = HULL_THRESHOLD_EV) -> int:
    """1 when the energy above hull is at most ``threshold`` eV/atom (inclusive)."""
    if e_hull is None or (isinstance(e_hull, float) and math.isnan(e_hull)):
        raise ValueError("missing energy above hull")
    if e_hull < -HULL_NOISE_EV:
        raise ValueError(f"energy above hull {e_hull} eV/atom is negative beyond DFT noise")
    return int(max(e_hull, 0.0) <= threshold)


@dataclass
class MetricReport:
    name: str
    precision: float
    recall: float
    f1: float
    roc_auc: Optional[float]
    auprc: Optional[float]
    threshold: float
    n: int = 0
    undefined: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def evaluate_scores(name: str, scores: Sequence[float], labels: Sequence[int],
                    threshold: Optional[float] = None) -> MetricReport:
    """Metrics at an F1-calibrated threshold (or the given one)."""
    s, y = _scores_labels(scores, labels)
    if threshold is None:
        threshold = calibrate_threshold(s, y).tau
    prf = precision_recall_f1(confusion(y, (s >= threshold).astype(int)))
    both = 0 < y.sum() < len(y)
    return MetricReport(
        name=name, precision=prf.precision, recall=prf.recall, f1=prf.f1,
        roc_auc=roc_auc(s, y) if both else None,
        auprc=auprc(s, y) if y.any() else None,
        threshold=float(threshold), n=len(y), undefined=prf.undefined,
    )


def hull_report(e_hulls: Sequence[float], labels: Sequence[int],
                threshold: float = HULL_THRESHOLD_EV) -> MetricReport:
    y = _binary(labels, "labels")
    preds = np.array([hull_baseline(e, threshold) for e in e_hulls], dtype=int)
    prf = precision_recall_f1(confusion(y, preds))
    # lower hull energy = more synthesizable
    s = -np.maximum(np.asarray(e_hulls, dtype=float), 0.0)
    both = 0 < y.sum() < len(y)
    return MetricReport(
        name="hull_baseline", precision=prf.precision, recall=prf.recall, f1=prf.f1,
        roc_auc=roc_auc(s, y) if both else None, auprc=auprc(s, y) if y.any() else None,
        threshold=threshold, n=len(y), undefined=prf.undefined,
    )


def format_reports(reports: Sequence[MetricReport]) -> str:
    """Aligned text table, one row per report."""
    cols = ["model", "n", "tau", "precision", "recall", "f1", "roc_auc", "auprc"]

    def f(x):
        return "-" if x is None else f"{x:.4f}"

    rows = [[r.name, str(r.n), f(r.threshold), f(r.precision), f(r.recall), f(r.f1), f(r.roc_auc), f(r.auprc)]
            for r in reports]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def stratified_split(labels: Sequence[int], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Index arrays (train, val, test) preserving the label ratio in each split."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    y = _binary(labels, "labels")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for cls in (False, True):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_val = min(n_val, n - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


@dataclass(frozen=True)
class LabeledRecord:
    id: str
    entry: LabeledEntry
    source: Optional[str] = None


def read_labeled_jsonl(path: str | Path) -> list[LabeledRecord]:
    """Records ``{id, formula, theoretical, e_above_hull?, source?}``, one per line."""
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid = str(rec["id"])
                entry = LabeledEntry(
                    composition=parse_formula(rec["formula"]),
                    polymorph_id=rid,
                    theoretical=bool(rec["theoretical"]),
                    e_above_hull=None if rec.get("e_above_hull") is None else float(rec["e_above_hull"]),
                )
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad labeled record ({e})") from None
            if rid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            out.append(LabeledRecord(rid, entry, rec.get("source")))
    if not out:
        raise ValueError(f"{path}: no records")
    return out


@dataclass(frozen=True)
class EvalConfig:
    hull_threshold: float = HULL_THRESHOLD_EV
    threshold: Optional[float] = None  # None = F1-calibrated
