from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np

from fixthresh.errors import ContractError, MetricDomainError

DEFAULT_TARGET_FPR = 0.01


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """
    Detector scores paired with ground-truth labels.

    Higher scores mean "more likely AI-generated"; labels are 1 = AI, 0 = real.
    """
    scores: np.ndarray
    labels: np.ndarray
    ids: Optional[Tuple[str, ...]] = None

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim != 1 or labels.ndim != 1 or len(scores) != len(labels):
            raise ContractError("scores and labels must be 1-D sequences of equal length")
        if len(scores) == 0:
            raise ContractError("a ScoreSet needs at least one item")
        if not np.all(np.isfinite(scores)):
            raise ContractError("scores must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise ContractError("labels must be 0 or 1")
        if self.ids is not None and len(self.ids) != len(scores):
            raise ContractError("ids must have one entry per score")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @classmethod
    def from_lists(
        cls,
        scores: Sequence[float],
        labels: Sequence[int],
        ids: Optional[Sequence[str]] = None,
    ) -> "ScoreSet":
        return cls(np.asarray(scores, dtype=np.float64), np.asarray(labels), None if ids is None else tuple(ids))

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self.labels) - self.n_pos

    @property
    def has_both_classes(self) -> bool:
        return self.n_pos > 0 and self.n_neg > 0

    def require_both_classes(self, what: str) -> None:
        if not self.has_both_classes:
            raise MetricDomainError(
                f"{what} needs both classes, got {self.n_pos} positives and {self.n_neg} negatives"
            )


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricBundle:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tnr: float


@dataclass(frozen=True)
class RocPoint:
    """ROC vertex; tp and fp are exact counts at "predict AI iff score >= threshold"."""
    threshold: float
    tp: int
    fp: int
    tpr: float
    fpr: float


@dataclass(frozen=True)
class RocCurve:
    points: Tuple[RocPoint, ...]
    n_pos: int
    n_neg: int


def confusion_at(s: ScoreSet, tau: float) -> ConfusionCounts:
    """Tally predictions (AI iff score >= tau) against labels."""
    predicted = s.scores >= tau
    positive = s.labels == 1
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    tn = int(np.sum(~predicted & ~positive))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def metric_bundle(c: ConfusionCounts) -> MetricBundle:
    """
    Standard classification metrics from confusion counts.

    Degenerate denominators:
      - precision with no predicted positives is 1.0 if nothing was missed (fn = 0), else 0.0
      - recall with no actual positives is 1.0
      - tnr with no actual negatives is 1.0
      - f1 is 0.0 when precision + recall = 0
    """
    if c.n < 1:
        raise ContractError("metric_bundle needs at least one counted item")

    accuracy = (c.tp + c.tn) / c.n
    if c.tp + c.fp == 0:
        precision = 1.0 if c.fn == 0 else 0.0
    else:
        precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    tnr = c.tn / (c.tn + c.fp) if c.tn + c.fp > 0 else 1.0
    return MetricBundle(accuracy=accuracy, precision=precision, recall=recall, f1=f1, tnr=tnr)


def sentinel_threshold(s: ScoreSet) -> float:
    """Smallest float strictly above the max score: predicts every item real."""
    return float(np.nextafter(s.scores.max(), np.inf))


def _sweep(s: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Candidate thresholds in descending order (sentinel first, then each
    distinct score) with the exact tp and fp counts at each.
    """
    order = np.argsort(-s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]

    cum_tp = np.cumsum(sorted_labels)
    cum_fp = np.cumsum(1 - sorted_labels)
    # last index of each run of equal scores
    last = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))

    thresholds = np.concatenate(([sentinel_threshold(s)], sorted_scores[last]))
    tps = np.concatenate(([0], cum_tp[last])).astype(np.int64)
    fps = np.concatenate(([0], cum_fp[last])).astype(np.int64)
    return thresholds, tps, fps


def roc_curve(s: ScoreSet) -> RocCurve:
    """
    ROC vertices for the sentinel and every distinct score, from (0, 0) to (1, 1).

    The sentinel is reported with threshold +inf.

    Raises:
        MetricDomainError: if only one class is present.
    """
    s.require_both_classes("roc_curve")
    thresholds, tps, fps = _sweep(s)
    p, n = s.n_pos, s.n_neg
    points = [
        RocPoint(threshold=float(t), tp=int(tp), fp=int(fp), tpr=tp / p, fpr=fp / n)
        for t, tp, fp in zip(thresholds, tps, fps)
    ]
    points[0] = RocPoint(threshold=math.inf, tp=0, fp=0, tpr=0.0, fpr=0.0)
    return RocCurve(points=tuple(points), n_pos=p, n_neg=n)


def auroc(s: ScoreSet) -> float:
    """
    Area under the ROC curve by trapezoids over exact counts.

    Equals P(score_pos > score_neg) + 0.5 * P(score_pos = score_neg).

    Raises:
        MetricDomainError: if only one class is present.
    """
    curve = roc_curve(s)
    twice_area = 0
    for prev, cur in zip(curve.points, curve.points[1:]):
        twice_area += (cur.fp - prev.fp) * (cur.tp + prev.tp)
    return twice_area / (2 * curve.n_pos * curve.n_neg)


def threshold_low_fpr(s: ScoreSet, target_fpr: float = DEFAULT_TARGET_FPR) -> float:
    """
    Among thresholds with FPR <= target_fpr, the one with the highest TPR.

    Ties on TPR go to the lowest FPR, then to the smallest threshold, so a
    perfectly separated set yields the smallest positive score.
    """
    s.require_both_classes("threshold_low_fpr")
    if not 0 <= target_fpr < 1:
        raise ContractError(f"target_fpr must be in [0, 1), got {target_fpr}")

    thresholds, tps, fps = _sweep(s)
    max_fp = math.floor(target_fpr * s.n_neg + 1e-9)
    allowed = np.flatnonzero(fps <= max_fp)
    best_tp = tps[allowed].max()
    # tp and fp are nondecreasing along the descending sweep: the first
    # candidate reaching best_tp has the fewest false positives
    first = allowed[tps[allowed] == best_tp][0]
    return float(thresholds[first])


def threshold_youden(s: ScoreSet) -> float:
    """
    Threshold maximizing J = TPR - FPR; ties by higher TPR, then smaller threshold.

    When every score is equal, J is 0 at both the sentinel and the common
    score, and the higher-TPR rule picks the common score (everything called AI).
    """
    s.require_both_classes("threshold_youden")
    thresholds, tps, fps = _sweep(s)
    # J * P * N as an exact integer
    j_scaled = tps * s.n_neg - fps * s.n_pos
    best = max(range(len(thresholds)), key=lambda i: (int(j_scaled[i]), int(tps[i]), -thresholds[i]))
    return float(thresholds[best])


def threshold_best_f1(s: ScoreSet) -> float:
    """Threshold maximizing F1; ties by higher recall, then smaller threshold."""
    if s.n_pos == 0:
        raise MetricDomainError("threshold_best_f1 needs at least one positive")
    thresholds, tps, fps = _sweep(s)
    p = s.n_pos

    def key(i: int) -> Tuple[Fraction, int, float]:
        tp, fp = int(tps[i]), int(fps[i])
        f1 = Fraction(2 * tp, 2 * tp + fp + (p - tp)) if tp > 0 else Fraction(0)
        return f1, tp, -thresholds[i]

    best = max(range(len(thresholds)), key=key)
    return float(thresholds[best])


def max_accuracy(s: ScoreSet) -> Tuple[float, float]:
    """
    Best accuracy reachable by any threshold on s and the smallest threshold reaching it.

    This is the accuracy a per-condition retuning oracle would report.
    """
    thresholds, tps, fps = _sweep(s)
    correct = tps + (s.n_neg - fps)
    best = max(range(len(thresholds)), key=lambda i: (int(correct[i]), -thresholds[i]))
    return int(correct[best]) / len(s), float(thresholds[best])
