from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from fixthresh.errors import MetricDomainError, ProtocolError
from fixthresh.metrics import (
    ConfusionCounts,
    MetricBundle,
    ScoreSet,
    auroc,
    confusion_at,
    max_accuracy,
    metric_bundle,
    threshold_best_f1,
    threshold_low_fpr,
    threshold_youden,
)
from fixthresh.transforms import CLEAN, Condition

logger = logging.getLogger(__name__)


class OperatingPointName(str, Enum):
    LOW_FPR = "low_fpr"
    ROC_OPTIMAL = "roc_optimal"
    BEST_F1 = "best_f1"

    @property
    def display_name(self) -> str:
        return {
            OperatingPointName.LOW_FPR: "Low-FPR (~1%)",
            OperatingPointName.ROC_OPTIMAL: "ROC-optimal",
            OperatingPointName.BEST_F1: "Best-F1",
        }[self]


OPERATING_POINT_ORDER = (
    OperatingPointName.LOW_FPR,
    OperatingPointName.ROC_OPTIMAL,
    OperatingPointName.BEST_F1,
)


class EvaluationMode(str, Enum):
    FIXED = "fixed"
    RETUNED = "retuned"


@dataclass(frozen=True)
class OperatingPoint:
    """A named decision threshold and the run it was selected on."""
    name: OperatingPointName
    threshold: float
    source: str


@dataclass(frozen=True)
class TableRow:
    model: str
    condition: Condition
    operating_point: OperatingPointName
    threshold: float
    counts: ConfusionCounts
    metrics: MetricBundle


@dataclass(frozen=True)
class ConditionSummary:
    """Threshold-free context for one (model, condition): AUROC and the sweep-best accuracy."""
    model: str
    condition: Condition
    auroc: float
    max_accuracy: float


@dataclass(frozen=True)
class RobustnessTable:
    """Metrics per (model, condition, operating point) plus per-condition AUROC."""
    mode: EvaluationMode
    rows: Tuple[TableRow, ...]
    conditions: Tuple[ConditionSummary, ...]
    seed: Optional[int] = None

    @property
    def models(self) -> List[str]:
        return list(dict.fromkeys(row.model for row in self.rows))

    @property
    def grid(self) -> List[Condition]:
        return list(dict.fromkeys(row.condition for row in self.rows))

    def row(self, model: str, condition: Condition, op: OperatingPointName) -> TableRow:
        for row in self.rows:
            if (row.model, row.condition, row.operating_point) == (model, condition, op):
                return row
        raise ProtocolError(f"No row for ({model}, {condition.token}, {op.value})")

    def summary(self, model: str, condition: Condition) -> ConditionSummary:
        for summary in self.conditions:
            if (summary.model, summary.condition) == (model, condition):
                return summary
        raise ProtocolError(f"No AUROC for ({model}, {condition.token})")


@dataclass(frozen=True)
class InflationRow:
    model: str
    condition: Condition
    operating_point: OperatingPointName
    fixed_accuracy: float
    retuned_accuracy: float
    retuned_best_accuracy: float

    @property
    def delta(self) -> float:
        """Accuracy a per-condition retuning oracle adds on top of the fixed threshold."""
        return self.retuned_best_accuracy - self.fixed_accuracy


@dataclass(frozen=True)
class InflationReport:
    rows: Tuple[InflationRow, ...]


# -------------------- Threshold selection --------------------


def select_operating_points(clean_val: ScoreSet, source: str = "clean-val") -> Tuple[OperatingPoint, ...]:
    """
    Select the three operating points on clean validation scores.

    These thresholds are the only ones the fixed-threshold protocol ever uses.

    Raises:
        ProtocolError: if the validation scores contain a single class.
    """
    try:
        thresholds = {
            OperatingPointName.LOW_FPR: threshold_low_fpr(clean_val, 0.01),
            OperatingPointName.ROC_OPTIMAL: threshold_youden(clean_val),
            OperatingPointName.BEST_F1: threshold_best_f1(clean_val),
        }
    except MetricDomainError as exc:
        raise ProtocolError(f"Cannot select operating points on {source}: {exc}") from exc

    return tuple(OperatingPoint(name, thresholds[name], source) for name in OPERATING_POINT_ORDER)


# -------------------- Table construction --------------------


def _check_conditions(scores_by_condition: Mapping[Condition, ScoreSet]) -> None:
    if CLEAN not in scores_by_condition:
        raise ProtocolError("scores_by_condition has no clean condition")

    reference = scores_by_condition[CLEAN]
    for condition, scores in scores_by_condition.items():
        if len(scores) != len(reference):
            raise ProtocolError(
                f"{condition.token} has {len(scores)} items, clean has {len(reference)}"
            )
        if reference.ids is not None or scores.ids is not None:
            if scores.ids is None or reference.ids is None or sorted(scores.ids) != sorted(reference.ids):
                raise ProtocolError(f"{condition.token} does not cover the same item ids as clean")


def _ordered(scores_by_condition: Mapping[Condition, ScoreSet]) -> List[Condition]:
    # clean first, then insertion (grid) order
    rest = [c for c in scores_by_condition if c != CLEAN]
    return [CLEAN, *rest]


def _condition_summary(model: str, condition: Condition, scores: ScoreSet) -> ConditionSummary:
    try:
        area = auroc(scores)
    except MetricDomainError as exc:
        raise ProtocolError(f"{model}/{condition.token}: {exc}") from exc
    best, _ = max_accuracy(scores)
    return ConditionSummary(model=model, condition=condition, auroc=area, max_accuracy=best)


def _rows_at(
    model: str,
    condition: Condition,
    scores: ScoreSet,
    ops: Sequence[OperatingPoint],
) -> List[TableRow]:
    rows: List[TableRow] = []
    for op in ops:
        counts = confusion_at(scores, op.threshold)
        rows.append(
            TableRow(
                model=model,
                condition=condition,
                operating_point=op.name,
                threshold=op.threshold,
                counts=counts,
                metrics=metric_bundle(counts),
            )
        )
    return rows


def evaluate_fixed(
    scores_by_condition: Mapping[Condition, ScoreSet],
    ops: Sequence[OperatingPoint],
    model: str = "model",
    seed: Optional[int] = None,
) -> RobustnessTable:
    """
    Evaluate every condition at the unchanged clean-validation thresholds.

    Raises:
        ProtocolError: if clean is missing or conditions do not cover the same items.
    """
    _check_conditions(scores_by_condition)
    rows: List[TableRow] = []
    summaries: List[ConditionSummary] = []
    for condition in _ordered(scores_by_condition):
        scores = scores_by_condition[condition]
        rows.extend(_rows_at(model, condition, scores, ops))
        summaries.append(_condition_summary(model, condition, scores))
    return RobustnessTable(EvaluationMode.FIXED, tuple(rows), tuple(summaries), seed)


def evaluate_retuned(
    scores_by_condition: Mapping[Condition, ScoreSet],
    model: str = "model",
    seed: Optional[int] = None,
) -> RobustnessTable:
    """
    The criticized baseline: re-select all three operating points on each
    condition's own scores before computing its metrics.
    """
    _check_conditions(scores_by_condition)
    rows: List[TableRow] = []
    summaries: List[ConditionSummary] = []
    for condition in _ordered(scores_by_condition):
        scores = scores_by_condition[condition]
        ops = select_operating_points(scores, source=f"retuned:{condition.token}")
        rows.extend(_rows_at(model, condition, scores, ops))
        summaries.append(_condition_summary(model, condition, scores))
    return RobustnessTable(EvaluationMode.RETUNED, tuple(rows), tuple(summaries), seed)


def merge_tables(tables: Iterable[RobustnessTable]) -> RobustnessTable:
    """
    Combine single-model tables of one mode and seed into one table.

    Raises:
        ProtocolError: if modes or seeds differ, or the models' grids are not identical.
    """
    tables = list(tables)
    if not tables:
        raise ProtocolError("merge_tables needs at least one table")

    first = tables[0]
    for table in tables[1:]:
        if table.mode is not first.mode or table.seed != first.seed:
            raise ProtocolError("cannot merge tables of different modes or seeds")
        if table.grid != first.grid:
            raise ProtocolError("all models must share an identical condition grid")
        if set(table.models) & set(first.models):
            raise ProtocolError(f"duplicate models in merge: {sorted(set(table.models) & set(first.models))}")

    return RobustnessTable(
        mode=first.mode,
        rows=tuple(row for t in tables for row in t.rows),
        conditions=tuple(s for t in tables for s in t.conditions),
        seed=first.seed,
    )


# -------------------- Inflation and summaries --------------------


def inflation_report(fixed: RobustnessTable, retuned: RobustnessTable) -> InflationReport:
    """
    Per (model, condition, operating point): the fixed-threshold accuracy, the
    retuned accuracy at the same operating point and the best accuracy a
    per-condition retuning can reach on the same scores (delta >= 0).

    Raises:
        ProtocolError: if the tables do not cover the same models and conditions.
    """
    if fixed.mode is not EvaluationMode.FIXED or retuned.mode is not EvaluationMode.RETUNED:
        raise ProtocolError("inflation_report needs a fixed table and a retuned table")
    fixed_keys = [(r.model, r.condition, r.operating_point) for r in fixed.rows]
    retuned_keys = [(r.model, r.condition, r.operating_point) for r in retuned.rows]
    if sorted(fixed_keys, key=_key_order) != sorted(retuned_keys, key=_key_order):
        raise ProtocolError("fixed and retuned tables cover different models/conditions")

    rows: List[InflationRow] = []
    for row in fixed.rows:
        retuned_row = retuned.row(row.model, row.condition, row.operating_point)
        best = retuned.summary(row.model, row.condition).max_accuracy
        if fixed.summary(row.model, row.condition).max_accuracy != best:
            raise ProtocolError(f"{row.model}/{row.condition.token}: tables were built on different scores")
        rows.append(
            InflationRow(
                model=row.model,
                condition=row.condition,
                operating_point=row.operating_point,
                fixed_accuracy=row.metrics.accuracy,
                retuned_accuracy=retuned_row.metrics.accuracy,
                retuned_best_accuracy=best,
            )
        )
    return InflationReport(tuple(rows))


def _key_order(key: Tuple[str, Condition, OperatingPointName]) -> Tuple[str, str, str]:
    model, condition, op = key
    return model, condition.token, op.value


def spectrum_gap(auroc_photo: float, auroc_art: float) -> float:
    """(auroc_art - auroc_photo) * 100, in percentage points."""
    for value in (auroc_photo, auroc_art):
        if not 0.0 <= value <= 1.0:
            raise ProtocolError(f"AUROC must be in [0, 1], got {value}")
    return (auroc_art - auroc_photo) * 100.0


def clean_table(fixed: RobustnessTable) -> Dict[str, Dict[str, float]]:
    """
    Clean performance at the three operating points, per model:
    auroc plus <op>_accuracy and <op>_f1 for each operating point.
    """
    out: Dict[str, Dict[str, float]] = {}
    for model in fixed.models:
        cells = {"auroc": fixed.summary(model, CLEAN).auroc}
        for op in OPERATING_POINT_ORDER:
            metrics = fixed.row(model, CLEAN, op).metrics
            cells[f"{op.value}_accuracy"] = metrics.accuracy
            cells[f"{op.value}_f1"] = metrics.f1
        out[model] = cells
    return out


def best_by_operating_point(table: RobustnessTable) -> Dict[Tuple[OperatingPointName, Condition], Tuple[str, float]]:
    """
    Winning model per (operating point, condition) by accuracy.

    Sorted by accuracy descending, then by model name for stability.
    """
    winners: Dict[Tuple[OperatingPointName, Condition], Tuple[str, float]] = {}
    for op in OPERATING_POINT_ORDER:
        for condition in table.grid:
            candidates = sorted(
                ((row.model, row.metrics.accuracy) for row in table.rows
                 if row.operating_point is op and row.condition == condition),
                key=lambda kv: (-kv[1], kv[0]),
            )
            if candidates:
                winners[(op, condition)] = candidates[0]
    return winners
