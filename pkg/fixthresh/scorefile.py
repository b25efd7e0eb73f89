from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from fixthresh.errors import ContractError, IntegrityError, ScoreFileError
from fixthresh.metrics import ScoreSet
from fixthresh.transforms import CLEAN, Condition, parse_condition

REQUIRED_COLUMNS = ("id", "label", "score")
OPTIONAL_COLUMNS = ("seed", "condition", "model")
# condition token marking clean validation scores, the threshold-selection data
VALIDATION_TOKEN = "clean_val"
DEFAULT_MODEL = "model"
DEFAULT_SEED = 0


@dataclass(frozen=True)
class ScoreRecord:
    """One parsed row of a score file."""
    item_id: str
    label: int
    score: float
    seed: int = DEFAULT_SEED
    condition: str = CLEAN.token
    model: str = DEFAULT_MODEL


@dataclass(frozen=True)
class ScoreGroup:
    """Scores of one (model, seed): clean validation plus one ScoreSet per test condition."""
    model: str
    seed: int
    validation: Optional[ScoreSet]
    by_condition: Dict[Condition, ScoreSet]


def _parse_row(row: Dict[str, str], row_number: int, columns: Sequence[str]) -> ScoreRecord:
    item_id = (row.get("id") or "").strip()
    if not item_id:
        raise ScoreFileError(f"Row {row_number}: id is empty")

    label = (row.get("label") or "").strip()
    if label not in {"0", "1"}:
        raise ScoreFileError(f"Row {row_number}: label must be 0 or 1, got {label!r}")

    try:
        score = float(row["score"])
    except (TypeError, ValueError) as exc:
        raise ScoreFileError(f"Row {row_number}: score is not numeric: {row.get('score')!r}") from exc
    if not math.isfinite(score):
        raise ScoreFileError(f"Row {row_number}: score must be finite, got {score}")

    seed = DEFAULT_SEED
    if "seed" in columns and (row.get("seed") or "").strip():
        try:
            seed = int(row["seed"])
        except ValueError as exc:
            raise ScoreFileError(f"Row {row_number}: seed is not an integer: {row['seed']!r}") from exc

    condition = CLEAN.token
    if "condition" in columns and (row.get("condition") or "").strip():
        condition = row["condition"].strip()
        if condition != VALIDATION_TOKEN:
            try:
                condition = parse_condition(condition).token
            except ContractError as exc:
                raise ScoreFileError(f"Row {row_number}: {exc}") from exc

    model = DEFAULT_MODEL
    if "model" in columns and (row.get("model") or "").strip():
        model = row["model"].strip()

    return ScoreRecord(item_id, int(label), score, seed, condition, model)


def read_scores(path: Path) -> List[ScoreRecord]:
    """
    Parse a score CSV: header required, columns id,label,score[,seed][,condition][,model].

    Raises:
        ScoreFileError: on a missing file, missing column or invalid row (row numbers are 1-based data rows).
        IntegrityError: on a duplicate (model, seed, id, condition).
    """
    if not path.exists():
        raise ScoreFileError(f"Score file not found: {path}")

    records: List[ScoreRecord] = []
    seen = set()
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        columns = [c.strip() for c in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in columns]
        if missing:
            raise ScoreFileError(f"{path}: missing required columns: {', '.join(missing)}")
        reader.fieldnames = columns

        for row_number, row in enumerate(reader, start=1):
            record = _parse_row(row, row_number, columns)
            key = (record.model, record.seed, record.item_id, record.condition)
            if key in seen:
                raise IntegrityError(
                    f"Row {row_number}: duplicate id {record.item_id!r} for condition "
                    f"{record.condition!r} (model {record.model!r}, seed {record.seed})"
                )
            seen.add(key)
            records.append(record)

    if not records:
        raise ScoreFileError(f"{path}: no data rows")
    return records


def count_by_condition(records: Iterable[ScoreRecord]) -> Dict[str, int]:
    """
    Count rows per condition token.

    Example output:
      {"clean": 500, "jpeg:60": 500}
    """
    counts: Dict[str, int] = {}
    for record in records:
        counts[record.condition] = counts.get(record.condition, 0) + 1
    return counts


def _to_score_set(records: Sequence[ScoreRecord]) -> ScoreSet:
    ordered = sorted(records, key=lambda r: r.item_id)
    return ScoreSet.from_lists(
        [r.score for r in ordered],
        [r.label for r in ordered],
        [r.item_id for r in ordered],
    )


def group_scores(records: Iterable[ScoreRecord]) -> List[ScoreGroup]:
    """
    Group records into one ScoreGroup per (model, seed), ids sorted within each condition.

    Raises:
        IntegrityError: if an id has different labels across conditions.
    """
    buckets: Dict[Tuple[str, int], Dict[str, List[ScoreRecord]]] = {}
    labels: Dict[Tuple[str, int, str], int] = {}
    for record in records:
        label_key = (record.model, record.seed, record.item_id)
        if labels.setdefault(label_key, record.label) != record.label:
            raise IntegrityError(f"id {record.item_id!r} has conflicting labels across conditions")
        buckets.setdefault((record.model, record.seed), {}).setdefault(record.condition, []).append(record)

    groups: List[ScoreGroup] = []
    for (model, seed), by_token in sorted(buckets.items()):
        validation = by_token.pop(VALIDATION_TOKEN, None)
        by_condition = {parse_condition(token): _to_score_set(rows) for token, rows in by_token.items()}
        # clean first, remaining conditions in file order
        if CLEAN in by_condition:
            by_condition = {CLEAN: by_condition.pop(CLEAN), **by_condition}
        groups.append(
            ScoreGroup(
                model=model,
                seed=seed,
                validation=_to_score_set(validation) if validation else None,
                by_condition=by_condition,
            )
        )
    return groups


def write_scores(path: Path, records: Iterable[ScoreRecord]) -> None:
    """Write records with locale-independent, round-trip-exact floats."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["model", "seed", "condition", "id", "label", "score"])
        for r in records:
            writer.writerow([r.model, r.seed, r.condition, r.item_id, r.label, format_float(r.score)])


def format_float(value: float) -> str:
    """Shortest repr that round-trips, e.g. 0.1 -> '0.1'."""
    return repr(float(value))


def records_from_score_set(
    scores: ScoreSet,
    condition: str,
    model: str = DEFAULT_MODEL,
    seed: int = DEFAULT_SEED,
) -> List[ScoreRecord]:
    if scores.ids is None:
        raise ContractError("records_from_score_set needs a ScoreSet with ids")
    return [
        ScoreRecord(item_id, int(label), float(score), seed, condition, model)
        for item_id, label, score in zip(scores.ids, scores.labels, np.asarray(scores.scores))
    ]
