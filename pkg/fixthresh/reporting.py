from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from fixthresh.errors import ImageIOError, ScoreFileError  # noqa: E402
from fixthresh.metrics import ConfusionCounts, MetricBundle  # noqa: E402
from fixthresh.protocol import (  # noqa: E402
    OPERATING_POINT_ORDER,
    ConditionSummary,
    EvaluationMode,
    InflationReport,
    OperatingPointName,
    RobustnessTable,
    TableRow,
)
from fixthresh.scorefile import format_float  # noqa: E402
from fixthresh.stats import SummaryRow, SummaryTable, format_summary, round3  # noqa: E402
from fixthresh.transforms import Condition, parse_condition  # noqa: E402

logger = logging.getLogger(__name__)

ROBUSTNESS_COLUMNS = [
    "model", "seed", "condition", "operating_point", "threshold",
    "tp", "fp", "tn", "fn",
    "accuracy", "precision", "recall", "f1", "tnr",
    "auroc", "max_accuracy", "mode", "run_id",
]
SUMMARY_COLUMNS = ["model", "condition", "operating_point", "metric", "mean", "std", "ci_lo", "ci_hi", "n", "run_id"]
INFLATION_COLUMNS = [
    "model", "seed", "condition", "operating_point",
    "fixed_accuracy", "retuned_accuracy", "retuned_best_accuracy", "delta", "run_id",
]
SVG_HASH_SALT = "fixthresh"


@dataclass(frozen=True)
class SpectrumRow:
    """AUROC per domain for one architecture, over seeds, and the art - photo gap."""
    model: str
    photo: SummaryRow
    art: SummaryRow
    gap: float
    separated: bool


def run_id(payload: Mapping[str, Any]) -> str:
    """Short content hash of a JSON-serializable payload (config, data hashes, seeds)."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def fmt(value: float) -> str:
    """Fixed 6-decimal metric formatting, locale-independent."""
    return f"{value:.6f}"


def _writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open("w", encoding="utf-8", newline="")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# -------------------- CSV --------------------


def write_robustness_csv(path: Path, tables: Sequence[RobustnessTable], rid: str) -> None:
    with _writer(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROBUSTNESS_COLUMNS)
        for table in tables:
            seed = "" if table.seed is None else table.seed
            for row in table.rows:
                summary = table.summary(row.model, row.condition)
                m, c = row.metrics, row.counts
                writer.writerow([
                    row.model, seed, row.condition.token, row.operating_point.value, format_float(row.threshold),
                    c.tp, c.fp, c.tn, c.fn,
                    fmt(m.accuracy), fmt(m.precision), fmt(m.recall), fmt(m.f1), fmt(m.tnr),
                    fmt(summary.auroc), fmt(summary.max_accuracy), table.mode.value, rid,
                ])


def _parse_robustness_row(row: Dict[str, str], row_number: int) -> Tuple[Tuple[str, Optional[int]], TableRow, ConditionSummary]:
    try:
        seed = int(row["seed"]) if row["seed"] else None
        condition = parse_condition(row["condition"])
        counts = ConfusionCounts(tp=int(row["tp"]), fp=int(row["fp"]), tn=int(row["tn"]), fn=int(row["fn"]))
        metrics = MetricBundle(
            accuracy=float(row["accuracy"]),
            precision=float(row["precision"]),
            recall=float(row["recall"]),
            f1=float(row["f1"]),
            tnr=float(row["tnr"]),
        )
        table_row = TableRow(
            model=row["model"],
            condition=condition,
            operating_point=OperatingPointName(row["operating_point"]),
            threshold=float(row["threshold"]),
            counts=counts,
            metrics=metrics,
        )
        summary = ConditionSummary(row["model"], condition, float(row["auroc"]), float(row["max_accuracy"]))
        mode = EvaluationMode(row["mode"]).value
    except (KeyError, TypeError, ValueError) as exc:
        raise ScoreFileError(f"Row {row_number}: malformed robustness row: {exc}") from exc
    return (mode, seed), table_row, summary


def read_robustness_csv(path: Path) -> List[RobustnessTable]:
    """
    Parse robustness.csv back into one RobustnessTable per (mode, seed).

    Raises:
        ImageIOError: if the file does not exist.
        ScoreFileError: on a malformed row.
    """
    if not path.exists():
        raise ImageIOError(f"Report file not found: {path}")

    rows: Dict[Tuple[str, Optional[int]], List[TableRow]] = {}
    summaries: Dict[Tuple[str, Optional[int]], Dict[Tuple[str, Condition], ConditionSummary]] = {}
    with path.open("r", encoding="utf-8", newline="") as f:
        for row_number, row in enumerate(csv.DictReader(f), start=1):
            key, table_row, summary = _parse_robustness_row(row, row_number)
            rows.setdefault(key, []).append(table_row)
            summaries.setdefault(key, {})[(summary.model, summary.condition)] = summary

    return [
        RobustnessTable(EvaluationMode(mode), tuple(rows[(mode, seed)]), tuple(summaries[(mode, seed)].values()), seed)
        for mode, seed in rows
    ]


def write_summary_csv(path: Path, summary: SummaryTable, rid: str) -> None:
    with _writer(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for (model, condition, op, metric), s in summary.cells:
            writer.writerow([model, condition, op, metric, fmt(s.mean), fmt(s.std), fmt(s.ci_lo), fmt(s.ci_hi), s.n, rid])


def read_summary_csv(path: Path) -> SummaryTable:
    if not path.exists():
        raise ImageIOError(f"Summary file not found: {path}")
    cells = []
    with path.open("r", encoding="utf-8", newline="") as f:
        for row_number, row in enumerate(csv.DictReader(f), start=1):
            try:
                key = (row["model"], row["condition"], row["operating_point"], row["metric"])
                cells.append((key, SummaryRow(
                    mean=float(row["mean"]), std=float(row["std"]),
                    ci_lo=float(row["ci_lo"]), ci_hi=float(row["ci_hi"]), n=int(row["n"]),
                )))
            except (KeyError, TypeError, ValueError) as exc:
                raise ScoreFileError(f"Row {row_number}: malformed summary row: {exc}") from exc
    return SummaryTable(tuple(cells))


def write_inflation_csv(path: Path, reports: Sequence[Tuple[Optional[int], InflationReport]], rid: str) -> None:
    with _writer(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(INFLATION_COLUMNS)
        for seed, report in reports:
            for r in report.rows:
                writer.writerow([
                    r.model, "" if seed is None else seed, r.condition.token, r.operating_point.value,
                    fmt(r.fixed_accuracy), fmt(r.retuned_accuracy), fmt(r.retuned_best_accuracy), fmt(r.delta), rid,
                ])


# -------------------- Markdown --------------------


def _md_table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(cells) + " |" for cells in rows)
    return lines


def robustness_markdown(
    tables: Sequence[RobustnessTable],
    summary: Optional[SummaryTable],
    rid: str,
    metric: str = "accuracy",
) -> str:
    """
    Conditions as rows, models as columns, one block per operating point.

    tables are the per-seed tables of one mode. With a multi-seed summary each
    cell reads mean±std [ci_lo, ci_hi]; a single table prints the value itself.
    """
    first = tables[0]
    models, grid = first.models, first.grid
    title = "Fixed-threshold" if first.mode is EvaluationMode.FIXED else "Retuned-threshold"

    lines = [f"# {title} robustness ({metric})", "", f"run: `{rid}`", ""]
    for op in OPERATING_POINT_ORDER:
        lines.append(f"## {op.display_name}")
        lines.append("")
        body = []
        for condition in grid:
            cells = [condition.display_name]
            for model in models:
                if summary is not None and len(tables) > 1:
                    cells.append(format_summary(summary.get(model, condition.token, op.value, metric)))
                else:
                    cells.append(round3(getattr(first.row(model, condition, op).metrics, metric)))
            body.append(cells)
        lines.extend(_md_table(["Condition", *models], body))
        lines.append("")
    return "\n".join(lines)


def mean_clean_table(clean_tables: Sequence[Dict[str, Dict[str, float]]]) -> Dict[str, Dict[str, float]]:
    """Cell-wise mean of per-seed clean_table results."""
    out: Dict[str, Dict[str, float]] = {}
    for model, cells in clean_tables[0].items():
        out[model] = {
            key: math.fsum(t[model][key] for t in clean_tables) / len(clean_tables) for key in cells
        }
    return out


def clean_markdown(clean: Dict[str, Dict[str, float]], rid: str) -> str:
    header = ["Model", "AUROC"]
    for op in OPERATING_POINT_ORDER:
        header += [f"{op.display_name} Acc", f"{op.display_name} F1"]
    body = []
    for model, cells in clean.items():
        row = [model, round3(cells["auroc"])]
        for op in OPERATING_POINT_ORDER:
            row += [round3(cells[f"{op.value}_accuracy"]), round3(cells[f"{op.value}_f1"])]
        body.append(row)
    return "\n".join(["# Clean performance at three operating points", "", f"run: `{rid}`", "",
                      *_md_table(header, body), ""])


def winners_from_summary(
    summary: SummaryTable,
    models: Sequence[str],
    grid: Sequence[Condition],
) -> Dict[Tuple[OperatingPointName, Condition], Tuple[str, float]]:
    """Best model by mean accuracy per (operating point, condition); ties by model name."""
    winners = {}
    for op in OPERATING_POINT_ORDER:
        for condition in grid:
            candidates = sorted(
                ((m, summary.get(m, condition.token, op.value, "accuracy").mean) for m in models),
                key=lambda kv: (-kv[1], kv[0]),
            )
            winners[(op, condition)] = candidates[0]
    return winners


def winners_markdown(
    winners: Mapping[Tuple[OperatingPointName, Condition], Tuple[str, float]],
    grid: Sequence[Condition],
    rid: str,
) -> str:
    body = []
    for condition in grid:
        cells = [condition.display_name]
        for op in OPERATING_POINT_ORDER:
            model, acc = winners[(op, condition)]
            cells.append(f"{model} ({round3(acc)})")
        body.append(cells)
    header = ["Condition", *(op.display_name for op in OPERATING_POINT_ORDER)]
    return "\n".join(["# Best model per operating point", "", f"run: `{rid}`", "", *_md_table(header, body), ""])


def spectrum_markdown(rows: Sequence[SpectrumRow], rid: str) -> str:
    body = [
        [r.model, format_summary(r.photo), format_summary(r.art), f"{r.gap:+.1f}", "yes" if r.separated else "no"]
        for r in rows
    ]
    header = ["Model", "Photo AUROC", "Art AUROC", "Spectrum Gap (pp)", "CIs separated"]
    return "\n".join(["# Cross-domain AUROC", "", f"run: `{rid}`", "", *_md_table(header, body), ""])


def write_markdown(path: Path, text: str) -> None:
    _write_text(path, text)


def write_manifest(path: Path, manifest: Mapping[str, Any]) -> None:
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


# -------------------- Plots --------------------


@dataclass(frozen=True)
class PlotSeries:
    model: str
    values: Tuple[float, ...]
    ci_lo: Optional[Tuple[float, ...]] = None
    ci_hi: Optional[Tuple[float, ...]] = None


def robustness_figure(series: Sequence[PlotSeries], labels: Sequence[str], title: str) -> Figure:
    """Accuracy vs condition, one line per model; y axis fixed to [0, 1]."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = list(range(len(labels)))
    for s in series:
        if s.ci_lo is not None and s.ci_hi is not None:
            err = [[v - lo for v, lo in zip(s.values, s.ci_lo)], [hi - v for v, hi in zip(s.values, s.ci_hi)]]
            ax.errorbar(x, s.values, yerr=err, marker="o", capsize=3, label=s.model)
        else:
            ax.plot(x, s.values, marker="o", label=s.model)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("Accuracy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def _series_for(
    tables: Sequence[RobustnessTable],
    summary: Optional[SummaryTable],
    op: OperatingPointName,
) -> Tuple[List[PlotSeries], List[str]]:
    grid = tables[0].grid
    series = []
    for model in tables[0].models:
        values = tuple(
            math.fsum(t.row(model, c, op).metrics.accuracy for t in tables) / len(tables) for c in grid
        )
        lo = hi = None
        if summary is not None and len(tables) > 1:
            rows = [summary.get(model, c.token, op.value, "accuracy") for c in grid]
            lo = tuple(min(r.ci_lo, v) for r, v in zip(rows, values))
            hi = tuple(max(r.ci_hi, v) for r, v in zip(rows, values))
        series.append(PlotSeries(model, values, lo, hi))
    return series, [c.display_name for c in grid]


def plot_robustness(report_dir: Path) -> List[Path]:
    """
    Write robustness_<operating point>.svg from report_dir/robustness.csv
    (fixed-threshold rows), with CI whiskers when summary.csv is present.

    Raises:
        ImageIOError: if the report is missing.
    """
    tables = [t for t in read_robustness_csv(report_dir / "robustness.csv") if t.mode is EvaluationMode.FIXED]
    if not tables:
        raise ImageIOError(f"No fixed-threshold rows in {report_dir / 'robustness.csv'}")
    summary_path = report_dir / "summary.csv"
    summary = read_summary_csv(summary_path) if summary_path.exists() else None

    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    written = []
    for op in OPERATING_POINT_ORDER:
        series, labels = _series_for(tables, summary, op)
        fig = robustness_figure(series, labels, f"Fixed-threshold accuracy, {op.display_name}")
        path = report_dir / f"robustness_{op.value}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
        logger.info("Wrote %s", path)
    return written

