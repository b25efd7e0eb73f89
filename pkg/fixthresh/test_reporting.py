from __future__ import annotations

from pathlib import Path
from typing import List

import pytest

from fixthresh.metrics import ScoreSet
from fixthresh.protocol import (
    EvaluationMode,
    OperatingPointName,
    RobustnessTable,
    evaluate_fixed,
    evaluate_retuned,
    inflation_report,
    merge_tables,
    select_operating_points,
)
from fixthresh.reporting import (
    INFLATION_COLUMNS,
    ROBUSTNESS_COLUMNS,
    PlotSeries,
    SpectrumRow,
    plot_robustness,
    read_robustness_csv,
    read_summary_csv,
    robustness_figure,
    robustness_markdown,
    run_id,
    spectrum_markdown,
    winners_from_summary,
    winners_markdown,
    write_inflation_csv,
    write_robustness_csv,
    write_summary_csv,
)
from fixthresh.stats import SeedSeries, aggregate_tables, summarize
from fixthresh.transforms import CLEAN, parse_condition

JPEG60 = parse_condition("jpeg:60")
IDS = ("a", "b", "c", "d", "e", "f")
LABELS = [0, 0, 0, 1, 1, 1]


def _fixed_tables(seed: int) -> List[RobustnessTable]:
    """Two models for one seed; model b loses more under JPEG."""
    tables = []
    for model, drop in (("a", 0.05 if seed == 0 else 0.15), ("b", 0.3)):
        clean = ScoreSet.from_lists([0.1, 0.2, 0.3, 0.7, 0.8, 0.9], LABELS, IDS)
        jpeg = ScoreSet.from_lists([0.1, 0.2, 0.3, 0.7 - drop, 0.8 - drop, 0.9 - drop], LABELS, IDS)
        scores = {CLEAN: clean, JPEG60: jpeg}
        tables.append(evaluate_fixed(scores, select_operating_points(clean), model=model, seed=seed))
    return [merge_tables(tables)]


def _three_seeds() -> List[RobustnessTable]:
    return [_fixed_tables(seed)[0] for seed in (0, 1, 2)]


def test_run_id_is_stable_and_short() -> None:
    a = run_id({"seeds": [0, 1], "grid": ["clean"]})
    b = run_id({"grid": ["clean"], "seeds": [0, 1]})
    assert a == b
    assert len(a) == 12
    assert run_id({"seeds": [0, 2], "grid": ["clean"]}) != a


def test_robustness_csv_round_trip(tmp_path: Path) -> None:
    tables = _three_seeds()
    path = tmp_path / "robustness.csv"
    write_robustness_csv(path, tables, "abc")

    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header.split(",") == ROBUSTNESS_COLUMNS

    back = read_robustness_csv(path)
    assert [t.seed for t in back] == [0, 1, 2]
    for original, parsed in zip(tables, back):
        assert parsed.mode is EvaluationMode.FIXED
        assert parsed.models == original.models
        assert parsed.grid == original.grid
        for a, b in zip(original.rows, parsed.rows):
            assert b.threshold == a.threshold
            assert b.counts == a.counts
            assert b.metrics.accuracy == pytest.approx(a.metrics.accuracy, abs=1e-6)


def test_robustness_csv_is_byte_stable(tmp_path: Path) -> None:
    tables = _three_seeds()
    write_robustness_csv(tmp_path / "one.csv", tables, "abc")
    write_robustness_csv(tmp_path / "two.csv", tables, "abc")
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()


def test_summary_csv_round_trip(tmp_path: Path) -> None:
    summary = aggregate_tables(_three_seeds())
    path = tmp_path / "summary.csv"
    write_summary_csv(path, summary, "abc")
    back = read_summary_csv(path)
    assert [key for key, _ in back.cells] == [key for key, _ in summary.cells]
    row = summary.get("a", "jpeg:60", "low_fpr", "accuracy")
    assert back.get("a", "jpeg:60", "low_fpr", "accuracy").mean == pytest.approx(row.mean, abs=1e-6)


def test_inflation_csv(tmp_path: Path) -> None:
    clean = ScoreSet.from_lists([0.1, 0.2, 0.3, 0.7, 0.8, 0.9], LABELS, IDS)
    jpeg = ScoreSet.from_lists([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], LABELS, IDS)
    scores = {CLEAN: clean, JPEG60: jpeg}
    report = inflation_report(evaluate_fixed(scores, select_operating_points(clean)), evaluate_retuned(scores))
    path = tmp_path / "inflation.csv"
    write_inflation_csv(path, [(0, report)], "abc")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split(",") == INFLATION_COLUMNS
    assert len(lines) == 1 + len(report.rows)
    assert "model,0,jpeg:60,low_fpr,0.500000,1.000000,1.000000,0.500000,abc" in lines


def test_robustness_markdown_single_and_multi_seed() -> None:
    single = robustness_markdown(_fixed_tables(0), None, "abc")
    assert single.startswith("# Fixed-threshold robustness (accuracy)")
    assert "| Condition | a | b |" in single
    assert "| JPEG Q60 | 0.833 | 0.500 |" in single

    tables = _three_seeds()
    multi = robustness_markdown(tables, aggregate_tables(tables), "abc")
    assert "±" in multi
    assert "## ROC-optimal" in multi


def test_winners_tie_goes_to_name() -> None:
    tables = _three_seeds()
    summary = aggregate_tables(tables)
    winners = winners_from_summary(summary, ["b", "a"], tables[0].grid)
    assert winners[(OperatingPointName.BEST_F1, CLEAN)][0] == "a"
    assert winners[(OperatingPointName.BEST_F1, JPEG60)][0] == "a"
    text = winners_markdown(winners, tables[0].grid, "abc")
    assert "| Clean | a (1.000) |" in text


def test_spectrum_markdown_gap_sign() -> None:
    photo = summarize(SeedSeries("auroc", (0.74, 0.76, 0.777), (0, 1, 2)))
    art = summarize(SeedSeries("auroc", (0.90, 0.907, 0.914), (0, 1, 2)))
    text = spectrum_markdown([SpectrumRow("cnn_freq", photo, art, 14.8, True)], "abc")
    assert "| cnn_freq |" in text
    assert "+14.8" in text
    assert "| yes |" in text


def test_robustness_figure_axes() -> None:
    fig = robustness_figure(
        [PlotSeries("a", (1.0, 0.75)), PlotSeries("b", (0.9, 0.5), (0.8, 0.4), (1.0, 0.6))],
        ["Clean", "JPEG Q60"],
        "title",
    )
    ax = fig.axes[0]
    assert ax.get_ylim() == (0.0, 1.0)
    assert list(ax.lines[0].get_ydata()) == [1.0, 0.75]
    assert [t.get_text() for t in ax.get_xticklabels()] == ["Clean", "JPEG Q60"]


def test_plot_robustness_is_deterministic(tmp_path: Path) -> None:
    tables = _three_seeds()
    write_robustness_csv(tmp_path / "robustness.csv", tables, "abc")
    write_summary_csv(tmp_path / "summary.csv", aggregate_tables(tables), "abc")

    first = [p.read_bytes() for p in plot_robustness(tmp_path)]
    second = [p.read_bytes() for p in plot_robustness(tmp_path)]
    assert len(first) == 3
    assert first == second
    assert (tmp_path / "robustness_best_f1.svg").exists()
