from __future__ import annotations

import math

import pytest

from fixthresh.errors import StatsError
from fixthresh.metrics import ScoreSet
from fixthresh.protocol import evaluate_retuned
from fixthresh.stats import (
    NO_OPERATING_POINT,
    SeedSeries,
    SummaryRow,
    aggregate_tables,
    confidence_interval,
    format_summary,
    intervals_overlap,
    round3,
    summarize,
    t_cdf,
    t_quantile,
)
from fixthresh.transforms import CLEAN, parse_condition

JPEG60 = parse_condition("jpeg:60")


def _series(*values: float) -> SeedSeries:
    return SeedSeries("accuracy", tuple(values), tuple(range(len(values))))


def _table(seed: int, shift: float):
    ids = ("a", "b", "c", "d")
    labels = [0, 0, 1, 1]
    clean = ScoreSet.from_lists([0.1, 0.4, 0.35 + shift, 0.8], labels, ids)
    jpeg = ScoreSet.from_lists([0.2, 0.3, 0.25 + shift, 0.6], labels, ids)
    return evaluate_retuned({CLEAN: clean, JPEG60: jpeg}, model="m", seed=seed)


# -------------------- Student's t --------------------


@pytest.mark.parametrize("df", [1, 2, 5, 30])
def test_t_quantile_median_is_zero(df: int) -> None:
    assert t_quantile(0.5, df) == 0.0


def test_t_quantile_table_value() -> None:
    assert t_quantile(0.975, 2) == pytest.approx(4.302653, abs=1e-6)


def test_t_quantile_large_df_approaches_normal() -> None:
    assert t_quantile(0.975, 1000) == pytest.approx(1.9623, abs=1e-4)


def test_t_quantile_is_symmetric() -> None:
    assert t_quantile(0.025, 4) == pytest.approx(-t_quantile(0.975, 4))


def test_t_cdf_inverts_quantile() -> None:
    assert t_cdf(t_quantile(0.9, 3), 3) == pytest.approx(0.9, abs=1e-10)


@pytest.mark.parametrize("p, df", [(0.0, 2), (1.0, 2), (0.5, 0)])
def test_t_quantile_rejects_bad_input(p: float, df: int) -> None:
    with pytest.raises(StatsError):
        t_quantile(p, df)


# -------------------- summarize --------------------


def test_summarize_one_two_three() -> None:
    """Mean 2, std 1, half-width 4.302653 / sqrt(3)."""
    row = summarize(_series(1.0, 2.0, 3.0))
    assert row.mean == pytest.approx(2.0)
    assert row.std == pytest.approx(1.0)
    assert row.ci_lo == pytest.approx(-0.48414, abs=1e-5)
    assert row.ci_hi == pytest.approx(4.48414, abs=1e-5)
    assert row.n == 3


def test_summarize_reference_interval() -> None:
    """A three-seed series with mean 0.905, std 0.020 lands on [0.855, 0.955]."""
    row = summarize(_series(0.885, 0.905, 0.925))
    assert row.std == pytest.approx(0.020)
    assert round3(row.ci_lo) == "0.855"
    assert round3(row.ci_hi) == "0.955"
    assert row.ci_hi == pytest.approx(0.954, abs=0.002)


@pytest.mark.parametrize(
    "mean, std, lo, hi",
    [
        (0.759, 0.003, 0.753, 0.765),
        (0.907, 0.009, 0.885, 0.928),
        (0.750, 0.014, 0.714, 0.786),
        (0.905, 0.020, 0.855, 0.954),
        (0.747, 0.010, 0.721, 0.773),
        (0.901, 0.009, 0.878, 0.924),
    ],
)
def test_three_seed_intervals_from_printed_mean_and_std(mean: float, std: float, lo: float, hi: float) -> None:
    """Published three-seed AUROC rows, rebuilt from their rounded mean and std."""
    ci_lo, ci_hi = confidence_interval(mean, std, 3)
    assert ci_lo == pytest.approx(lo, abs=0.002)
    assert ci_hi == pytest.approx(hi, abs=0.002)


def test_summarize_constant_series() -> None:
    row = summarize(_series(0.7, 0.7, 0.7))
    assert row.std == pytest.approx(0.0, abs=1e-12)
    assert (row.ci_lo, row.ci_hi) == (pytest.approx(0.7), pytest.approx(0.7))


def test_summarize_needs_two_values() -> None:
    with pytest.raises(StatsError):
        summarize(_series(0.5))


def test_summarize_is_order_independent() -> None:
    a = summarize(SeedSeries("m", (0.1, 0.7, 0.3), (0, 1, 2)))
    b = summarize(SeedSeries("m", (0.3, 0.1, 0.7), (2, 0, 1)))
    assert a == b


def test_seed_series_rejects_duplicates() -> None:
    with pytest.raises(StatsError):
        SeedSeries("m", (0.1, 0.2), (1, 1))


def test_intervals_overlap() -> None:
    a = SummaryRow(mean=0.5, std=0.1, ci_lo=0.4, ci_hi=0.6, n=3)
    b = SummaryRow(mean=0.65, std=0.1, ci_lo=0.6, ci_hi=0.7, n=3)
    c = SummaryRow(mean=0.9, std=0.1, ci_lo=0.8, ci_hi=1.0, n=3)
    assert intervals_overlap(a, b)
    assert not intervals_overlap(a, c)


# -------------------- Display --------------------


@pytest.mark.parametrize("value, text", [(0.9055, "0.906"), (0.9045, "0.904"), (0.0625, "0.062"), (1.0, "1.000")])
def test_round3_half_even(value: float, text: str) -> None:
    assert round3(value) == text


def test_format_summary() -> None:
    row = SummaryRow(mean=0.905, std=0.02, ci_lo=0.8553, ci_hi=0.9547, n=3)
    assert format_summary(row) == "0.905±0.020 [0.855, 0.955]"


# -------------------- aggregate_tables --------------------


def test_aggregate_identical_tables_have_zero_std() -> None:
    summary = aggregate_tables([_table(0, 0.0), _table(1, 0.0), _table(2, 0.0)])
    assert all(row.std == pytest.approx(0.0, abs=1e-12) for _, row in summary.cells)


def test_aggregate_matches_cellwise_summarize() -> None:
    tables = [_table(0, 0.0), _table(1, 0.1), _table(2, -0.2)]
    summary = aggregate_tables(tables)

    aurocs = tuple(t.summary("m", JPEG60).auroc for t in tables)
    expected = summarize(SeedSeries("auroc", aurocs, (0, 1, 2)))
    assert summary.get("m", "jpeg:60", NO_OPERATING_POINT, "auroc") == expected

    accs = tuple(t.rows[0].metrics.accuracy for t in tables)
    op = tables[0].rows[0].operating_point.value
    assert summary.get("m", "clean", op, "accuracy") == summarize(SeedSeries("a", accs, (0, 1, 2)))


def test_aggregate_is_invariant_to_seed_order() -> None:
    tables = [_table(0, 0.0), _table(1, 0.1), _table(2, -0.2)]
    assert aggregate_tables(tables) == aggregate_tables(tables[::-1])


def test_aggregate_rejects_single_seed_and_shape_mismatch() -> None:
    with pytest.raises(StatsError):
        aggregate_tables([_table(0, 0.0)])

    other = evaluate_retuned({CLEAN: ScoreSet.from_lists([0.1, 0.9], [0, 1], ("a", "b"))}, model="m", seed=1)
    with pytest.raises(StatsError):
        aggregate_tables([_table(0, 0.0), other])


def test_summary_get_missing_key() -> None:
    summary = aggregate_tables([_table(0, 0.0), _table(1, 0.0)])
    with pytest.raises(StatsError):
        summary.get("nope", "clean", "low_fpr", "accuracy")
    assert math.isfinite(summary.get("m", "clean", "low_fpr", "accuracy").mean)
