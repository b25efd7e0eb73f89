from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Dict, List, Sequence, Tuple

from scipy import optimize, special

from fixthresh.errors import StatsError
from fixthresh.protocol import RobustnessTable

CONFIDENCE = 0.95
TABLE_METRICS = ("accuracy", "precision", "recall", "f1", "tnr")
# operating-point column for per-condition (threshold-free) metrics
NO_OPERATING_POINT = "-"


@dataclass(frozen=True)
class SeedSeries:
    """One metric observed once per seed."""
    metric: str
    values: Tuple[float, ...]
    seeds: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.seeds):
            raise StatsError(f"{self.metric}: {len(self.values)} values for {len(self.seeds)} seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise StatsError(f"{self.metric}: seeds must be distinct, got {self.seeds}")
        if not all(math.isfinite(v) for v in self.values):
            raise StatsError(f"{self.metric}: values must be finite")


@dataclass(frozen=True)
class SummaryRow:
    mean: float
    std: float
    ci_lo: float
    ci_hi: float
    n: int


SummaryKey = Tuple[str, str, str, str]  # (model, condition token, operating point, metric)


@dataclass(frozen=True)
class SummaryTable:
    """SummaryRow per (model, condition, operating point, metric), in table order."""
    cells: Tuple[Tuple[SummaryKey, SummaryRow], ...]

    def get(self, model: str, condition: str, operating_point: str, metric: str) -> SummaryRow:
        for key, row in self.cells:
            if key == (model, condition, operating_point, metric):
                return row
        raise StatsError(f"No summary for {(model, condition, operating_point, metric)}")


# -------------------- Student's t --------------------


def t_cdf(t: float, df: int) -> float:
    """CDF of Student's t via the regularized incomplete beta function."""
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t >= 0 else tail


def t_quantile(p: float, df: int) -> float:
    """
    Inverse CDF of Student's t, found by bisection on t_cdf.

    Raises:
        StatsError: if p is outside (0, 1) or df < 1.
    """
    if not 0.0 < p < 1.0:
        raise StatsError(f"p must be in (0, 1), got {p}")
    if df < 1:
        raise StatsError(f"df must be >= 1, got {df}")

    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)

    upper = 1.0
    while t_cdf(upper, df) < p:
        upper *= 2.0
    return optimize.bisect(lambda t: t_cdf(t, df) - p, 0.0, upper, xtol=1e-13, maxiter=500)


# -------------------- Summaries --------------------


def confidence_interval(mean: float, std: float, n: int, confidence: float = CONFIDENCE) -> Tuple[float, float]:
    """mean -/+ t((1 + confidence) / 2, n - 1) * std / sqrt(n)."""
    if n < 2:
        raise StatsError(f"a confidence interval needs n >= 2, got {n}")
    half = t_quantile((1.0 + confidence) / 2.0, n - 1) * std / math.sqrt(n)
    return mean - half, mean + half


def summarize(series: SeedSeries) -> SummaryRow:
    """
    Mean, sample std (n - 1) and 95% t-interval of a seed series.

    Sums are exactly rounded (math.fsum), so the result does not depend on seed order.

    Raises:
        StatsError: if fewer than 2 values are given.
    """
    n = len(series.values)
    if n < 2:
        raise StatsError(f"{series.metric}: summarize needs >= 2 seeds, got {n}")

    mean = math.fsum(series.values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in series.values) / (n - 1))
    ci_lo, ci_hi = confidence_interval(mean, std, n)
    return SummaryRow(mean=mean, std=std, ci_lo=ci_lo, ci_hi=ci_hi, n=n)


def intervals_overlap(a: SummaryRow, b: SummaryRow) -> bool:
    return a.ci_lo <= b.ci_hi and b.ci_lo <= a.ci_hi


def round3(value: float) -> str:
    """3-decimal display rounding, half to even."""
    return str(Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def format_summary(row: SummaryRow) -> str:
    """Table display form, e.g. 0.905±0.020 [0.855, 0.955]."""
    return f"{round3(row.mean)}±{round3(row.std)} [{round3(row.ci_lo)}, {round3(row.ci_hi)}]"


def _table_values(table: RobustnessTable) -> Dict[SummaryKey, float]:
    values: Dict[SummaryKey, float] = {}
    for row in table.rows:
        for metric in TABLE_METRICS:
            key = (row.model, row.condition.token, row.operating_point.value, metric)
            values[key] = getattr(row.metrics, metric)
    for summary in table.conditions:
        values[(summary.model, summary.condition.token, NO_OPERATING_POINT, "auroc")] = summary.auroc
    return values


def aggregate_tables(per_seed: Sequence[RobustnessTable]) -> SummaryTable:
    """
    Summarize every cell of same-shaped per-seed tables.

    Raises:
        StatsError: if fewer than 2 tables are given, seeds repeat or shapes differ.
    """
    if len(per_seed) < 2:
        raise StatsError(f"aggregate_tables needs >= 2 seeds, got {len(per_seed)}")

    seeds = [t.seed if t.seed is not None else i for i, t in enumerate(per_seed)]
    per_table = [_table_values(t) for t in per_seed]
    # cell order follows the lowest-seed table so output is stable under seed reordering
    ordered = sorted(per_seed, key=lambda t: (t.seed is None, t.seed or 0))
    reference_keys = list(_table_values(ordered[0]))
    for values in per_table:
        if set(values) != set(reference_keys):
            raise StatsError("per-seed tables have different shapes")
    if len({t.mode for t in per_seed}) != 1:
        raise StatsError("per-seed tables mix evaluation modes")

    cells: List[Tuple[SummaryKey, SummaryRow]] = []
    for key in reference_keys:
        series = SeedSeries(
            metric="/".join(key),
            values=tuple(values[key] for values in per_table),
            seeds=tuple(seeds),
        )
        cells.append((key, summarize(series)))
    return SummaryTable(tuple(cells))
