from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from fixthresh import __version__
from fixthresh.config import ArchitectureSpec, RunConfig
from fixthresh.detector import (
    HybridDetector,
    LabeledBatch,
    degrade_images,
    make_batch,
    save_checkpoint,
    score_images,
    train,
)
from fixthresh.errors import FixthreshError, ProtocolError, StageError, ValidationError
from fixthresh.imaging import DatasetEntry, ImageTensor, load_unit_images
from fixthresh.metrics import ScoreSet
from fixthresh.protocol import (
    RobustnessTable,
    best_by_operating_point,
    clean_table,
    evaluate_fixed,
    evaluate_retuned,
    inflation_report,
    merge_tables,
    select_operating_points,
    spectrum_gap,
)
from fixthresh.reporting import (
    SpectrumRow,
    clean_markdown,
    mean_clean_table,
    plot_robustness,
    robustness_markdown,
    run_id,
    spectrum_markdown,
    winners_from_summary,
    winners_markdown,
    write_inflation_csv,
    write_manifest,
    write_markdown,
    write_robustness_csv,
    write_summary_csv,
)
from fixthresh.scorefile import VALIDATION_TOKEN, ScoreGroup, ScoreRecord, records_from_score_set, write_scores
from fixthresh.stats import NO_OPERATING_POINT, SeedSeries, aggregate_tables, intervals_overlap, summarize
from fixthresh.synthgen import write_dataset
from fixthresh.transforms import CLEAN, Condition, ConditionGrid

logger = logging.getLogger(__name__)

DOMAINS = ("photo", "art")


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility envelope written next to every report."""
    run_id: str
    tool_version: str
    config: Dict[str, Any]
    seeds: List[int]
    dataset_hashes: Dict[str, str] = field(default_factory=dict)
    created_at: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Re-raise runtime failures as StageError(name); validation errors pass through."""
    try:
        yield
    except (ValidationError, StageError):
        raise
    except FixthreshError as exc:
        raise StageError(name, str(exc)) from exc


def dataset_hash(entries: Sequence[DatasetEntry], root: Path) -> str:
    """sha256 over (relative path, label, split, file bytes) in listing order."""
    digest = hashlib.sha256()
    for entry in entries:
        rel = entry.path.relative_to(root).as_posix() if entry.path.is_relative_to(root) else entry.path.name
        digest.update(f"{rel}|{entry.label}|{entry.split or ''}\n".encode("utf-8"))
        digest.update(entry.path.read_bytes())
    return digest.hexdigest()


# -------------------- Score-file evaluation --------------------


@dataclass
class EvaluationResult:
    fixed: List[RobustnessTable]
    retuned: List[RobustnessTable]


def _validation_scores(group: ScoreGroup) -> ScoreSet:
    if group.validation is not None:
        return group.validation
    logger.warning(
        "%s seed %d: no %s rows, selecting thresholds on clean test scores",
        group.model, group.seed, VALIDATION_TOKEN,
    )
    return group.by_condition[CLEAN]


def evaluate_groups(groups: Sequence[ScoreGroup], mode: str = "both") -> EvaluationResult:
    """
    Fixed and/or retuned tables for every (model, seed) group, merged per seed.

    mode is "fixed", "retuned" or "both".
    """
    per_seed_fixed: Dict[int, List[RobustnessTable]] = {}
    per_seed_retuned: Dict[int, List[RobustnessTable]] = {}
    for group in groups:
        if CLEAN not in group.by_condition:
            raise ProtocolError(f"{group.model} seed {group.seed}: score file has no clean condition")
        if mode in ("fixed", "both"):
            with stage("select"):
                ops = select_operating_points(
                    _validation_scores(group), source=f"{group.model}/seed{group.seed}/{VALIDATION_TOKEN}"
                )
            with stage("eval"):
                per_seed_fixed.setdefault(group.seed, []).append(
                    evaluate_fixed(group.by_condition, ops, group.model, group.seed)
                )
        if mode in ("retuned", "both"):
            with stage("eval"):
                per_seed_retuned.setdefault(group.seed, []).append(
                    evaluate_retuned(group.by_condition, group.model, group.seed)
                )

    with stage("eval"):
        return EvaluationResult(
            fixed=[merge_tables(per_seed_fixed[s]) for s in sorted(per_seed_fixed)],
            retuned=[merge_tables(per_seed_retuned[s]) for s in sorted(per_seed_retuned)],
        )


def write_reports(out_dir: Path, result: EvaluationResult, rid: str) -> List[Path]:
    """
    Write the report set for one evaluation:
    robustness.csv/.md, inflation.csv (both modes), summary.csv (>= 2 seeds),
    clean.md and winners.md.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    primary = result.fixed or result.retuned
    written: List[Path] = []

    path = out_dir / "robustness.csv"
    write_robustness_csv(path, [*result.fixed, *result.retuned], rid)
    written.append(path)

    summary = None
    if len(primary) >= 2:
        with stage("aggregate"):
            summary = aggregate_tables(primary)
        path = out_dir / "summary.csv"
        write_summary_csv(path, summary, rid)
        written.append(path)

    path = out_dir / "robustness.md"
    write_markdown(path, robustness_markdown(primary, summary, rid))
    written.append(path)

    if result.fixed and result.retuned:
        with stage("inflation"):
            reports = [(f.seed, inflation_report(f, r)) for f, r in zip(result.fixed, result.retuned)]
        path = out_dir / "inflation.csv"
        write_inflation_csv(path, reports, rid)
        written.append(path)

    if result.fixed:
        path = out_dir / "clean.md"
        write_markdown(path, clean_markdown(mean_clean_table([clean_table(t) for t in result.fixed]), rid))
        written.append(path)

    first = primary[0]
    winners = (
        winners_from_summary(summary, first.models, first.grid) if summary is not None
        else best_by_operating_point(first)
    )
    path = out_dir / "winners.md"
    write_markdown(path, winners_markdown(winners, first.grid, rid))
    written.append(path)
    return written


# -------------------- Spectrum reproduction --------------------


@dataclass
class DomainSplits:
    """Unit-range images of one synthetic domain, by split."""
    images: Dict[str, List[ImageTensor]]
    labels: Dict[str, List[int]]
    ids: Dict[str, List[str]]


def load_domain(entries: Sequence[DatasetEntry], size: int) -> DomainSplits:
    images: Dict[str, List[ImageTensor]] = {}
    labels: Dict[str, List[int]] = {}
    ids: Dict[str, List[str]] = {}
    for name in ("train", "val", "test"):
        part = [e for e in entries if e.split == name]
        images[name] = load_unit_images(part, size)
        labels[name] = [e.label for e in part]
        ids[name] = [e.item_id for e in part]
    return DomainSplits(images, labels, ids)


def _batches(config: RunConfig, arch: ArchitectureSpec, data: DomainSplits) -> Tuple[LabeledBatch, LabeledBatch]:
    hybrid = config.hybrid_config(arch)
    return (
        make_batch(data.images["train"], data.labels["train"], data.ids["train"], hybrid),
        make_batch(data.images["val"], data.labels["val"], data.ids["val"], hybrid),
    )


def evaluate_model(
    model: HybridDetector,
    name: str,
    seed: int,
    data: DomainSplits,
    degraded: Dict[Condition, List[ImageTensor]],
) -> Tuple[RobustnessTable, RobustnessTable, List[ScoreRecord]]:
    """Select thresholds on clean validation, score the test grid, build both tables."""
    with stage("score"):
        val_scores = score_images(model, data.images["val"], data.labels["val"], data.ids["val"])
        by_condition = {
            cond: score_images(model, imgs, data.labels["test"], data.ids["test"])
            for cond, imgs in degraded.items()
        }
    with stage("select"):
        ops = select_operating_points(val_scores, source=f"{name}/seed{seed}/{VALIDATION_TOKEN}")
    with stage("eval"):
        fixed = evaluate_fixed(by_condition, ops, name, seed)
        retuned = evaluate_retuned(by_condition, name, seed)

    records = records_from_score_set(val_scores, VALIDATION_TOKEN, name, seed)
    for cond, scores in by_condition.items():
        records.extend(records_from_score_set(scores, cond.token, name, seed))
    return fixed, retuned, records


def run_domain(config: RunConfig, domain: str, out_dir: Path) -> Tuple[EvaluationResult, str]:
    """Generate one domain's dataset, train every architecture per seed, evaluate."""
    spec = config.domain_spec(domain)
    data_dir = out_dir / "data" / domain
    with stage("gen"):
        entries = write_dataset(spec, data_dir)
    data = load_domain(entries, config.input_size)
    grid: ConditionGrid = config.condition_grid

    with stage("degrade"):
        degraded = degrade_images(data.images["test"], grid)
    logger.info("%s: %d test images under %d conditions", domain, len(data.ids["test"]), len(grid))

    fixed: List[RobustnessTable] = []
    retuned: List[RobustnessTable] = []
    records: List[ScoreRecord] = []
    for seed in config.seeds:
        seed_fixed, seed_retuned = [], []
        for arch in config.architectures:
            logger.info("%s seed %d: training %s", domain, seed, arch.name)
            train_batch, val_batch = _batches(config, arch, data)
            with stage("train"):
                result = train(train_batch, val_batch, config.hybrid_config(arch), config.train_config(seed))
            save_checkpoint(result.model, out_dir / "checkpoints" / domain / f"{arch.name}_seed{seed}.pt")
            f, r, recs = evaluate_model(result.model, arch.name, seed, data, degraded)
            seed_fixed.append(f)
            seed_retuned.append(r)
            records.extend(recs)
        with stage("eval"):
            fixed.append(merge_tables(seed_fixed))
            retuned.append(merge_tables(seed_retuned))

    write_scores(out_dir / domain / "scores.csv", records)
    return EvaluationResult(fixed, retuned), dataset_hash(entries, data_dir)


def spectrum_rows(by_domain: Dict[str, EvaluationResult], models: Sequence[str]) -> List[SpectrumRow]:
    """Clean-test AUROC over seeds per domain and the art - photo gap, per model."""
    rows = []
    for model in models:
        summaries = {}
        for domain in DOMAINS:
            tables = by_domain[domain].fixed
            values = tuple(t.summary(model, CLEAN).auroc for t in tables)
            summaries[domain] = summarize(
                SeedSeries(f"{model}/{domain}/{NO_OPERATING_POINT}/auroc", values, tuple(t.seed for t in tables))
            )
        with stage("spectrum"):
            gap = spectrum_gap(summaries["photo"].mean, summaries["art"].mean)
        rows.append(SpectrumRow(
            model=model,
            photo=summaries["photo"],
            art=summaries["art"],
            gap=gap,
            separated=not intervals_overlap(summaries["photo"], summaries["art"]),
        ))
    return rows


def reproduce_spectrum(config: RunConfig, out_dir: Optional[Path] = None) -> Path:
    """
    Desk-scale forensic-semantic spectrum run: every architecture x seed on
    the photo and art domains, fixed-threshold and retuned tables, multi-seed
    summaries, inflation, cross-domain AUROC and plots.

    Returns the report directory.
    """
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_domain: Dict[str, EvaluationResult] = {}
    hashes: Dict[str, str] = {}
    for domain in DOMAINS:
        by_domain[domain], hashes[domain] = run_domain(config, domain, out_dir)

    rid = run_id({"config": config.to_dict(), "datasets": hashes, "version": __version__})
    for domain in DOMAINS:
        write_reports(out_dir / domain, by_domain[domain], rid)
        with stage("plot"):
            plot_robustness(out_dir / domain)

    if len(config.seeds) >= 2:
        rows = spectrum_rows(by_domain, [a.name for a in config.architectures])
        write_markdown(out_dir / "spectrum.md", spectrum_markdown(rows, rid))
    else:
        logger.warning("spectrum.md needs >= 2 seeds for confidence intervals; skipped")

    manifest = RunManifest(
        run_id=rid,
        tool_version=__version__,
        config=config.to_dict(),
        seeds=list(config.seeds),
        dataset_hashes=hashes,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    write_manifest(out_dir / "manifest.json", manifest.to_dict())
    logger.info("Report written to %s (run %s)", out_dir, rid)
    return out_dir

