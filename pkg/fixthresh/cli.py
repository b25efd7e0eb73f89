from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch

from fixthresh import __version__
from fixthresh.batching import thread_budget
from fixthresh.config import (
    ALLOWED_LOG_LEVELS,
    DEFAULT_CONFIG_PATH,
    RunConfig,
    apply_overrides,
    default_config,
    load_config,
    read_json_file,
)
from fixthresh.detector import load_checkpoint, make_batch, save_checkpoint, score_dataset, score_images, train
from fixthresh.errors import ConfigError, FixthreshError, ValidationError
from fixthresh.imaging import DatasetEntry, list_dataset, load_image, load_unit_images, save_image, to_u8, to_unit
from fixthresh.pipeline import evaluate_groups, reproduce_spectrum, stage, write_reports
from fixthresh.protocol import EvaluationMode, RobustnessTable
from fixthresh.reporting import plot_robustness, read_robustness_csv, run_id, write_summary_csv
from fixthresh.scorefile import (
    VALIDATION_TOKEN,
    ScoreGroup,
    ScoreRecord,
    count_by_condition,
    group_scores,
    read_scores,
    records_from_score_set,
    write_scores,
)
from fixthresh.stats import aggregate_tables
from fixthresh.synthgen import DEFAULT_SPLIT_FRACTIONS, SPLIT_NAMES, CueSpec, preset, split, write_dataset
from fixthresh.transforms import ConditionGrid, apply_condition_batch, default_grid

logger = logging.getLogger("fixthresh")

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)


def parse_grid(value: str) -> ConditionGrid:
    """'default' or a comma-separated token list such as 'clean,jpeg:60,blur:3'."""
    if value == "default":
        return default_grid()
    return ConditionGrid.from_tokens([t for t in value.split(",") if t.strip()])


def _resolve_config(path: Optional[Path], overrides: Dict[str, Any]) -> RunConfig:
    config = load_config(path) if path is not None else default_config()
    return apply_overrides(config, overrides)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _splits_of(entries: List[DatasetEntry], seed: int) -> Dict[str, List[DatasetEntry]]:
    """Manifest splits if every entry has one, else a stratified split of the listing."""
    if entries and all(e.split for e in entries):
        return {name: [e for e in entries if e.split == name] for name in SPLIT_NAMES}
    parts = split(entries, DEFAULT_SPLIT_FRACTIONS, seed)
    return dict(zip(SPLIT_NAMES, parts))


# -------------------- Commands --------------------


def read_cue_spec(path: Path) -> CueSpec:
    raw = read_json_file(path)
    try:
        return CueSpec(**raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: not a CueSpec: {exc}") from exc


def cmd_gen(spec: CueSpec, out_dir: Path) -> Path:
    write_dataset(spec, out_dir)
    return out_dir / "manifest.csv"


def cmd_degrade(in_dir: Path, out_dir: Path, grid: ConditionGrid) -> List[Path]:
    """
    Write one subdirectory per condition (token with ':' as '_'), same relative
    paths as the input with a .png suffix, plus a manifest.csv each.
    """
    root = in_dir
    entries = list_dataset(root)
    images = [to_unit(load_image(e.path)) for e in entries]
    written = []
    for cond in grid:
        cond_dir = out_dir / cond.token.replace(":", "_")
        degraded = apply_condition_batch(images, cond)
        rows = []
        for entry, img in zip(entries, degraded):
            rel = entry.path.relative_to(root).with_suffix(".png")
            save_image(to_u8(img), cond_dir / rel)
            rows.append([rel.as_posix(), entry.label, entry.split or ""])
        with (cond_dir / "manifest.csv").open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["path", "label", "split"])
            writer.writerows(rows)
        logger.info("Degraded %d images under %s", len(entries), cond.token)
        written.append(cond_dir)
    return written


def cmd_train(config: RunConfig, data_dir: Path, ckpt: Path, arch_name: Optional[str], seed: int) -> Path:
    arch = next((a for a in config.architectures if arch_name in (None, a.name)), None)
    if arch is None:
        raise ConfigError(f"Unknown architecture {arch_name!r}; config has {[a.name for a in config.architectures]}")
    hybrid = config.hybrid_config(arch)
    parts = _splits_of(list_dataset(data_dir), seed)

    batches = []
    for name in ("train", "val"):
        entries = parts[name]
        batches.append(make_batch(
            load_unit_images(entries, config.input_size),
            [e.label for e in entries], [e.item_id for e in entries], hybrid,
        ))
    with stage("train"):
        result = train(batches[0], batches[1], hybrid, config.train_config(seed))
    save_checkpoint(result.model, ckpt, extra={"arch": arch.name, "seed": seed, "best_epoch": result.best_epoch})
    return ckpt


def cmd_score(ckpt: Path, data_dir: Path, grid: ConditionGrid, out: Path, model_name: str, seed: int) -> Path:
    """Clean validation scores (as clean_val) plus test scores under every grid condition."""
    model = load_checkpoint(ckpt)
    size = model.config.input_size
    entries = list_dataset(data_dir)
    records: List[ScoreRecord] = []

    if all(e.split for e in entries):
        val = [e for e in entries if e.split == "val"]
        test = [e for e in entries if e.split == "test"]
        with stage("score"):
            val_scores = score_images(model, load_unit_images(val, size),
                                      [e.label for e in val], [e.item_id for e in val])
        records.extend(records_from_score_set(val_scores, VALIDATION_TOKEN, model_name, seed))
    else:
        test = entries

    with stage("score"):
        by_condition = score_dataset(
            model, load_unit_images(test, size), [e.label for e in test], [e.item_id for e in test], grid
        )
    for cond, scores in by_condition.items():
        records.extend(records_from_score_set(scores, cond.token, model_name, seed))
    write_scores(out, records)
    return out


def cmd_ingest_scores(path: Path) -> List[ScoreGroup]:
    """Validated, condition-grouped ScoreSets of a third-party score file."""
    records = read_scores(path)
    for condition, count in sorted(count_by_condition(records).items()):
        logger.info("%s: %d rows", condition, count)
    return group_scores(records)


def cmd_eval(scores: Path, mode: str, out_dir: Path) -> List[Path]:
    groups = cmd_ingest_scores(scores)
    result = evaluate_groups(groups, mode)
    digest = run_id({"scores": _sha256(scores), "mode": mode, "version": __version__})
    return write_reports(out_dir, result, digest)


def _fixed_tables_per_run(runs: Sequence[Path]) -> List[List[RobustnessTable]]:
    """
    Fixed-threshold tables of each robustness.csv, keyed by seed.

    Runs evaluated from seed-less score files all carry seed 0; when single-table
    runs collide like that, each run is keyed by its position in `runs` instead.
    """
    per_run = [[t for t in read_robustness_csv(path) if t.mode is EvaluationMode.FIXED] for path in runs]
    digests = [_sha256(path) for path in runs]
    if len(set(digests)) != len(digests):
        raise ValidationError("the same robustness.csv was passed to aggregate more than once")

    seeds = [t.seed for tables in per_run for t in tables]
    if len(set(seeds)) == len(seeds):
        return per_run
    if any(len(tables) != 1 for tables in per_run):
        raise ValidationError(f"seeds repeat across runs ({seeds}) and a run holds several seeds; rerun eval with a seed column")
    logger.warning("Runs repeat seeds %s; keying them by position 0..%d instead", seeds, len(runs) - 1)
    return [[replace(tables[0], seed=i)] for i, tables in enumerate(per_run)]


def cmd_aggregate(runs: Sequence[Path], out: Path) -> Path:
    """Summarize fixed-threshold tables of several robustness.csv files across seeds."""
    tables = [t for run_tables in _fixed_tables_per_run(runs) for t in run_tables]
    with stage("aggregate"):
        summary = aggregate_tables(tables)
    write_summary_csv(out, summary, run_id({"runs": [_sha256(p) for p in runs]}))
    return out


def cmd_plot(report_dir: Path) -> List[Path]:
    return plot_robustness(report_dir)


def cmd_reproduce_spectrum(config: RunConfig, out_dir: Optional[Path] = None) -> Path:
    return reproduce_spectrum(config, out_dir)


# -------------------- Argument parsing --------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fixthresh", description="Fixed-threshold robustness evaluation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", type=str.upper, choices=sorted(ALLOWED_LOG_LEVELS), default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cue dataset")
    p.add_argument("--spec", type=Path, help="JSON file with CueSpec fields")
    p.add_argument("--preset", default="photo", help="domain preset when --spec is not given")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("degrade", help="apply the degradation grid to a dataset")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--grid", default="default")

    p = sub.add_parser("train", help="train one detector")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--arch")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("score", help="score a dataset under the grid")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--grid", default="default")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", default="model")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="fixed and/or retuned evaluation of a score file")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--mode", choices=["fixed", "retuned", "both"], default="both")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("aggregate", help="multi-seed summary of robustness.csv files")
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("plot", help="SVG plots of a report directory")
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("ingest", help="validate a score file and count rows per condition")
    p.add_argument("--scores", type=Path, required=True)

    p = sub.add_parser("reproduce-spectrum", help="desk-scale forensic-semantic spectrum run")
    p.add_argument("--config", type=Path, default=None, help=f"run config (default: {DEFAULT_CONFIG_PATH.name} defaults)")
    p.add_argument("--out", type=Path)
    p.add_argument("--seeds", type=int, nargs="+")
    return parser


def _dispatch(args: argparse.Namespace) -> List[Path]:
    if args.command == "gen":
        spec = read_cue_spec(args.spec) if args.spec is not None else preset(args.preset)
        overrides = {k: v for k, v in {"n_per_class": args.n_per_class, "seed": args.seed}.items() if v is not None}
        spec = replace(spec, **overrides)
        return [cmd_gen(spec, args.out)]
    if args.command == "degrade":
        return cmd_degrade(args.in_dir, args.out, parse_grid(args.grid))
    if args.command == "train":
        return [cmd_train(_resolve_config(args.config, {}), args.data, args.out, args.arch, args.seed)]
    if args.command == "score":
        return [cmd_score(args.ckpt, args.data, parse_grid(args.grid), args.out, args.model, args.seed)]
    if args.command == "eval":
        return cmd_eval(args.scores, args.mode, args.out)
    if args.command == "aggregate":
        return [cmd_aggregate(args.runs, args.out)]
    if args.command == "plot":
        return cmd_plot(args.report)
    if args.command == "ingest":
        groups = cmd_ingest_scores(args.scores)
        for g in groups:
            print(f"{g.model}\tseed={g.seed}\tconditions={len(g.by_condition)}\tvalidation={g.validation is not None}")
        return []
    if args.command == "reproduce-spectrum":
        config = _resolve_config(args.config, {"seeds": args.seeds, "out_dir": str(args.out) if args.out else None})
        if args.log_level is None:
            configure_logging(config.log_level)
        return [cmd_reproduce_spectrum(config)]
    raise ConfigError(f"Unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point. Exit codes: 0 success, 2 validation error, 3 pipeline failure.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")
    try:
        torch.set_num_threads(thread_budget())
        for path in _dispatch(args):
            print(path)
    except ValidationError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_VALIDATION
    except FixthreshError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
