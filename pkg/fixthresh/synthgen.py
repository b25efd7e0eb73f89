from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from fixthresh.batching import run_in_batches
from fixthresh.errors import ContractError, GenerationError
from fixthresh.imaging import DatasetEntry, ImageTensor, ImageU8, RangeTag, save_image, to_u8, to_unit

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (2 / 3, 1 / 6, 1 / 6)
LABEL_DIRS = {0: "real", 1: "ai"}
LUMA = np.array([0.299, 0.587, 0.114])

# scene layout, in unit image coordinates
_Y_RANGE = (0.15, 0.85)
_BLOB_COUNT = (3, 6)


@dataclass(frozen=True)
class CueSpec:
    """
    Recipe for a two-class synthetic dataset.

    forensic_strength is the amplitude of a periodic high-frequency grid added
    to AI images; semantic_strength pulls their blobs toward the top of the
    frame and adds blobs.
    """
    forensic_strength: float = 0.02
    forensic_period: int = 2
    semantic_strength: float = 0.5
    image_size: int = 64
    n_per_class: int = 1500
    seed: int = 0
    name: str = "photo"

    def __post_init__(self) -> None:
        if not 0.0 <= self.forensic_strength <= 1.0 or not 0.0 <= self.semantic_strength <= 1.0:
            raise ContractError("cue strengths must be in [0, 1]")
        if self.forensic_strength == 0.0 and self.semantic_strength == 0.0:
            raise ContractError("at least one cue strength must be > 0")
        if self.n_per_class < 1:
            raise ContractError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.forensic_period < 2 or self.image_size % self.forensic_period != 0:
            raise ContractError(
                f"forensic_period must be >= 2 and divide image_size {self.image_size}, got {self.forensic_period}"
            )
        if self.image_size < 8:
            raise ContractError(f"image_size must be >= 8, got {self.image_size}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


DOMAIN_PRESETS: Dict[str, CueSpec] = {
    # forensic-dominant: strong fragile grid, mild layout bias
    "photo": CueSpec(forensic_strength=0.02, semantic_strength=0.5, name="photo"),
    # semantic-dominant: weak grid, strong layout bias
    "art": CueSpec(forensic_strength=0.01, semantic_strength=1.0, name="art"),
}


def preset(name: str, **overrides: Any) -> CueSpec:
    if name not in DOMAIN_PRESETS:
        raise ContractError(f"Unknown domain preset {name!r}; expected one of {sorted(DOMAIN_PRESETS)}")
    return replace(DOMAIN_PRESETS[name], **overrides)


@dataclass(frozen=True)
class SyntheticItem:
    item_id: str
    label: int
    image: ImageU8


@dataclass(frozen=True)
class CueStats:
    band_energy: float
    layout_centroid: float


# -------------------- Rendering --------------------


def _coords(size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def forensic_grid(size: int, amplitude: float, period: int) -> np.ndarray:
    """a * cos(2 pi x / p) * cos(2 pi y / p); period 2 is a +-a checkerboard."""
    yy, xx = _coords(size)
    return amplitude * np.cos(2 * np.pi * xx / period) * np.cos(2 * np.pi * yy / period)


def render_scene(rng: np.random.Generator, size: int, layout_shift: float = 0.0, extra_blobs: int = 0) -> np.ndarray:
    """
    Smooth gradient background with soft-edged bright discs, unit range, [H, W, 3].

    layout_shift in [0, 1] compresses blob centres toward the top edge.
    """
    yy, xx = _coords(size)
    yy /= size - 1
    xx /= size - 1

    angle = rng.uniform(0.0, 2 * np.pi)
    c0 = rng.uniform(0.10, 0.30, 3)
    c1 = rng.uniform(0.20, 0.40, 3)
    t = 0.5 + 0.5 * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5))
    img = c0 + (c1 - c0) * t[..., None]

    edge = 1.5 / size
    count = int(rng.integers(_BLOB_COUNT[0], _BLOB_COUNT[1] + 1)) + extra_blobs
    lo, hi = _Y_RANGE
    for _ in range(count):
        cy = rng.uniform(lo, hi)
        cy = lo + (cy - lo) * (1.0 - 0.5 * layout_shift)
        cx = rng.uniform(lo, hi)
        radius = rng.uniform(0.06, 0.14)
        color = rng.uniform(0.55, 0.95, 3)
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        alpha = (0.5 * (1.0 - np.tanh((dist - radius) / edge)))[..., None]
        img = img * (1.0 - alpha) + color * alpha
    return img


def _render_item(spec: CueSpec, label: int, index: int) -> SyntheticItem:
    # counter-based stream: one independent generator per (seed, label, index)
    rng = np.random.default_rng([spec.seed, label, index])
    if label == 1:
        img = render_scene(
            rng,
            spec.image_size,
            layout_shift=spec.semantic_strength,
            extra_blobs=int(math.floor(2 * spec.semantic_strength + 0.5)),
        )
        img = img + forensic_grid(spec.image_size, spec.forensic_strength, spec.forensic_period)[..., None]
    else:
        img = render_scene(rng, spec.image_size)

    unit = ImageTensor.from_array(np.clip(img, 0.0, 1.0), RangeTag.UNIT)
    return SyntheticItem(item_id=f"{LABEL_DIRS[label]}_{index:05d}", label=label, image=to_u8(unit))


def generate(spec: CueSpec, batch_size: Optional[int] = None) -> List[SyntheticItem]:
    """
    Render n_per_class real and n_per_class AI images, real first.

    Every image draws from its own seeded stream, so the result does not
    depend on batch_size or generation order.
    """
    jobs = [(label, index) for label in (0, 1) for index in range(spec.n_per_class)]
    logger.info("Generating %d %s images (%dx%d)", len(jobs), spec.name, spec.image_size, spec.image_size)
    return run_in_batches(jobs, lambda job: _render_item(spec, *job), batch_size)


# -------------------- Cue statistics --------------------


def _luminance(img: ImageTensor) -> np.ndarray:
    return img.data @ LUMA


def band_energy(img: ImageTensor, period: int) -> float:
    """Luminance spectral energy at the grid frequencies (+-N/p, +-N/p), per pixel."""
    luma = _luminance(img)
    h, w = luma.shape
    spectrum = np.abs(np.fft.fft2(luma)) ** 2
    ky = {(h // period) % h, (-h // period) % h}
    kx = {(w // period) % w, (-w // period) % w}
    return float(sum(spectrum[y, x] for y in ky for x in kx) / (h * w))


def layout_centroid(img: ImageTensor) -> float:
    """Vertical centroid in [0, 1] of luminance above the image median (the blobs)."""
    luma = _luminance(img)
    weight = np.maximum(luma - np.median(luma), 0.0)
    total = weight.sum()
    if total <= 0:
        return 0.5
    rows = np.arange(luma.shape[0], dtype=np.float64) / max(luma.shape[0] - 1, 1)
    return float((weight.sum(axis=1) * rows).sum() / total)


def cue_statistics(img: ImageTensor, spec: CueSpec) -> CueStats:
    return CueStats(band_energy=band_energy(img, spec.forensic_period), layout_centroid=layout_centroid(img))


def separability(a: Sequence[float], b: Sequence[float]) -> float:
    """|mean(a) - mean(b)| / sqrt((var(a) + var(b)) / 2), sample variances."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if len(a_arr) < 2 or len(b_arr) < 2:
        raise GenerationError("separability needs at least 2 values per class")
    gap = abs(a_arr.mean() - b_arr.mean())
    pooled = math.sqrt((a_arr.var(ddof=1) + b_arr.var(ddof=1)) / 2.0)
    if pooled == 0.0:
        return 0.0 if gap == 0.0 else math.inf
    return gap / pooled


# -------------------- Splits --------------------

L = TypeVar("L")


def split(items: Sequence[L], fractions: Sequence[float], seed: int) -> List[List[L]]:
    """
    Label-stratified, seed-deterministic partition of items (each with a .label).

    Per class, split i >= 1 gets round(n * f_i) items and the first split the
    remainder. Items keep their input order inside each split.

    Raises:
        GenerationError: if fractions do not sum to 1 or any split ends up empty.
    """
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise GenerationError(f"fractions must be positive and sum to 1, got {tuple(fractions)}")

    assigned: List[List[int]] = [[] for _ in fractions]
    for label in sorted({item.label for item in items}):
        indices = [i for i, item in enumerate(items) if item.label == label]
        order = np.random.default_rng([seed, label]).permutation(len(indices))
        counts = [int(math.floor(len(indices) * f + 0.5)) for f in fractions[1:]]
        counts.insert(0, len(indices) - sum(counts))
        if counts[0] < 0:
            raise GenerationError(f"class {label} has too few items for fractions {tuple(fractions)}")
        start = 0
        for part, count in zip(assigned, counts):
            part.extend(indices[j] for j in order[start : start + count])
            start += count

    parts = [[items[i] for i in sorted(part)] for part in assigned]
    for number, part in enumerate(parts):
        if not part:
            raise GenerationError(f"split {number} is empty")
    return parts


# -------------------- Dataset on disk --------------------


def write_dataset(
    spec: CueSpec,
    out_dir: Path,
    fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS,
    batch_size: Optional[int] = None,
) -> List[DatasetEntry]:
    """
    Generate, split and write a dataset:
      out_dir/real/*.png, out_dir/ai/*.png,
      out_dir/manifest.csv (path,label,split), out_dir/cues.csv.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise GenerationError(f"write_dataset needs {len(SPLIT_NAMES)} split fractions")

    items = generate(spec, batch_size)
    split_of: Dict[str, str] = {}
    for name, part in zip(SPLIT_NAMES, split(items, fractions, spec.seed)):
        for item in part:
            split_of[item.item_id] = name

    entries: List[DatasetEntry] = []
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "cues.csv").open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "label", "split", "band_energy", "layout_centroid"])
        for item in items:
            rel = Path(LABEL_DIRS[item.label]) / f"{item.item_id}.png"
            save_image(item.image, out_dir / rel)
            stats = cue_statistics(to_unit(item.image), spec)
            writer.writerow(
                [item.item_id, item.label, split_of[item.item_id],
                 f"{stats.band_energy:.9g}", f"{stats.layout_centroid:.9g}"]
            )
            entries.append(DatasetEntry(path=out_dir / rel, label=item.label, split=split_of[item.item_id]))

    with (out_dir / "manifest.csv").open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for entry in entries:
            writer.writerow([entry.path.relative_to(out_dir).as_posix(), entry.label, entry.split])

    logger.info("Wrote %d images to %s", len(entries), out_dir)
    return entries
