from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from fixthresh.errors import ContractError, ImageFormatError, ImageIOError

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = {"PNG", "JPEG"}
LABELS = {"real": 0, "ai": 1}


class RangeTag(str, Enum):
    """Declared value range of an ImageTensor."""
    UNIT = "unit"
    NORMALIZED = "normalized"


@dataclass(frozen=True, eq=False)
class ImageU8:
    """Raw 8-bit RGB image, shape (height, width, 3), row-major, channel-interleaved."""
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ContractError(f"image dims must be >= 1, got {self.height}x{self.width}")
        if self.data.dtype != np.uint8 or self.data.shape != (self.height, self.width, 3):
            raise ContractError(
                f"expected uint8 data of shape {(self.height, self.width, 3)}, "
                f"got {self.data.dtype} {self.data.shape}"
            )

    @classmethod
    def from_array(cls, data: np.ndarray) -> "ImageU8":
        return cls(height=data.shape[0], width=data.shape[1], data=data)


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Real-valued H x W x 3 image in a declared range."""
    height: int
    width: int
    data: np.ndarray
    range_tag: RangeTag = RangeTag.UNIT

    def __post_init__(self) -> None:
        if self.data.shape != (self.height, self.width, 3):
            raise ContractError(
                f"expected data of shape {(self.height, self.width, 3)}, got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ContractError("image tensor contains non-finite values")
        if self.range_tag is RangeTag.UNIT and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ContractError("unit-range image has values outside [0, 1]")

    @property
    def channels(self) -> int:
        return 3

    @classmethod
    def from_array(cls, data: np.ndarray, range_tag: RangeTag = RangeTag.UNIT) -> "ImageTensor":
        data = np.asarray(data, dtype=np.float64)
        return cls(height=data.shape[0], width=data.shape[1], data=data, range_tag=range_tag)


@dataclass(frozen=True)
class NormStats:
    """Per-channel normalization statistics."""
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ContractError("NormStats needs exactly 3 mean and 3 std values")
        if any(s <= 0 for s in self.std):
            raise ContractError(f"std components must be > 0, got {self.std}")


IMAGENET_STATS = NormStats(mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


@dataclass(frozen=True)
class DatasetEntry:
    """One labelled image file of a dataset (label 0 = real, 1 = ai)."""
    path: Path
    label: int
    split: Optional[str] = None

    @property
    def item_id(self) -> str:
        return self.path.stem


# -------------------- File I/O --------------------


def load_image(path: Path) -> ImageU8:
    """
    Decode a PNG or JPEG file into an RGB ImageU8.

    Grayscale (and palette) inputs are promoted to RGB by channel replication.

    Raises:
        ImageIOError: if the file does not exist or cannot be read.
        ImageFormatError: if the file is not a PNG or JPEG.
    """
    try:
        with Image.open(path) as img:
            if img.format not in SUPPORTED_FORMATS:
                raise ImageFormatError(f"Unsupported image format {img.format!r}: {path}")
            rgb = img.convert("RGB")
            data = np.asarray(rgb, dtype=np.uint8).copy()
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"Not a PNG or JPEG image: {path}") from exc
    except OSError as exc:
        raise ImageIOError(f"Cannot read image {path}: {exc}") from exc

    return ImageU8.from_array(data)


def save_image(img: ImageU8, path: Path) -> None:
    """Write an ImageU8 as a PNG without any metadata chunks."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(img.data).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"Cannot write image {path}: {exc}") from exc


def list_dataset(root: Path) -> List[DatasetEntry]:
    """
    List the labelled images of a dataset directory.

    Two layouts are accepted:
      - root/manifest.csv with columns path,label[,split] (paths relative to root)
      - root/real/*.png|jpg and root/ai/*.png|jpg
    """
    manifest = root / "manifest.csv"
    if manifest.exists():
        return _read_manifest(manifest)

    entries: List[DatasetEntry] = []
    for dirname, label in LABELS.items():
        folder = root / dirname
        if not folder.is_dir():
            continue
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() in {".png", ".jpg", ".jpeg"}:
                entries.append(DatasetEntry(path=path, label=label))

    if not entries:
        raise ImageIOError(f"No manifest.csv and no real/ or ai/ images under {root}")
    return entries


def _read_manifest(manifest: Path) -> List[DatasetEntry]:
    entries: List[DatasetEntry] = []
    with manifest.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ContractError(f"{manifest} must have a header with path,label columns")
        for row_number, row in enumerate(reader, start=1):
            label = row["label"].strip()
            if label not in {"0", "1"}:
                raise ContractError(f"{manifest} row {row_number}: label must be 0 or 1, got {label!r}")
            split = (row.get("split") or "").strip() or None
            entries.append(
                DatasetEntry(path=manifest.parent / row["path"], label=int(label), split=split)
            )
    return entries


# -------------------- Value conversions --------------------


def to_unit(img: ImageU8) -> ImageTensor:
    """Divide every sample by 255."""
    return ImageTensor.from_array(img.data.astype(np.float64) / 255.0, RangeTag.UNIT)


def to_u8(img: ImageTensor) -> ImageU8:
    """Quantize a unit-range tensor to 8 bits (round half up, clipped)."""
    if img.range_tag is not RangeTag.UNIT:
        raise ContractError("to_u8 expects a unit-range image")
    quantized = np.floor(np.clip(img.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return ImageU8.from_array(quantized)


def normalize(img: ImageTensor, stats: NormStats = IMAGENET_STATS) -> ImageTensor:
    """out[c] = (in[c] - mean[c]) / std[c]."""
    if img.range_tag is not RangeTag.UNIT:
        raise ContractError(f"normalize expects a unit-range image, got {img.range_tag.value}")
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    return ImageTensor.from_array((img.data - mean) / std, RangeTag.NORMALIZED)


def denormalize(img: ImageTensor, stats: NormStats = IMAGENET_STATS) -> ImageTensor:
    """Inverse of normalize."""
    if img.range_tag is not RangeTag.NORMALIZED:
        raise ContractError(f"denormalize expects a normalized image, got {img.range_tag.value}")
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    return ImageTensor.from_array(np.clip(img.data * std + mean, 0.0, 1.0), RangeTag.UNIT)


# -------------------- Bicubic resize --------------------


def cubic_weight(x: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic convolution kernel (a = -0.5)."""
    ax = np.abs(x)
    inner = (x ** 2) * (1.5 * ax - 2.5) + 1.0
    outer = (x ** 2) * (-0.5 * ax + 2.5) - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax <= 2.0, outer, 0.0))


def resample_matrix(in_size: int, out_size: int) -> np.ndarray:
    """
    Build the (out_size, in_size) bicubic resampling matrix for one axis.

    Output sample i sits at input coordinate (i + 0.5) / scale - 0.5. When
    shrinking, the kernel support is widened by 1 / scale (antialiasing).
    Taps outside the image are clamped to the nearest edge sample and each
    row is normalized to sum 1.
    """
    scale = out_size / in_size
    support_scale = min(scale, 1.0)
    radius = 2.0 / support_scale

    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        taps = np.arange(math.floor(center - radius), math.ceil(center + radius) + 1)
        weights = cubic_weight((taps - center) * support_scale)
        np.add.at(matrix[i], np.clip(taps, 0, in_size - 1), weights)
        matrix[i] /= weights.sum()
    return matrix


def resize_bicubic(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """
    Resize with the separable Catmull-Rom kernel.

    The same kernel is used for every image; unit-range outputs are clipped
    back to [0, 1] after cubic overshoot.
    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output dims must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == (img.height, img.width):
        return ImageTensor.from_array(img.data.copy(), img.range_tag)

    rows = resample_matrix(img.height, out_h)
    cols = resample_matrix(img.width, out_w)
    out = np.einsum("oh,hwc->owc", rows, img.data)
    out = np.einsum("pw,owc->opc", cols, out)
    if img.range_tag is RangeTag.UNIT:
        out = np.clip(out, 0.0, 1.0)
    return ImageTensor.from_array(out, img.range_tag)


def preprocess(img: ImageU8, size: int, stats: NormStats = IMAGENET_STATS) -> ImageTensor:
    """Clean-input path: to_unit -> bicubic resize to size x size -> normalize."""
    return normalize(resize_bicubic(to_unit(img), size, size), stats)


def load_unit_images(entries: Sequence[DatasetEntry], size: int) -> List[ImageTensor]:
    """Load and resize dataset images to size x size, unit range."""
    images: List[ImageTensor] = []
    for entry in entries:
        logger.debug("Loading %s", entry.path)
        images.append(resize_bicubic(to_unit(load_image(entry.path)), size, size))
    return images
