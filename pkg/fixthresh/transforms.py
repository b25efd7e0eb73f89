from __future__ import annotations

import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from fixthresh.batching import run_in_batches
from fixthresh.errors import ContractError, TransformError
from fixthresh.imaging import ImageTensor, ImageU8, RangeTag, resize_bicubic, to_u8, to_unit

DEFAULT_CUTOFF_FRAC = 0.06
# libjpeg-style encoders switch to full chroma resolution at high quality
FULL_CHROMA_MIN_QUALITY = 90


class ConditionKind(str, Enum):
    CLEAN = "clean"
    JPEG = "jpeg"
    BLUR = "blur"
    DOWNSCALE = "downscale"


@dataclass(frozen=True)
class Condition:
    """
    One cell of the degradation grid.

    parameter is the JPEG quality, the blur sigma in pixels or the downscale
    factor; it is None for clean.
    """
    kind: ConditionKind
    parameter: Optional[float] = None

    def __post_init__(self) -> None:
        kind, p = self.kind, self.parameter
        if kind is ConditionKind.CLEAN:
            if p is not None:
                raise ContractError("clean condition takes no parameter")
        elif p is None:
            raise ContractError(f"{kind.value} condition needs a parameter")
        elif kind is ConditionKind.JPEG and (p != int(p) or not 1 <= p <= 100):
            raise ContractError(f"JPEG quality must be an integer in [1, 100], got {p}")
        elif kind is ConditionKind.BLUR and not p > 0:
            raise ContractError(f"blur sigma must be > 0, got {p}")
        elif kind is ConditionKind.DOWNSCALE and not 0 < p <= 1:
            raise ContractError(f"downscale factor must be in (0, 1], got {p}")

    @property
    def token(self) -> str:
        """Machine name used in CSV files and config grids, e.g. jpeg:60."""
        if self.parameter is None:
            return self.kind.value
        return f"{self.kind.value}:{_format_parameter(self.parameter)}"

    @property
    def display_name(self) -> str:
        """Human name used in Markdown tables and plots."""
        p = self.parameter
        if self.kind is ConditionKind.CLEAN:
            return "Clean"
        if self.kind is ConditionKind.JPEG:
            return f"JPEG Q{int(p)}"
        if self.kind is ConditionKind.BLUR:
            return f"Blur σ={_format_parameter(p)}"
        return f"Resize {_format_parameter(p)}×"


def _format_parameter(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:g}"


CLEAN = Condition(ConditionKind.CLEAN)


def parse_condition(token: str) -> Condition:
    """
    Parse a condition token such as 'clean', 'jpeg:60', 'blur:3' or 'downscale:0.5'.

    Raises:
        ContractError: if the token is malformed or the parameter is out of range.
    """
    name, _, raw_param = token.strip().partition(":")
    try:
        kind = ConditionKind(name.lower())
    except ValueError:
        raise ContractError(f"Unknown condition kind {name!r} in {token!r}")

    if kind is ConditionKind.CLEAN:
        if raw_param:
            raise ContractError(f"clean takes no parameter, got {token!r}")
        return CLEAN

    try:
        parameter = float(raw_param)
    except ValueError:
        raise ContractError(f"Condition parameter is not numeric in {token!r}")
    return Condition(kind, parameter)


@dataclass(frozen=True)
class ConditionGrid:
    """Ordered degradation grid; clean appears exactly once, first."""
    conditions: Tuple[Condition, ...]

    def __post_init__(self) -> None:
        if not self.conditions or self.conditions[0] != CLEAN:
            raise ContractError("condition grid must start with clean")
        if self.conditions.count(CLEAN) != 1:
            raise ContractError("condition grid must contain clean exactly once")
        if len(set(self.conditions)) != len(self.conditions):
            raise ContractError("condition grid contains duplicates")

    def __iter__(self) -> Iterator[Condition]:
        return iter(self.conditions)

    def __len__(self) -> int:
        return len(self.conditions)

    @property
    def tokens(self) -> List[str]:
        return [c.token for c in self.conditions]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "ConditionGrid":
        return cls(tuple(parse_condition(t) for t in tokens))


DEFAULT_GRID_TOKENS = (
    "clean",
    "jpeg:95",
    "jpeg:85",
    "jpeg:75",
    "jpeg:60",
    "blur:3",
    "blur:5",
    "blur:7",
    "downscale:0.75",
    "downscale:0.5",
)


def default_grid() -> ConditionGrid:
    return ConditionGrid.from_tokens(DEFAULT_GRID_TOKENS)


# -------------------- Degradations --------------------


def jpeg_roundtrip(img: ImageTensor, quality: int) -> ImageTensor:
    """
    Encode to baseline JPEG at the given quality and decode back.

    Chroma is subsampled 4:2:0 below quality 90 and kept 4:4:4 from 90 up.

    Raises:
        ContractError: if quality is outside [1, 100].
        TransformError: if the codec fails.
    """
    if not 1 <= quality <= 100:
        raise ContractError(f"JPEG quality must be in [1, 100], got {quality}")

    subsampling = 0 if quality >= FULL_CHROMA_MIN_QUALITY else 2
    buffer = io.BytesIO()
    try:
        Image.fromarray(to_u8(img).data).save(
            buffer, format="JPEG", quality=int(quality), subsampling=subsampling, optimize=False
        )
        buffer.seek(0)
        with Image.open(buffer) as decoded:
            data = np.asarray(decoded.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise TransformError(f"JPEG round-trip at Q{quality} failed: {exc}") from exc

    return to_unit(ImageU8.from_array(data))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps on [-ceil(3 sigma), ceil(3 sigma)], normalized to sum 1."""
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(img: ImageTensor, sigma: float) -> ImageTensor:
    """Separable Gaussian blur with edge clamping; dims unchanged."""
    if not sigma > 0:
        raise ContractError(f"blur sigma must be > 0, got {sigma}")
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.data, kernel, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="nearest")
    if img.range_tag is RangeTag.UNIT:
        out = np.clip(out, 0.0, 1.0)
    return ImageTensor.from_array(out, img.range_tag)


def downscale(img: ImageTensor, factor: float) -> ImageTensor:
    """Bicubic resize to round(H*factor) x round(W*factor), then back to H x W."""
    if not 0 < factor <= 1:
        raise ContractError(f"downscale factor must be in (0, 1], got {factor}")
    small_h = max(1, int(round(img.height * factor)))
    small_w = max(1, int(round(img.width * factor)))
    small = resize_bicubic(img, small_h, small_w)
    return resize_bicubic(small, img.height, img.width)


def centered_frequency_radius(height: int, width: int) -> np.ndarray:
    """Euclidean distance of every FFT bin from DC, in integer frequency units."""
    fy = np.fft.fftfreq(height) * height
    fx = np.fft.fftfreq(width) * width
    return np.hypot(fy[:, None], fx[None, :])


def highpass_mask(height: int, width: int, cutoff_frac: float = DEFAULT_CUTOFF_FRAC) -> np.ndarray:
    """Boolean mask of kept bins: radius >= cutoff_frac * min(H, W)."""
    if not 0 < cutoff_frac < 0.5:
        raise ContractError(f"cutoff_frac must be in (0, 0.5), got {cutoff_frac}")
    return centered_frequency_radius(height, width) >= cutoff_frac * min(height, width)


def highpass_fft(img: ImageTensor, cutoff_frac: float = DEFAULT_CUTOFF_FRAC) -> ImageTensor:
    """
    Frequency enhancement: zero every Fourier coefficient closer to DC than
    cutoff_frac * min(H, W), per channel, and return the real part.

    The output is zero-mean and no longer unit-ranged, so it is tagged normalized.
    """
    mask = highpass_mask(img.height, img.width, cutoff_frac)
    spectrum = np.fft.fft2(img.data, axes=(0, 1))
    spectrum[~mask] = 0.0
    filtered = np.fft.ifft2(spectrum, axes=(0, 1)).real
    return ImageTensor.from_array(filtered, RangeTag.NORMALIZED)


def apply_condition(img: ImageTensor, cond: Condition) -> ImageTensor:
    """Dispatch a grid condition to its degradation; clean returns the input unchanged."""
    if img.range_tag is not RangeTag.UNIT:
        raise ContractError("degradations apply to unit-range images only")

    if cond.kind is ConditionKind.CLEAN:
        return img
    if cond.kind is ConditionKind.JPEG:
        return jpeg_roundtrip(img, int(cond.parameter))
    if cond.kind is ConditionKind.BLUR:
        return gaussian_blur(img, float(cond.parameter))
    if cond.kind is ConditionKind.DOWNSCALE:
        return downscale(img, float(cond.parameter))
    raise ContractError(f"Unknown condition kind: {cond.kind!r}")


def apply_condition_batch(
    images: Sequence[ImageTensor],
    cond: Condition,
    batch_size: int | None = None,
) -> List[ImageTensor]:
    """apply_condition over many images in worker threads; output order = input order."""
    return run_in_batches(images, lambda img: apply_condition(img, cond), batch_size)
