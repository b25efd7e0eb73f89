from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fixthresh.errors import ContractError, ImageFormatError, ImageIOError
from fixthresh.imaging import (
    IMAGENET_STATS,
    ImageTensor,
    ImageU8,
    NormStats,
    RangeTag,
    denormalize,
    list_dataset,
    load_image,
    normalize,
    preprocess,
    resize_bicubic,
    save_image,
    to_u8,
    to_unit,
)


def _catmull_rom(x: float) -> float:
    ax = abs(x)
    if ax <= 1:
        return 1.5 * ax ** 3 - 2.5 * ax ** 2 + 1
    if ax <= 2:
        return -0.5 * ax ** 3 + 2.5 * ax ** 2 - 4 * ax + 2
    return 0.0


def _upscale_1d_oracle(values: np.ndarray, out_size: int) -> np.ndarray:
    """Direct-formula Catmull-Rom upscaling with edge clamping."""
    n = len(values)
    scale = out_size / n
    out = np.zeros(out_size)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        base = math.floor(center)
        acc = 0.0
        for k in range(base - 1, base + 3):
            acc += _catmull_rom(k - center) * values[min(max(k, 0), n - 1)]
        out[i] = acc
    return out


def test_load_image_white_png(tmp_path: Path) -> None:
    """A 1x1 white PNG decodes to a single [255, 255, 255] pixel."""
    path = tmp_path / "white.png"
    Image.new("RGB", (1, 1), (255, 255, 255)).save(path)
    img = load_image(path)
    assert (img.height, img.width) == (1, 1)
    assert img.data.tolist() == [[[255, 255, 255]]]


def test_load_image_replicates_grayscale(tmp_path: Path) -> None:
    """Grayscale value 10 appears in all three channels."""
    path = tmp_path / "gray.png"
    Image.new("L", (3, 2), 10).save(path)
    img = load_image(path)
    assert img.data.shape == (2, 3, 3)
    assert np.all(img.data == 10)


def test_load_image_jpeg_matches_reference_decoder(tmp_path: Path) -> None:
    """A 64x64 JPEG decodes byte-exactly like a direct Pillow decode."""
    rng = np.random.default_rng(0)
    path = tmp_path / "fixture.jpg"
    Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)).save(path, format="JPEG", quality=80)
    with Image.open(path) as ref:
        expected = np.asarray(ref.convert("RGB"))
    assert np.array_equal(load_image(path).data, expected)


def test_load_image_missing_file(tmp_path: Path) -> None:
    """A missing file is an I/O error."""
    with pytest.raises(ImageIOError):
        load_image(tmp_path / "nope.png")


def test_load_image_rejects_other_formats(tmp_path: Path) -> None:
    """BMP and non-image files are format errors."""
    bmp = tmp_path / "img.bmp"
    Image.new("RGB", (2, 2)).save(bmp, format="BMP")
    text = tmp_path / "notes.png"
    text.write_text("not an image")
    with pytest.raises(ImageFormatError):
        load_image(bmp)
    with pytest.raises(ImageFormatError):
        load_image(text)


@pytest.mark.parametrize("value, expected", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_to_unit(value: int, expected: float) -> None:
    img = ImageU8.from_array(np.full((1, 1, 3), value, dtype=np.uint8))
    assert to_unit(img).data[0, 0, 0] == pytest.approx(expected)


def test_to_u8_inverts_to_unit() -> None:
    """Every 8-bit value survives to_unit -> to_u8."""
    data = np.arange(256, dtype=np.uint8).repeat(3).reshape(16, 16, 3)
    img = ImageU8.from_array(data)
    assert np.array_equal(to_u8(to_unit(img)).data, data)


def test_normalize_imagenet_constants() -> None:
    """0.485 in channel 0 maps to 0, and 1.0 maps to (1 - 0.485) / 0.229."""
    data = np.zeros((1, 2, 3))
    data[0, 0, 0] = 0.485
    data[0, 1, 0] = 1.0
    out = normalize(ImageTensor.from_array(data))
    assert out.range_tag is RangeTag.NORMALIZED
    assert out.data[0, 0, 0] == pytest.approx(0.0, abs=1e-12)
    assert out.data[0, 1, 0] == pytest.approx((1.0 - 0.485) / 0.229)
    assert out.data[0, 1, 0] == pytest.approx(2.2489, abs=1e-4)


def test_normalize_round_trip() -> None:
    """denormalize(normalize(x)) == x within 1e-6."""
    rng = np.random.default_rng(1)
    img = ImageTensor.from_array(rng.random((9, 7, 3)))
    back = denormalize(normalize(img))
    assert np.max(np.abs(back.data - img.data)) < 1e-6


def test_normalize_requires_unit_range() -> None:
    img = ImageTensor.from_array(np.zeros((2, 2, 3)), RangeTag.NORMALIZED)
    with pytest.raises(ContractError):
        normalize(img)


def test_norm_stats_rejects_zero_std() -> None:
    with pytest.raises(ContractError):
        NormStats(mean=(0.0, 0.0, 0.0), std=(1.0, 0.0, 1.0))


def test_resize_same_dims_is_identity() -> None:
    rng = np.random.default_rng(2)
    img = ImageTensor.from_array(rng.random((5, 6, 3)))
    out = resize_bicubic(img, 5, 6)
    assert np.max(np.abs(out.data - img.data)) < 1e-6


@pytest.mark.parametrize("out_h, out_w", [(1, 1), (3, 11), (16, 16), (40, 7)])
def test_resize_preserves_constant(out_h: int, out_w: int) -> None:
    """Normalized kernel rows keep a constant image constant at any size."""
    img = ImageTensor.from_array(np.full((9, 13, 3), 0.37))
    out = resize_bicubic(img, out_h, out_w)
    assert out.data.shape == (out_h, out_w, 3)
    assert np.max(np.abs(out.data - 0.37)) < 1e-6


def test_resize_matches_direct_catmull_rom_upscale() -> None:
    """4x4 ramp upscaled to 8x8 matches the separable closed-form kernel within 1e-4."""
    ramp = np.add.outer(np.arange(4.0), np.arange(4.0)) / 6.0
    img = ImageTensor.from_array(np.repeat(ramp[..., None], 3, axis=2))

    rows = np.stack([_upscale_1d_oracle(ramp[:, j], 8) for j in range(4)], axis=1)
    expected = np.stack([_upscale_1d_oracle(rows[i, :], 8) for i in range(8)], axis=0)

    out = resize_bicubic(img, 8, 8)
    assert np.max(np.abs(out.data[..., 0] - np.clip(expected, 0, 1))) < 1e-4


def test_preprocess_is_class_agnostic(tmp_path: Path) -> None:
    """Byte-identical files give bit-identical model inputs whatever folder (label) they sit in."""
    rng = np.random.default_rng(3)
    data = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
    for folder in ("real", "ai"):
        save_image(ImageU8.from_array(data), tmp_path / folder / "x.png")

    entries = list_dataset(tmp_path)
    assert sorted(e.label for e in entries) == [0, 1]
    a, b = (preprocess(load_image(e.path), 16, IMAGENET_STATS) for e in entries)
    assert np.array_equal(a.data, b.data)


def test_list_dataset_reads_manifest(tmp_path: Path) -> None:
    save_image(ImageU8.from_array(np.zeros((2, 2, 3), dtype=np.uint8)), tmp_path / "imgs" / "a.png")
    (tmp_path / "manifest.csv").write_text("path,label,split\nimgs/a.png,1,test\n", encoding="utf-8")
    [entry] = list_dataset(tmp_path)
    assert entry.label == 1
    assert entry.split == "test"
    assert entry.item_id == "a"


def test_list_dataset_rejects_bad_label(tmp_path: Path) -> None:
    (tmp_path / "manifest.csv").write_text("path,label\na.png,2\n", encoding="utf-8")
    with pytest.raises(ContractError, match="row 1"):
        list_dataset(tmp_path)


def test_save_image_writes_no_metadata(tmp_path: Path) -> None:
    """Written PNGs carry no text chunks (no cue can leak through metadata)."""
    path = tmp_path / "x.png"
    save_image(ImageU8.from_array(np.full((4, 4, 3), 7, dtype=np.uint8)), path)
    with Image.open(io.BytesIO(path.read_bytes())) as img:
        assert img.info.get("dpi") is None
        assert not getattr(img, "text", {})
