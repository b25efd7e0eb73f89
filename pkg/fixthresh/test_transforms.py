from __future__ import annotations

import io

import numpy as np
import pytest
from PIL import Image

from fixthresh.errors import ContractError
from fixthresh.imaging import ImageTensor, RangeTag, to_u8
from fixthresh.transforms import (
    CLEAN,
    DEFAULT_GRID_TOKENS,
    Condition,
    ConditionGrid,
    ConditionKind,
    apply_condition,
    apply_condition_batch,
    default_grid,
    downscale,
    gaussian_blur,
    gaussian_kernel,
    highpass_fft,
    highpass_mask,
    jpeg_roundtrip,
    parse_condition,
)


def _unit(data: np.ndarray) -> ImageTensor:
    return ImageTensor.from_array(data.astype(np.float64), RangeTag.UNIT)


def _smooth_fixture(size: int = 64) -> ImageTensor:
    y, x = np.mgrid[0:size, 0:size] / size
    r = 0.5 + 0.4 * np.sin(2 * np.pi * x) * np.cos(np.pi * y)
    g = 0.5 + 0.3 * np.cos(3 * np.pi * x * y)
    b = 0.2 + 0.6 * x * (1 - y)
    return _unit(np.stack([r, g, b], axis=2))


def _checkerboard(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.where((yy + xx) % 2 == 0, 1.0, -1.0)


# -------------------- Conditions --------------------


@pytest.mark.parametrize(
    "token, kind, parameter",
    [
        ("clean", ConditionKind.CLEAN, None),
        ("jpeg:60", ConditionKind.JPEG, 60.0),
        ("blur:3", ConditionKind.BLUR, 3.0),
        ("downscale:0.5", ConditionKind.DOWNSCALE, 0.5),
    ],
)
def test_parse_condition(token: str, kind: ConditionKind, parameter: float | None) -> None:
    cond = parse_condition(token)
    assert cond.kind is kind
    assert cond.parameter == parameter
    assert cond.token == token


@pytest.mark.parametrize("token", ["sharpen:2", "jpeg:0", "jpeg:60.5", "blur:0", "downscale:1.5", "clean:1", "jpeg:x"])
def test_parse_condition_rejects_bad_tokens(token: str) -> None:
    with pytest.raises(ContractError):
        parse_condition(token)


def test_display_names() -> None:
    grid = default_grid()
    names = [c.display_name for c in grid]
    assert names[0] == "Clean"
    assert "JPEG Q60" in names
    assert "Blur σ=3" in names
    assert "Resize 0.5×" in names


def test_default_grid_order() -> None:
    grid = default_grid()
    assert len(grid) == 10
    assert grid.tokens == list(DEFAULT_GRID_TOKENS)


def test_grid_requires_clean_first_and_unique() -> None:
    with pytest.raises(ContractError):
        ConditionGrid.from_tokens(["jpeg:60", "clean"])
    with pytest.raises(ContractError):
        ConditionGrid.from_tokens(["clean", "blur:3", "blur:3"])


# -------------------- JPEG --------------------


def test_jpeg_roundtrip_is_deterministic() -> None:
    img = _smooth_fixture()
    a = jpeg_roundtrip(img, 75)
    b = jpeg_roundtrip(img, 75)
    assert np.array_equal(a.data, b.data)
    assert a.range_tag is RangeTag.UNIT


def test_jpeg_q60_matches_reference_codec() -> None:
    """Q60 output agrees with a direct Pillow round-trip within 2/255 per pixel."""
    img = _smooth_fixture()
    buffer = io.BytesIO()
    Image.fromarray(to_u8(img).data).save(buffer, format="JPEG", quality=60)
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        reference = np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0

    out = jpeg_roundtrip(img, 60)
    assert np.max(np.abs(out.data - reference)) <= 2 / 255 + 1e-12


def test_jpeg_degrades_more_at_lower_quality() -> None:
    rng = np.random.default_rng(0)
    img = _unit(rng.random((32, 32, 3)))
    err95 = np.mean(np.abs(jpeg_roundtrip(img, 95).data - img.data))
    err60 = np.mean(np.abs(jpeg_roundtrip(img, 60).data - img.data))
    assert err60 > err95


def test_jpeg_rejects_bad_quality() -> None:
    with pytest.raises(ContractError):
        jpeg_roundtrip(_smooth_fixture(8), 0)


# -------------------- Blur --------------------


def test_gaussian_kernel_is_normalized_and_symmetric() -> None:
    kernel = gaussian_kernel(3.0)
    assert len(kernel) == 19
    assert kernel.sum() == pytest.approx(1.0)
    assert np.allclose(kernel, kernel[::-1])


def test_blur_preserves_constant() -> None:
    img = _unit(np.full((20, 20, 3), 0.42))
    out = gaussian_blur(img, 5.0)
    assert np.max(np.abs(out.data - 0.42)) < 1e-6


def test_blur_centered_impulse_matches_closed_form() -> None:
    """Impulse on a 33x33 image keeps the normalized G(0,0) at its center."""
    data = np.zeros((33, 33, 3))
    data[16, 16, :] = 1.0
    out = gaussian_blur(_unit(data), 3.0)

    offsets = np.arange(-9, 10)
    g = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2 * 3.0 ** 2))
    expected = 1.0 / g.sum()
    assert out.data[16, 16, 0] == pytest.approx(expected, rel=1e-9)


def test_blur_keeps_dims() -> None:
    out = gaussian_blur(_smooth_fixture(17), 7.0)
    assert out.data.shape == (17, 17, 3)


def test_blur_composes_like_variances_add() -> None:
    """sigma 3 then sigma 4 matches sigma 5 away from the clamped border."""
    img = _smooth_fixture(96)
    twice = gaussian_blur(gaussian_blur(img, 3.0), 4.0).data
    once = gaussian_blur(img, 5.0).data
    inner = (slice(24, -24), slice(24, -24))
    assert np.max(np.abs(twice[inner] - once[inner])) < 1e-2


# -------------------- Downscale --------------------


def test_downscale_factor_one_is_identity() -> None:
    img = _smooth_fixture(24)
    out = downscale(img, 1.0)
    assert np.max(np.abs(out.data - img.data)) < 1e-6


def test_downscale_removes_nyquist_energy() -> None:
    """A checkerboard loses at least 90% of its high-frequency energy at factor 0.5."""
    board = (_checkerboard(32) + 1.0) / 2.0
    img = _unit(np.repeat(board[..., None], 3, axis=2))

    def hf_energy(x: ImageTensor) -> float:
        return float(np.sum(highpass_fft(x).data ** 2))

    before = hf_energy(img)
    after = hf_energy(downscale(img, 0.5))
    assert after <= 0.1 * before


# -------------------- High-pass --------------------


def test_highpass_zeroes_constant() -> None:
    out = highpass_fft(_unit(np.full((16, 16, 3), 0.8)))
    assert np.max(np.abs(out.data)) < 1e-6
    assert out.range_tag is RangeTag.NORMALIZED


def test_highpass_keeps_checkerboard() -> None:
    board = np.repeat(_checkerboard(16)[..., None], 3, axis=2)
    out = highpass_fft(ImageTensor.from_array(board, RangeTag.NORMALIZED))
    assert np.max(np.abs(out.data - board)) < 1e-6


def test_highpass_removes_low_frequency_sinusoid() -> None:
    """Frequency 7 < 0.06 * 128 sits inside the removed disc."""
    x = np.arange(128)
    wave = np.sin(2 * np.pi * 7 * x / 128)
    data = np.repeat(np.tile(wave, (128, 1))[..., None], 3, axis=2)
    out = highpass_fft(ImageTensor.from_array(data, RangeTag.NORMALIZED))
    assert np.max(np.abs(out.data)) < 1e-6


def test_highpass_is_idempotent_and_clears_the_disc() -> None:
    once = highpass_fft(_smooth_fixture(64))
    twice = highpass_fft(once)
    assert np.max(np.abs(twice.data - once.data)) <= 1e-5

    spectrum = np.abs(np.fft.fft2(once.data, axes=(0, 1))) ** 2
    inside = spectrum[~highpass_mask(64, 64, 0.06)].sum()
    assert inside <= 1e-9 * spectrum.sum()


def test_highpass_rejects_bad_cutoff() -> None:
    with pytest.raises(ContractError):
        highpass_fft(_smooth_fixture(8), cutoff_frac=0.5)


# -------------------- Dispatch --------------------


def test_apply_condition_dispatch() -> None:
    img = _smooth_fixture(32)
    assert apply_condition(img, CLEAN) is img
    assert np.array_equal(
        apply_condition(img, Condition(ConditionKind.JPEG, 95)).data, jpeg_roundtrip(img, 95).data
    )
    assert np.array_equal(
        apply_condition(img, Condition(ConditionKind.BLUR, 7)).data, gaussian_blur(img, 7).data
    )
    assert np.array_equal(
        apply_condition(img, Condition(ConditionKind.DOWNSCALE, 0.75)).data, downscale(img, 0.75).data
    )


def test_apply_condition_needs_unit_range() -> None:
    img = ImageTensor.from_array(np.zeros((4, 4, 3)), RangeTag.NORMALIZED)
    with pytest.raises(ContractError):
        apply_condition(img, CLEAN)


def test_apply_condition_batch_keeps_order() -> None:
    images = [_unit(np.full((8, 8, 3), v)) for v in (0.1, 0.5, 0.9)]
    out = apply_condition_batch(images, Condition(ConditionKind.BLUR, 3), batch_size=2)
    assert [float(o.data[0, 0, 0]) for o in out] == pytest.approx([0.1, 0.5, 0.9])
