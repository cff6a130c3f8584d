import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sibow.errors import PgmHeaderError, PgmMagicError, PgmTruncatedError
from sibow.imageio import GrayImage, read_pgm, resize_bilinear, standardize, write_pgm


def scalar_bilinear(src, out_w, out_h):
    """Plain-loop reference: half-pixel centres, clamp to edge."""
    h, w = len(src), len(src[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ty, tx = sy - y0, sx - x0
            out[i][j] = (
                src[y0][x0] * (1 - tx) * (1 - ty)
                + src[y0][x1] * tx * (1 - ty)
                + src[y1][x0] * (1 - tx) * ty
                + src[y1][x1] * tx * ty
            )
    return np.array(out)


def test_read_p5_minimal():
    img = read_pgm(b"P5 2 2 255\n" + bytes([0, 255, 128, 0]))
    assert (img.width, img.height) == (2, 2)
    np.testing.assert_array_equal(img.pixels, [[0, 1.0], [128 / 255, 0]])


def test_read_p2_single_pixel():
    img = read_pgm(b"P2 1 1 255\n255\n")
    assert img.pixels[0, 0] == 1.0


def test_read_comments_and_16bit():
    data = b"P5\n# a comment\n2 1\n# another\n65535\n" + bytes([0xFF, 0xFF, 0x00, 0x01])
    img = read_pgm(data)
    np.testing.assert_array_equal(img.pixels, [[1.0, 1 / 65535]])


def test_truncated_after_header():
    with pytest.raises(PgmTruncatedError) as ei:
        read_pgm(b"P5 2 2 255\n")
    assert ei.value.offset == len(b"P5 2 2 255\n")


def test_truncated_partial_raster():
    with pytest.raises(PgmTruncatedError):
        read_pgm(b"P5 2 2 255\n" + bytes([1, 2, 3]))


def test_bad_magic_and_header():
    with pytest.raises(PgmMagicError) as ei:
        read_pgm(b"P6 1 1 255\n\x00\x00\x00")
    assert ei.value.offset == 0
    with pytest.raises(PgmHeaderError):
        read_pgm(b"P5 2 x 255\n\x00\x00")
    with pytest.raises(PgmHeaderError):
        read_pgm(b"P5 1 1 70000\n\x00\x00")


def test_roundtrip_maxval_255():
    rng = np.random.default_rng(3)
    q = rng.integers(0, 256, size=(7, 5))
    img = GrayImage(q / 255.0)
    back = read_pgm(write_pgm(img))
    np.testing.assert_array_equal(back.pixels, img.pixels)


def test_checkerboard_against_scalar_oracle():
    src = [[0.0, 1.0], [1.0, 0.0]]
    out = resize_bilinear(GrayImage(np.array(src)), 4, 4)
    np.testing.assert_allclose(out.pixels, scalar_bilinear(src, 4, 4), atol=1e-12, rtol=0)
    # corners clamp to the source pixels, the centre is the mean
    assert out.pixels[0, 0] == 0.0 and out.pixels[0, 3] == 1.0
    assert out.pixels[1, 1] == pytest.approx(0.375)


def test_standard_resolution():
    img = GrayImage(np.random.default_rng(0).random((128, 128)))
    out = standardize(img)
    assert (out.width, out.height) == (384, 384)


def test_same_size_is_identity():
    px = np.random.default_rng(1).random((9, 13))
    out = resize_bilinear(GrayImage(px), 13, 9)
    assert np.array_equal(out.pixels, px)


def test_invalid_target_size():
    with pytest.raises(ValueError):
        resize_bilinear(GrayImage(np.zeros((2, 2))), 0, 3)


@settings(max_examples=60, deadline=None)
@given(
    v=st.floats(0, 1),
    w=st.integers(1, 12),
    h=st.integers(1, 12),
    ow=st.integers(1, 20),
    oh=st.integers(1, 20),
)
def test_constant_images_stay_constant(v, w, h, ow, oh):
    out = resize_bilinear(GrayImage(np.full((h, w), v)), ow, oh)
    assert out.pixels.shape == (oh, ow)
    assert np.all(out.pixels == v)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), ow=st.integers(1, 9), oh=st.integers(1, 9))
def test_resize_matches_oracle_and_stays_in_range(seed, ow, oh):
    rng = np.random.default_rng(seed)
    src = rng.random((rng.integers(1, 7), rng.integers(1, 7)))
    out = resize_bilinear(GrayImage(src), ow, oh)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1
    np.testing.assert_allclose(out.pixels, scalar_bilinear(src.tolist(), ow, oh), atol=1e-12, rtol=0)
