"""Grayscale image I/O (Netpbm PGM) and bilinear resizing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PgmError, PgmHeaderError, PgmMagicError, PgmTruncatedError

STANDARD_SIZE = 384

_WHITESPACE = b" \t\n\r\v\f"


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major grayscale image with intensities in [0, 1].

    ``pixels`` has shape ``(height, width)``.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_space_and_comments(self):
        data = self.data
        while self.pos < len(data):
            c = data[self.pos : self.pos + 1]
            if c in (b"",) or c not in _WHITESPACE + b"#":
                return
            if c == b"#":
                while self.pos < len(data) and data[self.pos : self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            else:
                self.pos += 1

    def token(self, what: str) -> bytes:
        self.skip_space_and_comments()
        start = self.pos
        data = self.data
        while self.pos < len(data) and data[self.pos : self.pos + 1] not in _WHITESPACE + b"#":
            self.pos += 1
        if self.pos == start:
            raise PgmHeaderError(f"missing {what}", start)
        return data[start : self.pos]

    def integer(self, what: str, exc=PgmHeaderError) -> int:
        start = self.pos
        tok = self.token(what)
        if not tok.isdigit():
            raise exc(f"expected a non-negative integer for {what}, got {tok[:16]!r}", start)
        return int(tok)


def read_pgm(data: bytes | Path | str) -> GrayImage:
    """Parse a binary (P5) or ASCII (P2) PGM stream.

    ``data`` may be the raw bytes or a filesystem path.
    """
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    r = _Reader(bytes(data))
    if len(r.data) < 2:
        raise PgmHeaderError("stream too short for a magic number", 0)
    magic = r.data[:2]
    if magic not in (b"P2", b"P5"):
        raise PgmMagicError(f"unsupported magic number {magic!r}", 0)
    r.pos = 2
    if r.pos < len(r.data) and r.data[r.pos : r.pos + 1] not in _WHITESPACE + b"#":
        raise PgmHeaderError("magic number must be followed by whitespace", r.pos)

    width = r.integer("width")
    height = r.integer("height")
    maxval_at = r.pos
    maxval = r.integer("maxval")
    if width < 1 or height < 1:
        raise PgmHeaderError(f"non-positive dimensions {width}x{height}", maxval_at)
    if not 1 <= maxval <= 65535:
        raise PgmHeaderError(f"maxval {maxval} outside [1, 65535]", maxval_at)

    n = width * height
    if magic == b"P5":
        if r.pos >= len(r.data):
            raise PgmTruncatedError("no pixel data after header", r.pos)
        # exactly one whitespace byte separates maxval from the raster
        r.pos += 1
        bps = 1 if maxval < 256 else 2
        need = n * bps
        raster = r.data[r.pos : r.pos + need]
        if len(raster) < need:
            raise PgmTruncatedError(
                f"expected {need} raster bytes, found {len(raster)}", r.pos + len(raster)
            )
        dtype = np.uint8 if bps == 1 else np.dtype(">u2")
        values = np.frombuffer(raster, dtype=dtype).astype(np.int64)
        bad = np.flatnonzero(values > maxval)
        if bad.size:
            raise PgmError(f"sample {values[bad[0]]} exceeds maxval {maxval}", r.pos + bad[0] * bps)
    else:
        values = np.empty(n, dtype=np.int64)
        for i in range(n):
            r.skip_space_and_comments()
            if r.pos >= len(r.data):
                raise PgmTruncatedError(f"expected {n} samples, found {i}", r.pos)
            at = r.pos
            v = r.integer("sample", exc=PgmError)
            if v > maxval:
                raise PgmError(f"sample {v} exceeds maxval {maxval}", at)
            values[i] = v

    pixels = values.reshape(height, width).astype(np.float64) / maxval
    return GrayImage(pixels)


def write_pgm(img: GrayImage, path: Path | str | None = None, maxval: int = 255) -> bytes:
    """Encode as binary P5. Debug facility; values are rounded to ``maxval`` levels."""
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must be in [1, 65535]")
    q = np.rint(img.pixels * maxval).astype(np.int64)
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    raster = q.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    out = header + raster
    if path is not None:
        Path(path).write_bytes(out)
    return out


def _axis_weights(n_in: int, n_out: int):
    # half-pixel-centre convention, clamp-to-edge
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return GrayImage(img.pixels.copy())
    px = img.pixels
    y0, y1, fy = _axis_weights(img.height, out_h)
    x0, x1, fx = _axis_weights(img.width, out_w)
    # lerp written as a + t*(b - a) so constant inputs stay exactly constant
    top = px[y0][:, x0] + fx * (px[y0][:, x1] - px[y0][:, x0])
    bot = px[y1][:, x0] + fx * (px[y1][:, x1] - px[y1][:, x0])
    out = top + fy[:, None] * (bot - top)
    return GrayImage(np.clip(out, 0.0, 1.0))


def standardize(img: GrayImage, size: int = STANDARD_SIZE) -> GrayImage:
    """Resize to the square working resolution used before SIFT."""
    return resize_bilinear(img, size, size)
