"""SIFT keypoints and 128-d descriptors.

Two descriptor sources share the :class:`DescriptorSet` container: a built-in
DoG extractor following Lowe (2004), and an importer for the ASCII output of
VLFeat's ``sift`` command-line tool. The built-in extractor is not
bit-compatible with VLFeat.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, DescriptorParseError, ImageTooSmallError, KeypointMarginError
from .imageio import GrayImage

DESCRIPTOR_DIM = 128
CLAMP = 0.2
MIN_OCTAVE_SIDE = 8
MIN_IMAGE_SIDE = 16

_ORI_BINS = 36
_ORI_PEAK_RATIO = 0.8
_ORI_SIGMA_FACTOR = 1.5
_ORI_RADIUS_FACTOR = 3.0
_DESC_BINS = 4
_DESC_ORI_BINS = 8
_DESC_SAMPLES = 16
_BIN_WIDTH_FACTOR = 3.0
_REFINE_ITERS = 5


@dataclass(frozen=True)
class SiftParams:
    n_octaves: int = 4
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    assumed_blur: float = 0.5
    refine: bool = True
    border: int = 5

    def __post_init__(self):
        if self.n_octaves < 1 or self.scales_per_octave < 1:
            raise ValueError("n_octaves and scales_per_octave must be positive")
        if not (self.base_sigma > 0 and math.isfinite(self.base_sigma)):
            raise ValueError("base_sigma must be a positive finite real")
        if not (self.contrast_threshold >= 0 and math.isfinite(self.contrast_threshold)):
            raise ValueError("contrast_threshold must be non-negative and finite")
        if not (self.edge_threshold > 1 and math.isfinite(self.edge_threshold)):
            raise ValueError("edge_threshold must be a finite real > 1")
        if not 0 <= self.assumed_blur < self.base_sigma:
            raise ValueError("assumed_blur must lie in [0, base_sigma)")


@dataclass(frozen=True)
class Keypoint:
    """Keypoint in input-image pixel coordinates.

    ``octave`` and ``layer`` locate the Gaussian image the keypoint was
    detected on; they are derived from ``scale`` when not given.
    """

    x: float
    y: float
    scale: float
    orientation: float
    octave: int = -1
    layer: int = -1


@dataclass(eq=False)
class DescriptorSet:
    image_id: str
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_DIM)))
    keypoints: list[Keypoint] | None = None

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, DESCRIPTOR_DIM)
        if not np.all(np.isfinite(d)) or (d.size and d.min() < 0):
            raise ValueError("descriptors must be finite and non-negative")
        self.descriptors = d

    def __len__(self):
        return self.descriptors.shape[0]


@dataclass(eq=False)
class ScaleSpace:
    """Gaussian and DoG pyramids.

    ``gaussians[o]`` has shape ``(S + 3, h_o, w_o)`` and ``dogs[o]`` has shape
    ``(S + 2, h_o, w_o)``. ``sigmas[l]`` is the blur of layer ``l`` measured in
    pixels of its own octave.
    """

    params: SiftParams
    gaussians: list[np.ndarray]
    dogs: list[np.ndarray]
    sigmas: np.ndarray
    _grads: dict = field(default_factory=dict, repr=False)

    @property
    def n_octaves(self) -> int:
        return len(self.gaussians)

    def gradients(self, octave: int, layer: int):
        key = (octave, layer)
        if key not in self._grads:
            g = self.gaussians[octave][layer]
            gx = np.zeros_like(g)
            gy = np.zeros_like(g)
            gx[:, 1:-1] = 0.5 * (g[:, 2:] - g[:, :-2])
            gy[1:-1, :] = 0.5 * (g[2:, :] - g[:-2, :])
            self._grads[key] = (gx, gy)
        return self._grads[key]


def _octave_count(w: int, h: int, requested: int) -> int:
    n = 0
    while n < requested and min(w, h) // (2**n) >= MIN_OCTAVE_SIDE:
        n += 1
    return n


def build_scale_space(img: GrayImage, params: SiftParams = SiftParams()) -> ScaleSpace:
    if img.width < MIN_IMAGE_SIDE or img.height < MIN_IMAGE_SIDE:
        raise ImageTooSmallError(
            f"image {img.width}x{img.height} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
        )
    S = params.scales_per_octave
    n_oct = _octave_count(img.width, img.height, params.n_octaves)
    k = 2.0 ** (1.0 / S)
    sigmas = params.base_sigma * k ** np.arange(S + 3)
    increments = np.sqrt(np.maximum(sigmas[1:] ** 2 - sigmas[:-1] ** 2, 0.0))

    first = math.sqrt(params.base_sigma**2 - params.assumed_blur**2)
    # centring makes DoG of a constant image exactly zero (filter weights only
    # sum to 1 up to rounding)
    px = img.pixels - img.pixels.mean()
    base = ndimage.gaussian_filter(px, first, mode="nearest")
    gaussians, dogs = [], []
    for _ in range(n_oct):
        layers = [base]
        for inc in increments:
            layers.append(ndimage.gaussian_filter(layers[-1], inc, mode="nearest"))
        stack = np.stack(layers)
        gaussians.append(stack)
        dogs.append(stack[1:] - stack[:-1])
        # layer S has exactly twice the base blur
        base = stack[S][::2, ::2].copy()
    return ScaleSpace(params, gaussians, dogs, sigmas)


def _refine(dog: np.ndarray, l: int, y: int, x: int, S: int, border: int):
    """Quadratic sub-sample fit. Returns (l, y, x, offset, value) or None."""
    n_l, h, w = dog.shape
    for _ in range(_REFINE_ITERS):
        cube = dog[l - 1 : l + 2, y - 1 : y + 2, x - 1 : x + 2]
        grad = 0.5 * np.array(
            [
                cube[1, 1, 2] - cube[1, 1, 0],
                cube[1, 2, 1] - cube[1, 0, 1],
                cube[2, 1, 1] - cube[0, 1, 1],
            ]
        )
        c = cube[1, 1, 1]
        dxx = cube[1, 1, 2] - 2 * c + cube[1, 1, 0]
        dyy = cube[1, 2, 1] - 2 * c + cube[1, 0, 1]
        dss = cube[2, 1, 1] - 2 * c + cube[0, 1, 1]
        dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            value = c + 0.5 * grad @ offset
            return l, y, x, offset, value
        x += int(round(offset[0]))
        y += int(round(offset[1]))
        l += int(round(offset[2]))
        if not (1 <= l <= S and border <= y < h - border and border <= x < w - border):
            return None
    return None


def _is_edge(dog_layer: np.ndarray, y: int, x: int, r: float) -> bool:
    c = dog_layer[y, x]
    dxx = dog_layer[y, x + 1] - 2 * c + dog_layer[y, x - 1]
    dyy = dog_layer[y + 1, x] - 2 * c + dog_layer[y - 1, x]
    dxy = 0.25 * (
        dog_layer[y + 1, x + 1] - dog_layer[y + 1, x - 1] - dog_layer[y - 1, x + 1] + dog_layer[y - 1, x - 1]
    )
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    return det <= 0 or tr * tr * r >= (r + 1) ** 2 * det


def _orientations(space: ScaleSpace, octave: int, layer: int, xo: float, yo: float, sigma_oct: float):
    gx, gy = space.gradients(octave, layer)
    h, w = gx.shape
    weight_sigma = _ORI_SIGMA_FACTOR * sigma_oct
    radius = int(round(_ORI_RADIUS_FACTOR * weight_sigma))
    cx, cy = int(round(xo)), int(round(yo))
    y0, y1 = max(cy - radius, 1), min(cy + radius, h - 2)
    x0, x1 = max(cx - radius, 1), min(cx + radius, w - 2)
    if y0 > y1 or x0 > x1:
        return []
    px = gx[y0 : y1 + 1, x0 : x1 + 1]
    py = gy[y0 : y1 + 1, x0 : x1 + 1]
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    wgt = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * weight_sigma**2))
    mag = np.hypot(px, py) * wgt
    ang = np.mod(np.arctan2(py, px), 2 * np.pi)
    bins = np.floor(ang * _ORI_BINS / (2 * np.pi)).astype(np.intp) % _ORI_BINS
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=_ORI_BINS)
    # circular [1 4 6 4 1]/16 smoothing
    hist = (
        6 * hist
        + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
        + (np.roll(hist, 2) + np.roll(hist, -2))
    ) / 16.0
    peak = hist.max()
    if peak <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    out = []
    for b in np.flatnonzero((hist > left) & (hist > right) & (hist >= _ORI_PEAK_RATIO * peak)):
        denom = left[b] - 2 * hist[b] + right[b]
        shift = 0.5 * (left[b] - right[b]) / denom if denom != 0 else 0.0
        theta = (b + 0.5 + shift) * 2 * np.pi / _ORI_BINS
        out.append(float(np.mod(theta, 2 * np.pi)))
    return out


def detect_keypoints(space: ScaleSpace, params: SiftParams | None = None) -> list[Keypoint]:
    params = params or space.params
    S = params.scales_per_octave
    border = params.border
    prelim = 0.5 * params.contrast_threshold
    keypoints = []
    for o, dog in enumerate(space.dogs):
        n_l, h, w = dog.shape
        if h <= 2 * border or w <= 2 * border:
            continue
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == mx) | (dog == mn)) & (np.abs(dog) > prelim)
        cand[0] = cand[-1] = False
        cand[:, :border] = cand[:, h - border :] = False
        cand[:, :, :border] = cand[:, :, w - border :] = False
        seen = set()
        for l, y, x in zip(*np.nonzero(cand)):
            l, y, x = int(l), int(y), int(x)
            if params.refine:
                fit = _refine(dog, l, y, x, S, border)
                if fit is None:
                    continue
                l, y, x, offset, value = fit
            else:
                offset, value = np.zeros(3), dog[l, y, x]
            if abs(value) < params.contrast_threshold:
                continue
            if (l, y, x) in seen:
                continue
            seen.add((l, y, x))
            if _is_edge(dog[l], y, x, params.edge_threshold):
                continue
            xo, yo = x + offset[0], y + offset[1]
            s_frac = l + offset[2]
            sigma_oct = params.base_sigma * 2.0 ** (s_frac / S)
            layer = int(min(max(round(s_frac), 1), S + 1))
            scale = sigma_oct * 2.0**o
            for theta in _orientations(space, o, layer, xo, yo, sigma_oct):
                keypoints.append(
                    Keypoint(float(xo * 2.0**o), float(yo * 2.0**o), float(scale), theta, o, layer)
                )
    return keypoints


def _locate(space: ScaleSpace, kp: Keypoint):
    if kp.octave >= 0 and kp.layer >= 0:
        return kp.octave, kp.layer
    p = space.params
    s_abs = math.log2(kp.scale / p.base_sigma) * p.scales_per_octave
    o = int(min(max(math.floor(s_abs / p.scales_per_octave), 0), space.n_octaves - 1))
    layer = int(min(max(round(s_abs - o * p.scales_per_octave), 1), p.scales_per_octave + 1))
    return o, layer


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx, fy = x - x0, y - y0
    a = img[y0, x0]
    b = img[y0, x0 + 1]
    c = img[y0 + 1, x0]
    d = img[y0 + 1, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def normalize_descriptor(v: np.ndarray) -> np.ndarray:
    """Unit L2 norm with every entry capped at 0.2. All-zero input stays zero.

    Clamping and renormalizing once can lift entries back above the cap, so
    the scale is solved exactly instead: the largest k entries sit at the cap
    and the rest are scaled to make the norm 1. With fewer than 25 non-zero
    entries no such scale exists and the capped vector has norm below 1.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        return np.zeros_like(v)
    v = v / n
    if v.max() <= CLAMP:
        return v
    desc = np.sort(v)[::-1]
    tail = np.cumsum((desc**2)[::-1])[::-1]  # tail[k] = sum of desc[k:]**2
    for k in range(1, desc.size):
        rest = 1.0 - k * CLAMP * CLAMP
        if rest <= 0 or tail[k] == 0:
            break
        t = math.sqrt(rest / tail[k])
        if t * desc[k] <= CLAMP:
            return np.minimum(t * v, CLAMP)
    return np.minimum(v * (CLAMP / desc[desc > 0].min()), CLAMP)


def compute_descriptor(space: ScaleSpace, kp: Keypoint) -> np.ndarray:
    """4x4 spatial x 8 orientation histogram over a rotated 16x16 sample grid.

    Raises :class:`KeypointMarginError` when the grid leaves the image.
    """
    o, layer = _locate(space, kp)
    gx, gy = space.gradients(o, layer)
    h, w = gx.shape
    f = 2.0**o
    xo, yo, sigma_oct = kp.x / f, kp.y / f, kp.scale / f
    bin_w = _BIN_WIDTH_FACTOR * sigma_oct
    step = bin_w * _DESC_BINS / _DESC_SAMPLES
    t = (np.arange(_DESC_SAMPLES) - (_DESC_SAMPLES - 1) / 2.0) * step
    u, v = np.meshgrid(t, t)  # u along keypoint x-axis, v along its y-axis
    cos_t, sin_t = math.cos(kp.orientation), math.sin(kp.orientation)
    sx = xo + cos_t * u - sin_t * v
    sy = yo + sin_t * u + cos_t * v
    if sx.min() < 0 or sy.min() < 0 or sx.max() >= w - 1 or sy.max() >= h - 1:
        raise KeypointMarginError(
            f"sample grid of keypoint at ({kp.x:.1f}, {kp.y:.1f}) scale {kp.scale:.2f} leaves the image"
        )
    dx = _bilinear(gx, sx, sy)
    dy = _bilinear(gy, sx, sy)
    # gradient expressed in the keypoint frame
    ru = cos_t * dx + sin_t * dy
    rv = -sin_t * dx + cos_t * dy
    mag = np.hypot(ru, rv)
    ang = np.mod(np.arctan2(rv, ru), 2 * np.pi)
    win_sigma = 0.5 * _DESC_BINS * bin_w
    mag = mag * np.exp(-(u**2 + v**2) / (2 * win_sigma**2))

    rb = v / bin_w + _DESC_BINS / 2.0 - 0.5
    cb = u / bin_w + _DESC_BINS / 2.0 - 0.5
    ob = ang * _DESC_ORI_BINS / (2 * np.pi)
    r0, c0, o0 = np.floor(rb).astype(int), np.floor(cb).astype(int), np.floor(ob).astype(int)
    dr, dc, do = rb - r0, cb - c0, ob - o0
    hist = np.zeros((_DESC_BINS, _DESC_BINS, _DESC_ORI_BINS))
    for ir in (0, 1):
        wr = dr if ir else 1 - dr
        rr = r0 + ir
        for ic in (0, 1):
            wc = dc if ic else 1 - dc
            cc = c0 + ic
            ok = (rr >= 0) & (rr < _DESC_BINS) & (cc >= 0) & (cc < _DESC_BINS)
            for io in (0, 1):
                wo = do if io else 1 - do
                oo = (o0 + io) % _DESC_ORI_BINS
                np.add.at(hist, (rr[ok], cc[ok], oo[ok]), (mag * wr * wc * wo)[ok])
    return normalize_descriptor(hist.ravel())


def extract(img: GrayImage, params: SiftParams = SiftParams(), image_id: str = "") -> DescriptorSet:
    space = build_scale_space(img, params)
    kept, rows = [], []
    for kp in detect_keypoints(space, params):
        try:
            rows.append(compute_descriptor(space, kp))
        except KeypointMarginError:
            continue
        kept.append(kp)
    desc = np.array(rows) if rows else np.zeros((0, DESCRIPTOR_DIM))
    return DescriptorSet(image_id, desc, kept)


def import_vlfeat(text: str | io.TextIOBase, image_id: str = "") -> DescriptorSet:
    """Read VLFeat ``sift`` ASCII output: 4 frame fields then 128 values per line.

    Descriptors are brought to the unit-norm, 0.2-capped convention of the
    built-in extractor.
    """
    lines = text.splitlines() if isinstance(text, str) else text.read().splitlines()
    rows, kps = [], []
    n_fields = 4 + DESCRIPTOR_DIM
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != n_fields:
            raise DescriptorParseError(f"expected {n_fields} fields, found {len(tokens)}", lineno)
        try:
            vals = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise DescriptorParseError(f"non-numeric token ({exc})", lineno) from None
        if not np.all(np.isfinite(vals)):
            raise DescriptorParseError("non-finite value", lineno)
        if np.any(vals[4:] < 0):
            raise DescriptorParseError("negative descriptor entry", lineno)
        x, y, s, th = vals[:4]
        kps.append(Keypoint(float(x), float(y), float(s), float(np.mod(th, 2 * np.pi))))
        rows.append(normalize_descriptor(vals[4:]))
    desc = np.array(rows) if rows else np.zeros((0, DESCRIPTOR_DIM))
    return DescriptorSet(image_id, desc, kps)


def export_vlfeat(ds: DescriptorSet) -> str:
    kps = ds.keypoints or [Keypoint(0.0, 0.0, 1.0, 0.0)] * len(ds)
    out = []
    for kp, d in zip(kps, ds.descriptors):
        frame = (kp.x, kp.y, kp.scale, kp.orientation)
        out.append(" ".join(repr(float(v)) for v in (*frame, *d)))
    return "\n".join(out) + ("\n" if out else "")


# Binary container for many descriptor sets: b"SBWD", u32 version, u32 count,
# then per set: u16 id length, utf-8 id, u32 rows, rows x 128 float64 LE.
_SBWD_MAGIC = b"SBWD"
_SBWD_VERSION = 1


def save_descriptor_sets(sets: list[DescriptorSet], path: Path | str) -> None:
    buf = io.BytesIO()
    buf.write(_SBWD_MAGIC + struct.pack("<II", _SBWD_VERSION, len(sets)))
    for ds in sets:
        ident = ds.image_id.encode("utf-8")
        buf.write(struct.pack("<H", len(ident)) + ident + struct.pack("<I", len(ds)))
        buf.write(ds.descriptors.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_descriptor_sets(path: Path | str) -> list[DescriptorSet]:
    data = Path(path).read_bytes()
    if data[:4] != _SBWD_MAGIC:
        raise DataError(f"{path}: not a descriptor artifact")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _SBWD_VERSION:
        raise DataError(f"{path}: unsupported descriptor artifact version {version}")
    pos, sets = 12, []
    for _ in range(count):
        (n_id,) = struct.unpack_from("<H", data, pos)
        ident = data[pos + 2 : pos + 2 + n_id].decode("utf-8")
        pos += 2 + n_id
        (rows,) = struct.unpack_from("<I", data, pos)
        pos += 4
        nbytes = rows * DESCRIPTOR_DIM * 8
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(rows, DESCRIPTOR_DIM)
        pos += nbytes
        sets.append(DescriptorSet(ident, arr.astype(np.float64)))
    return sets
