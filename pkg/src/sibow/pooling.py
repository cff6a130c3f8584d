"""Pooling (sum/max) and normalization (sum/L2/LTF) of per-image code matrices,
plus persistence of the resulting feature matrices."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import CodeMatrix
from .errors import CompatibilityError, DataError

POOLING_IDS = ("sum-sum", "sum-L2", "sum-LTF", "max-sum", "max-L2", "max-LTF")
SOURCES = ("vq", "llc")


@dataclass(eq=False)
class PooledVector:
    values: np.ndarray
    source: str = "vq"
    degenerate: bool = False


@dataclass(eq=False)
class ImageFeature:
    values: np.ndarray
    pooling_id: str
    image_id: str = ""
    label: int | None = None
    degenerate: bool = False


def source_of(method: str) -> str:
    """Map an encoder name onto the LTF variant it needs."""
    return "vq" if method == "vq" else "llc"


def pool(codes: CodeMatrix, mode: str = "sum", source: str | None = None) -> PooledVector:
    if mode not in ("sum", "max"):
        raise ValueError(f"pooling mode must be 'sum' or 'max', got {mode!r}")
    source = source or source_of(codes.method)
    if len(codes) == 0:
        return PooledVector(np.zeros(codes.M), source, degenerate=True)
    m = codes.matrix
    if mode == "sum":
        vals = np.asarray(m.sum(axis=0)).ravel()
    else:
        vals = m.max(axis=0).toarray().ravel()
    return PooledVector(vals.astype(np.float64), source)


def _ltf(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    pos = v > 0
    out[pos] = 1.0 + np.log10(v[pos])
    return out


def normalize(q: PooledVector, mode: str) -> tuple[np.ndarray, bool]:
    """Return the normalized vector and whether the input was degenerate."""
    v = q.values
    if mode == "sum":
        total = v.sum()
        if total == 0:
            return v.copy(), True
        return v / total, q.degenerate
    if mode == "l2":
        n = np.linalg.norm(v)
        if n == 0:
            return v.copy(), True
        return v / n, q.degenerate
    if mode == "ltf":
        if q.source == "vq":
            return _ltf(v), q.degenerate or not np.any(v > 0)
        clipped = np.where(v > 0, v, 0.0)
        positive = clipped[clipped > 0]
        if positive.size == 0:
            return np.zeros_like(v), True
        return _ltf(clipped / positive.min()), q.degenerate
    raise ValueError(f"normalization must be 'sum', 'l2' or 'ltf', got {mode!r}")


def parse_pooling_id(pooling_id: str) -> tuple[str, str]:
    if pooling_id not in POOLING_IDS:
        raise ValueError(f"unknown pooling {pooling_id!r}; expected one of {POOLING_IDS}")
    p, n = pooling_id.split("-")
    return p, n.lower()


def featurize(
    codes: CodeMatrix,
    pooling_id: str,
    source: str | None = None,
    image_id: str = "",
    label: int | None = None,
) -> ImageFeature:
    pmode, nmode = parse_pooling_id(pooling_id)
    pooled = pool(codes, pmode, source)
    values, degenerate = normalize(pooled, nmode)
    return ImageFeature(values, pooling_id, image_id, label, degenerate or pooled.degenerate)


@dataclass(eq=False)
class FeatureMatrix:
    """Stacked image features sharing one pooling and codebook size."""

    values: np.ndarray
    image_ids: list[str]
    labels: np.ndarray  # 0 where unknown
    pooling_id: str

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    @classmethod
    def from_features(cls, feats: list[ImageFeature], M: int | None = None) -> "FeatureMatrix":
        if not feats:
            if M is None:
                raise ValueError("cannot infer M from an empty feature list")
            return cls(np.zeros((0, M)), [], np.zeros(0, dtype=np.int64), "")
        pids = {f.pooling_id for f in feats}
        if len(pids) != 1:
            raise CompatibilityError(f"mixed pooling ids {sorted(pids)}")
        vals = np.stack([f.values for f in feats])
        labels = np.array([f.label or 0 for f in feats], dtype=np.int64)
        return cls(vals, [f.image_id for f in feats], labels, pids.pop())

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        return FeatureMatrix(
            self.values[idx], [self.image_ids[i] for i in idx], self.labels[idx], self.pooling_id
        )


# b"SBWF", u32 version, u32 M, u8 len + pooling id, u64 rows, then per row:
# u16 id length, utf-8 id, i32 label (0 = none), M float64 LE.
_SBWF_MAGIC = b"SBWF"
_SBWF_VERSION = 1


def features_to_bytes(fm: FeatureMatrix) -> bytes:
    buf = io.BytesIO()
    pid = fm.pooling_id.encode("ascii")
    buf.write(_SBWF_MAGIC + struct.pack("<IIB", _SBWF_VERSION, fm.M, len(pid)) + pid)
    buf.write(struct.pack("<Q", len(fm)))
    for ident, lab, row in zip(fm.image_ids, fm.labels, fm.values):
        raw = ident.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<i", int(lab)))
        buf.write(np.ascontiguousarray(row, dtype="<f8").tobytes())
    return buf.getvalue()


def features_from_bytes(data: bytes) -> FeatureMatrix:
    if data[:4] != _SBWF_MAGIC:
        raise DataError("not a feature-matrix artifact")
    version, M, plen = struct.unpack_from("<IIB", data, 4)
    if version != _SBWF_VERSION:
        raise DataError(f"unsupported feature artifact version {version}")
    pos = 13
    pid = data[pos : pos + plen].decode("ascii")
    pos += plen
    (rows,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    vals = np.empty((rows, M))
    ids, labels = [], np.empty(rows, dtype=np.int64)
    for r in range(rows):
        (n,) = struct.unpack_from("<H", data, pos)
        ids.append(data[pos + 2 : pos + 2 + n].decode("utf-8"))
        pos += 2 + n
        (labels[r],) = struct.unpack_from("<i", data, pos)
        pos += 4
        vals[r] = np.frombuffer(data, dtype="<f8", count=M, offset=pos)
        pos += 8 * M
    if pos != len(data):
        raise DataError("trailing bytes in feature artifact")
    return FeatureMatrix(vals, ids, labels, pid)


def save_features(fm: FeatureMatrix, path) -> None:
    Path(path).write_bytes(features_to_bytes(fm))


def load_features(path) -> FeatureMatrix:
    return features_from_bytes(Path(path).read_bytes())


def features_to_csv(fm: FeatureMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "label"] + [f"q_{j}" for j in range(fm.M)])
        for ident, lab, row in zip(fm.image_ids, fm.labels, fm.values):
            wr.writerow([ident, int(lab) if lab else ""] + [repr(float(v)) for v in row])


def features_from_csv(path, pooling_id: str) -> FeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["image_id", "label"]:
        raise DataError(f"{path}: missing image_id,label header")
    body = rows[1:]
    vals = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(rows[0]) - 2)
    labels = np.array([int(r[1]) if r[1] else 0 for r in body], dtype=np.int64)
    return FeatureMatrix(vals, [r[0] for r in body], labels, pooling_id)
