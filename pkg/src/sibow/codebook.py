"""Bag-of-features descriptor pool and k-means visual-word codebooks."""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ClusteringError, DataError, EmptyPoolError, NumericalError
from .sift import DescriptorSet

TWO_PASS_THRESHOLD = 128
CHUNK_ROWS = 1_000_000
_ASSIGN_BLOCK = 8192


@dataclass(eq=False)
class Pool:
    rows: np.ndarray
    provenance: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self):
        return self.rows.shape[0]


@dataclass(frozen=True)
class KMeansParams:
    max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0
    n_init: int = 3

    def __post_init__(self):
        if self.max_iters < 1 or self.n_init < 1:
            raise ValueError("max_iters and n_init must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray
    passes_used: int = 1
    inertia: float = 0.0
    seed: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def build_pool(sets: Sequence[DescriptorSet]) -> Pool:
    blocks, prov, start = [], [], 0
    for ds in sets:
        n = len(ds)
        prov.append((ds.image_id, start, start + n))
        if n:
            blocks.append(ds.descriptors)
        start += n
    if start == 0:
        raise EmptyPoolError("every descriptor set is empty; nothing to cluster")
    return Pool(np.concatenate(blocks, axis=0), prov)


def _as_rows(pool) -> np.ndarray:
    x = pool.rows if isinstance(pool, Pool) else np.asarray(pool, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return np.asarray(x, dtype=np.float64)


def assign(x: np.ndarray, centers: np.ndarray):
    """Nearest-centre labels (smallest index on ties) and exact squared distances."""
    c_sq = np.einsum("ij,ij->i", centers, centers)
    labels = np.empty(x.shape[0], dtype=np.intp)
    for s in range(0, x.shape[0], _ASSIGN_BLOCK):
        blk = x[s : s + _ASSIGN_BLOCK]
        d = c_sq[None, :] - 2.0 * blk @ centers.T
        labels[s : s + _ASSIGN_BLOCK] = np.argmin(d, axis=1)
    diff = x - centers[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def _plusplus(x, w, m, rng):
    n = x.shape[0]
    p = w / w.sum()
    idx = [int(rng.choice(n, p=p))]
    d2 = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, m):
        score = w * d2
        total = score.sum()
        if total <= 0:
            raise ClusteringError(f"fewer than {m} distinct points in the pool")
        nxt = int(rng.choice(n, p=score / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[idx].copy()


def _weighted_means(x, w, labels, m):
    order = np.argsort(labels, kind="stable")
    sl = labels[order]
    counts = np.bincount(labels, weights=w, minlength=m)
    present = np.flatnonzero(np.bincount(labels, minlength=m))
    starts = np.searchsorted(sl, present)
    sums = np.add.reduceat((x * w[:, None])[order], starts, axis=0)
    means = np.full((m, x.shape[1]), np.nan)
    means[present] = sums / counts[present, None]
    return means, counts


def _lloyd(x, w, m, params: KMeansParams, rng):
    centers = _plusplus(x, w, m, rng)
    history = []
    prev = None
    for _ in range(params.max_iters):
        labels, d2 = assign(x, centers)
        inertia = float(np.dot(w, d2))
        if prev is not None and inertia > prev * (1 + 1e-12) + 1e-300:
            raise NumericalError(f"k-means inertia increased from {prev!r} to {inertia!r}")
        history.append(inertia)
        centers, _ = _weighted_means(x, w, labels, m)
        _repair(centers, x, d2)
        if prev is not None and prev - inertia <= params.tol * prev:
            break
        prev = inertia
    return centers, history


def _repair(centers, x, d2):
    """Reseed empty or duplicated centroids at the points farthest from their centre."""
    m = centers.shape[0]
    bad = [j for j in range(m) if np.isnan(centers[j, 0])]
    _, first = np.unique(np.where(np.isnan(centers), np.inf, centers), axis=0, return_index=True)
    dup = sorted(set(range(m)) - set(first.tolist()) - set(bad))
    if not bad and not dup:
        return
    d2 = d2.copy()
    for j in sorted(bad + dup):
        far = int(np.argmax(d2))
        centers[j] = x[far]
        d2[far] = -1.0


def _final_inertia(x, w, centers):
    _, d2 = assign(x, centers)
    return float(np.dot(w, d2))


def kmeans(pool, M: int, params: KMeansParams = KMeansParams(), weights=None) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding and ``n_init`` restarts.

    ``weights`` gives per-row multiplicities (used by the second pass of
    :func:`multipass_kmeans`). Returned centroids are the weighted means of
    the final assignment.
    """
    x = _as_rows(pool)
    n = x.shape[0]
    if M < 1:
        raise ValueError("codebook size must be positive")
    if n < M:
        raise ClusteringError(f"pool has {n} rows, fewer than the {M} requested centroids")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per row")
    if np.unique(x, axis=0).shape[0] < M:
        raise ClusteringError(f"fewer than {M} distinct points in the pool")

    rng = np.random.default_rng(params.seed)
    best = None
    for _ in range(params.n_init):
        centers, history = _lloyd(x, w, M, params, rng)
        inertia = _final_inertia(x, w, centers)
        if best is None or inertia < best[1]:
            best = (centers, inertia, history)
    centers, inertia, history = best
    return Codebook(centers, passes_used=1, inertia=inertia, seed=params.seed, history=history)


def multipass_kmeans(
    pool,
    M: int,
    params: KMeansParams = KMeansParams(),
    passes: int | None = None,
    chunks: int | None = None,
    workers: int = 1,
) -> Codebook:
    """One- or two-pass k-means.

    Two passes cluster ``C`` random equal-size chunks into ``M`` centroids
    each, then cluster the ``C*M`` centroids (weighted by member counts) into
    the final ``M``. Defaults: two passes when ``M > 128``, ``C = ceil(N/1e6)``.
    With a single chunk the second pass is the identity, so the result equals
    :func:`kmeans`.
    """
    x = _as_rows(pool)
    n = x.shape[0]
    if passes is None:
        passes = 1 if M <= TWO_PASS_THRESHOLD else 2
    if passes not in (1, 2):
        raise ValueError("passes must be 1 or 2")
    if n < M:
        raise ClusteringError(f"pool has {n} rows, fewer than the {M} requested centroids")
    n_chunks = chunks if chunks is not None else math.ceil(n / CHUNK_ROWS)
    n_chunks = max(1, min(n_chunks, n // M))
    if passes == 1 or n_chunks == 1:
        return kmeans(x, M, params)

    perm = np.random.default_rng(params.seed).permutation(n)
    parts = np.array_split(perm, n_chunks)

    def first_pass(c):
        sub = x[np.sort(parts[c])]
        cb = kmeans(sub, M, replace(params, seed=params.seed + 1 + c))
        labels, _ = assign(sub, cb.centroids)
        return cb.centroids, np.bincount(labels, minlength=M)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(first_pass, range(n_chunks)))
    cents = np.concatenate([r[0] for r in results])
    counts = np.concatenate([r[1] for r in results]).astype(np.float64)
    keep = counts > 0
    second = kmeans(cents[keep], M, params, weights=counts[keep])
    return Codebook(
        second.centroids,
        passes_used=2,
        inertia=_final_inertia(x, np.ones(n), second.centroids),
        seed=params.seed,
        history=second.history,
    )


# b"SBWC", u32 version, u32 M, u32 D, u8 passes_used, i64 seed, f64 inertia,
# then M x D float64 little-endian.
_SBWC_MAGIC = b"SBWC"
_SBWC_VERSION = 1
_SBWC_HEADER = struct.Struct("<4sIIIBqd")


def codebook_to_bytes(cb: Codebook) -> bytes:
    head = _SBWC_HEADER.pack(
        _SBWC_MAGIC, _SBWC_VERSION, cb.size, cb.dim, cb.passes_used, cb.seed, cb.inertia
    )
    return head + np.ascontiguousarray(cb.centroids, dtype="<f8").tobytes()


def codebook_from_bytes(data: bytes) -> Codebook:
    if len(data) < _SBWC_HEADER.size or data[:4] != _SBWC_MAGIC:
        raise DataError("not a codebook artifact")
    _, version, m, d, passes, seed, inertia = _SBWC_HEADER.unpack_from(data)
    if version != _SBWC_VERSION:
        raise DataError(f"unsupported codebook artifact version {version}")
    body = data[_SBWC_HEADER.size :]
    if len(body) != m * d * 8:
        raise DataError(f"codebook payload has {len(body)} bytes, expected {m * d * 8}")
    cents = np.frombuffer(body, dtype="<f8").reshape(m, d).astype(np.float64)
    return Codebook(cents, passes_used=passes, inertia=inertia, seed=seed)


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def load_codebook(path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())


def export_codebook_csv(cb: Codebook, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["word"] + [f"d{j}" for j in range(cb.dim)])
        for i, row in enumerate(cb.centroids):
            wr.writerow([i] + [repr(float(v)) for v in row])
