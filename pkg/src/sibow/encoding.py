"""Descriptor -> visual code encoders: hard VQ, LLC and fast approximate LLC.

Codes are sparse. A :class:`CodeMatrix` stores one image's codes as a CSR
matrix with one row per descriptor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy import sparse

from .codebook import Codebook
from .errors import DimensionMismatchError, SingularSystemError
from .sift import DescriptorSet

DROP_BELOW = 1e-12
METHODS = ("vq", "llc", "fast_llc")
_BLOCK = 1024
_EXTRA_CANDIDATES = 4


@dataclass(frozen=True)
class LlcParams:
    lam: float = 1e-4
    sigma: float = 1.0
    knn: int = 5
    ridge_eps: float = 1e-8

    def __post_init__(self):
        if not self.lam > 0 or not self.sigma > 0:
            raise ValueError("LLC lambda and sigma must be positive")
        if self.knn < 1:
            raise ValueError("knn must be a positive integer")
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be non-negative")


@dataclass(frozen=True, eq=False)
class VisualCode:
    indices: np.ndarray
    weights: np.ndarray
    M: int

    def dense(self) -> np.ndarray:
        out = np.zeros(self.M)
        out[self.indices] = self.weights
        return out


@dataclass(eq=False)
class CodeMatrix:
    matrix: sparse.csr_matrix
    method: str = "vq"

    @property
    def M(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]

    def __iter__(self) -> Iterator[VisualCode]:
        m = self.matrix
        for i in range(m.shape[0]):
            lo, hi = m.indptr[i], m.indptr[i + 1]
            yield VisualCode(m.indices[lo:hi].copy(), m.data[lo:hi].copy(), self.M)

    @property
    def codes(self) -> list[VisualCode]:
        return list(self)

    @classmethod
    def from_codes(cls, codes, M: int, method: str = "vq") -> "CodeMatrix":
        indptr = [0]
        idx, val = [], []
        for c in codes:
            idx.extend(c.indices.tolist())
            val.extend(c.weights.tolist())
            indptr.append(len(idx))
        mat = sparse.csr_matrix(
            (np.array(val, dtype=np.float64), np.array(idx, dtype=np.int64), np.array(indptr)),
            shape=(len(indptr) - 1, M),
        )
        return cls(mat, method)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "index", "weight"])
            for r, code in enumerate(self):
                for j, w in zip(code.indices, code.weights):
                    wr.writerow([r, int(j), repr(float(w))])


def _centroids(B) -> np.ndarray:
    return B.centroids if isinstance(B, Codebook) else np.atleast_2d(np.asarray(B, dtype=np.float64))


def _rows(x, dim: int) -> np.ndarray:
    if isinstance(x, DescriptorSet):
        x = x.descriptors
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != dim:
        raise DimensionMismatchError(f"descriptor dimension {x.shape[1]} != codebook dimension {dim}")
    return x


def nearest(x: np.ndarray, B: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest centroids per row, ordered by exact
    Euclidean distance with ties broken by smaller index.

    Candidates are shortlisted with the expanded-norm distance and then
    re-ranked on directly computed differences.
    """
    n, m = x.shape[0], B.shape[0]
    k = min(k, m)
    shortlist = min(m, k + _EXTRA_CANDIDATES)
    b_sq = np.einsum("ij,ij->i", B, B)
    out = np.empty((n, k), dtype=np.intp)
    for s in range(0, n, _BLOCK):
        blk = x[s : s + _BLOCK]
        approx = b_sq[None, :] - 2.0 * blk @ B.T
        if shortlist < m:
            cand = np.argpartition(approx, shortlist - 1, axis=1)[:, :shortlist]
        else:
            cand = np.broadcast_to(np.arange(m), (blk.shape[0], m))
        diff = B[cand] - blk[:, None, :]
        exact = np.einsum("ijk,ijk->ij", diff, diff)
        for r in range(blk.shape[0]):
            order = np.lexsort((cand[r], exact[r]))
            out[s + r] = cand[r][order[:k]]
    return out


def _vq_matrix(x, B) -> sparse.csr_matrix:
    idx = nearest(x, B, 1)[:, 0]
    n = x.shape[0]
    return sparse.csr_matrix((np.ones(n), idx, np.arange(n + 1)), shape=(n, B.shape[0]))


def encode_vq(x, B) -> VisualCode:
    """One-hot code at the nearest centroid (smallest index on ties)."""
    C = _centroids(B)
    row = _vq_matrix(_rows(x, C.shape[1]), C)
    return VisualCode(row.indices.copy(), row.data.copy(), C.shape[0])


def _sparsify(w: np.ndarray, cols: np.ndarray | None = None):
    keep = np.abs(w) >= DROP_BELOW
    cols = np.arange(w.shape[0]) if cols is None else cols
    return cols[keep], w[keep]


def _llc_weights(x: np.ndarray, C: np.ndarray, p: LlcParams) -> np.ndarray:
    z = C - x
    dist = np.sqrt(np.einsum("ij,ij->i", z, z))
    # max-shifted locality adaptor; far bases get d -> 1, near ones d -> 0
    d = np.exp((dist - dist.max()) / p.sigma)
    A = z @ z.T + p.lam * np.diag(d * d)
    try:
        w = np.linalg.solve(A, np.ones(C.shape[0]))
    except np.linalg.LinAlgError:
        raise SingularSystemError("LLC system is singular; the codebook is ill-conditioned") from None
    total = w.sum()
    if not np.all(np.isfinite(w)) or total == 0:
        raise SingularSystemError("LLC system is singular; the codebook is ill-conditioned")
    return w / total


def encode_llc(x, B, p: LlcParams = LlcParams()) -> VisualCode:
    """Full locality-constrained linear code under the sum-to-one constraint."""
    C = _centroids(B)
    xr = _rows(x, C.shape[1])[0]
    idx, w = _sparsify(_llc_weights(xr, C, p))
    return VisualCode(idx, w, C.shape[0])


def _fast_llc_rows(x: np.ndarray, C: np.ndarray, p: LlcParams):
    k = min(p.knn, C.shape[0])
    if p.knn > C.shape[0]:
        raise ValueError(f"knn={p.knn} exceeds codebook size {C.shape[0]}")
    nn = nearest(x, C, k)
    if k == 1:
        return nn, np.ones((x.shape[0], 1))
    z = C[nn] - x[:, None, :]
    G = np.einsum("nkd,njd->nkj", z, z)
    tr = np.trace(G, axis1=1, axis2=2)
    reg = p.ridge_eps * np.where(tr > 0, tr, 1.0)
    A = G + reg[:, None, None] * np.eye(k)
    try:
        w = np.linalg.solve(A, np.ones((x.shape[0], k, 1)))[..., 0]
    except np.linalg.LinAlgError:
        raise SingularSystemError("local Gram system is singular; raise ridge_eps") from None
    total = w.sum(axis=1)
    if not np.all(np.isfinite(w)) or np.any(total == 0):
        raise SingularSystemError("local Gram system is singular; raise ridge_eps")
    return nn, w / total[:, None]


def encode_fast_llc(x, B, p: LlcParams = LlcParams()) -> VisualCode:
    """Constrained least squares on the ``knn`` nearest bases, zero elsewhere."""
    C = _centroids(B)
    nn, w = _fast_llc_rows(_rows(x, C.shape[1]), C, p)
    order = np.argsort(nn[0])
    idx, wt = _sparsify(w[0][order], nn[0][order])
    return VisualCode(idx, wt, C.shape[0])


def encode_image(descriptors, B, method: str = "vq", p: LlcParams = LlcParams()) -> CodeMatrix:
    """Encode every descriptor of one image; row order follows the input."""
    if method not in METHODS:
        raise ValueError(f"unknown encoder {method!r}; expected one of {METHODS}")
    C = _centroids(B)
    M = C.shape[0]
    raw = descriptors.descriptors if isinstance(descriptors, DescriptorSet) else np.asarray(descriptors)
    if raw.size == 0:
        return CodeMatrix(sparse.csr_matrix((0, M)), method)
    x = _rows(raw, C.shape[1])
    if method == "vq":
        return CodeMatrix(_vq_matrix(x, C), method)
    if method == "llc":
        return CodeMatrix.from_codes((encode_llc(r, C, p) for r in x), M, method)
    nn, w = _fast_llc_rows(x, C, p)
    codes = []
    for r in range(x.shape[0]):
        order = np.argsort(nn[r])
        idx, wt = _sparsify(w[r][order], nn[r][order])
        codes.append(VisualCode(idx, wt, M))
    return CodeMatrix.from_codes(codes, M, method)
