"""Weighted kernel SVMs and multiclass class-probability estimation.

A binary weighted SVM trained at weight ``pi`` puts ``1 - pi`` on the
positive class and ``pi`` on the negative class; its sign tracks
``sign(p(+1|x) - pi)``. Training a series over an increasing ``pi`` grid and
locating the sign change brackets ``p(+1|x)``. Multiclass probabilities are
assembled from such series by pairwise coupling, baseline learning (B1/B2,
with optional pairwise reconstruction "bp") or one-vs-all.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from ._smo import smo
from .errors import CompatibilityError, ConvergenceError, DataError, DimensionMismatchError, NumericalError

log = logging.getLogger(__name__)

SCHEMES = ("pairwise", "baseline_b1", "baseline_b2", "bp", "ova")
KKT_TOL = 1e-3
Q_CLAMP = 1e-6
EGKL_FLOOR = 1e-6
DEFAULT_GRID_SIZE = 19


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError("rbf gamma must be positive and finite")


def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatchError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    d = (
        np.einsum("ij,ij->i", A, A)[:, None]
        + np.einsum("ij,ij->i", B, B)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.maximum(d, 0.0)


def kernel_matrix(A, B, k: KernelSpec) -> np.ndarray:
    if k.kind == "linear":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if A.shape[1] != B.shape[1]:
            raise DimensionMismatchError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
        return A @ B.T
    return np.exp(-k.gamma * sq_dists(A, B))


def default_pi_grid(size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    return np.arange(1, size + 1) / (size + 1)


def _check_grid(pis) -> np.ndarray:
    pis = np.asarray(pis, dtype=np.float64)
    if pis.ndim != 1 or pis.size == 0 or pis[0] <= 0 or pis[-1] >= 1 or np.any(np.diff(pis) <= 0):
        raise ValueError("pi grid must be strictly increasing inside (0, 1)")
    return pis


@dataclass(eq=False)
class BinaryWsvmModel:
    alpha: np.ndarray
    y: np.ndarray
    bias: float
    pi: float
    lam: float
    kernel: KernelSpec
    training_refs: np.ndarray
    iterations: int = 0
    kkt_violation: float = 0.0

    @property
    def coef(self) -> np.ndarray:
        return self.alpha * self.y

    def decision(self, K_train_x: np.ndarray) -> np.ndarray:
        """f(x) given kernel values between training rows and query rows."""
        return self.coef @ K_train_x + self.bias


def box_bounds(y: np.ndarray, pi: float, lam: float) -> np.ndarray:
    n = y.shape[0]
    w = np.where(y > 0, 1.0 - pi, pi)
    return w / (n * lam)


def _solve(K, y, pi, lam, kernel, refs, max_iter=None) -> BinaryWsvmModel:
    n = y.shape[0]
    C = box_bounds(y, pi, lam)
    cap = max_iter if max_iter is not None else max(1_000_000, 200 * n)
    alpha, bias, it, gap = smo(np.ascontiguousarray(K), y.astype(np.float64), C, KKT_TOL, cap)
    if not gap < KKT_TOL:
        raise ConvergenceError(f"SMO hit the {cap}-iteration cap at pi={pi}", float(gap))
    return BinaryWsvmModel(alpha, y.astype(np.float64), float(bias), float(pi), float(lam), kernel, refs, it, float(gap))


def dual_objective(K, y, alpha) -> float:
    """Dual objective in minimisation form: 0.5 a'Qa - sum(a)."""
    v = alpha * y
    return float(0.5 * v @ K @ v - alpha.sum())


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("binary labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DataError("both classes must be present to train a binary wSVM")
    return y


def train_binary_wsvm(features, labels, pi: float, lam: float, k: KernelSpec, max_iter=None) -> BinaryWsvmModel:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = _binary_labels(labels)
    if not 0 < pi < 1:
        raise ValueError("pi must lie in (0, 1)")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    K = kernel_matrix(X, X, k)
    return _solve(K, y, pi, lam, k, np.arange(X.shape[0]), max_iter)


@dataclass(eq=False)
class PiSeriesModel:
    pis: np.ndarray
    models: list[BinaryWsvmModel]
    X: np.ndarray  # training rows of this component, shared by the series

    def decision_values(self, Xq: np.ndarray) -> np.ndarray:
        """Matrix of f_pi(x), shape (len(pis), n_query)."""
        Kx = kernel_matrix(self.X, Xq, self.models[0].kernel)
        return np.stack([m.decision(Kx) for m in self.models])


def _series_from_kernel(K, X, y, pis, lam, kernel) -> PiSeriesModel:
    refs = np.arange(X.shape[0])
    models = [_solve(K, y, pi, lam, kernel, refs) for pi in pis]
    return PiSeriesModel(pis, models, X)


def train_pi_series(features, labels, grid=None, lam: float = 1.0, k: KernelSpec = KernelSpec()) -> PiSeriesModel:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = _binary_labels(labels)
    pis = _check_grid(default_pi_grid() if grid is None else grid)
    return _series_from_kernel(kernel_matrix(X, X, k), X, y, pis, lam, k)


def probs_from_decisions(F: np.ndarray, pis: np.ndarray, rule: str = "largest") -> np.ndarray:
    """Bracket-midpoint estimates from a (len(pis), n) matrix of decision values.

    ``rule="largest"`` takes m* as the largest grid index with f >= 0;
    ``rule="count"`` takes m* as the number of non-negative decisions. Both
    agree whenever the sign sequence is monotone in pi.
    """
    pos = np.asarray(F) >= 0
    n_pi = pis.shape[0]
    if rule == "largest":
        flipped = pos[::-1]
        any_pos = flipped.any(axis=0)
        m_star = np.where(any_pos, n_pi - np.argmax(flipped, axis=0), 0)
    elif rule == "count":
        m_star = pos.sum(axis=0)
    else:
        raise ValueError("rule must be 'largest' or 'count'")
    ext = np.concatenate([[0.0], pis, [1.0]])
    return 0.5 * (ext[m_star] + ext[m_star + 1])


def estimate_binary_prob(model: PiSeriesModel, x, rule: str = "largest"):
    """Estimate p(+1|x). ``x`` may be one feature vector (returns a float),
    an ``ImageFeature``, or a matrix of rows (returns an array)."""
    vals = getattr(x, "values", x)
    Xq = np.asarray(vals, dtype=np.float64)
    dim = model.X.shape[1]
    single = Xq.ndim == 0 or (Xq.ndim == 1 and Xq.size == dim)
    p = probs_from_decisions(model.decision_values(Xq.reshape(-1, dim)), model.pis, rule)
    return float(p[0]) if single else p


# ----------------------------------------------------------------- coupling


def couple_anchor(table: np.ndarray, anchor: int) -> np.ndarray:
    """Class probabilities from conditionals against one anchor class.

    ``table[j, k]`` holds q_{j|(j,k)}. Indices are 0-based.
    """
    K = table.shape[0]
    r = np.empty(K)
    for j in range(K):
        r[j] = 1.0 if j == anchor else table[j, anchor] / table[anchor, j]
    return r / r.sum()


def couple_pairwise(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Median over all anchors, renormalised. Returns (probs, per-anchor probs)."""
    K = table.shape[0]
    per = np.stack([couple_anchor(table, k) for k in range(K)])
    p = np.median(per, axis=0)
    return p / p.sum(), per


def table_from_ratios(r: np.ndarray) -> np.ndarray:
    """Full conditional table q_{j|(j,j')} = r_j / (r_j + r_j')."""
    r = np.asarray(r, dtype=np.float64)
    T = r[:, None] / (r[:, None] + r[None, :])
    # enforce exact complementarity
    iu = np.triu_indices(r.shape[0], 1)
    T[iu[1], iu[0]] = 1.0 - T[iu]
    np.fill_diagonal(T, 0.5)
    return T


def table_from_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    T = p[:, None] / (p[:, None] + p[None, :])
    np.fill_diagonal(T, 0.5)
    return T


# --------------------------------------------------------------- multiclass


@dataclass(eq=False)
class ProbabilityEstimate:
    probs: np.ndarray
    pairwise_table: np.ndarray | None = None  # [j, j'] = q_{j|(j,j')}, 0-based


@dataclass(eq=False)
class MulticlassModel:
    scheme: str
    K: int
    pis: np.ndarray
    lam: float
    kernel: KernelSpec
    X: np.ndarray
    components: dict
    component_rows: dict
    class_counts: np.ndarray
    baseline_class: int | None = None  # 1-based
    baseline_rule: str | None = None
    pooling_id: str | None = None
    features_hash: str | None = None
    prob_rule: str = "largest"
    meta: dict = field(default_factory=dict)


def class_counts(labels, K) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.intp) - 1, minlength=K)[:K]


def baseline_b1(labels, K) -> int:
    """Most abundant class (1-based), smallest index on ties."""
    return int(np.argmax(class_counts(labels, K))) + 1


def baseline_b2(X, labels, K) -> int:
    """Class whose mean feature has the smallest summed distance to the other class means."""
    labels = np.asarray(labels)
    mus = np.stack([X[labels == k].mean(axis=0) for k in range(1, K + 1)])
    D = np.linalg.norm(mus[:, None, :] - mus[None, :, :], axis=2)
    return int(np.argmin(D.sum(axis=1))) + 1


def _baseline_rule(scheme, baseline_rule):
    if scheme in ("pairwise", "ova"):
        return None
    return {"baseline_b1": "b1", "baseline_b2": "b2"}.get(scheme, baseline_rule)


def _component_plan(scheme, labels, K, X, baseline_rule):
    """Return (component key -> (positive classes, negative classes)), k*."""
    classes = range(1, K + 1)
    if scheme == "pairwise":
        return {(j, jj): ((j,), (jj,)) for j, jj in combinations(classes, 2)}, None
    if scheme == "ova":
        return {j: ((j,), tuple(c for c in classes if c != j)) for j in classes}, None
    rule = _baseline_rule(scheme, baseline_rule)
    kstar = baseline_b1(labels, K) if rule == "b1" else baseline_b2(X, labels, K)
    return {(j, kstar): ((j,), (kstar,)) for j in classes if j != kstar}, kstar


def fit_multiclass(
    features,
    labels,
    scheme: str = "pairwise",
    grid=None,
    lam: float = 1.0,
    k: KernelSpec = KernelSpec(),
    K: int | None = None,
    baseline_rule: str = "b1",
    workers: int = 1,
    sq: np.ndarray | None = None,
    prob_rule: str = "largest",
) -> MulticlassModel:
    """Train every component pi-series of ``scheme``.

    ``labels`` are 1-based class indices. ``sq`` optionally supplies the
    precomputed squared-distance matrix of ``features`` (reused across a
    hyperparameter grid).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if baseline_rule not in ("b1", "b2"):
        raise ValueError("baseline_rule must be 'b1' or 'b2'")
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    K = int(K if K is not None else y.max())
    counts = class_counts(y, K)
    if K < 2 or np.any(counts == 0) or y.min() < 1 or y.max() > K:
        raise DataError(f"every class 1..{K} must be present; counts {counts.tolist()}")
    pis = _check_grid(default_pi_grid() if grid is None else grid)
    plan, kstar = _component_plan(scheme, y, K, X, baseline_rule)

    if k.kind == "rbf":
        sq = sq_dists(X, X) if sq is None else sq
        full = np.exp(-k.gamma * sq)
    else:
        full = X @ X.T

    keys = list(plan)
    rows_of = {}
    for key in keys:
        pos, neg = plan[key]
        rows = np.flatnonzero(np.isin(y, pos + neg))
        yb = np.where(np.isin(y[rows], pos), 1.0, -1.0)
        if (yb > 0).sum() < 1 or (yb < 0).sum() < 1 or rows.size < 2:
            raise DataError(f"component {key} has too few points per side")
        rows_of[key] = (rows, yb)

    def train(key):
        rows, yb = rows_of[key]
        Kc = full[np.ix_(rows, rows)]
        return _series_from_kernel(Kc, X[rows], yb, pis, lam, k)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        series = list(ex.map(train, keys))
    return MulticlassModel(
        scheme=scheme,
        K=K,
        pis=pis,
        lam=float(lam),
        kernel=k,
        X=X,
        components=dict(zip(keys, series)),
        component_rows={key: rows_of[key][0] for key in keys},
        class_counts=counts,
        baseline_class=kstar,
        baseline_rule=_baseline_rule(scheme, baseline_rule),
        prob_rule=prob_rule,
    )


def _clamp(q):
    return np.clip(q, Q_CLAMP, 1.0 - Q_CLAMP)


def predict_proba_matrix(model: MulticlassModel, Xq) -> tuple[np.ndarray, np.ndarray | None]:
    """Probabilities for each query row, shape (n, K), and the conditional
    tables (n, K, K) when the scheme provides one."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
    if Xq.shape[1] != model.X.shape[1]:
        raise DimensionMismatchError(f"query dimension {Xq.shape[1]} != model dimension {model.X.shape[1]}")
    n, K = Xq.shape[0], model.K
    # kernel between all training rows and queries, sliced per component
    Kx_full = kernel_matrix(model.X, Xq, model.kernel)

    def series_prob(key):
        s = model.components[key]
        Kx = Kx_full[model.component_rows[key]]
        F = np.stack([m.decision(Kx) for m in s.models])
        return _clamp(probs_from_decisions(F, s.pis, model.prob_rule))

    if model.scheme == "ova":
        P = np.stack([series_prob(j) for j in range(1, K + 1)], axis=1)
        return P / P.sum(axis=1, keepdims=True), None

    if model.scheme == "pairwise":
        T = np.full((n, K, K), 0.5)
        for (j, jj) in model.components:
            q = series_prob((j, jj))
            T[:, j - 1, jj - 1] = q
            T[:, jj - 1, j - 1] = 1.0 - q
        P = np.stack([couple_pairwise(T[i])[0] for i in range(n)])
        return P, T

    kstar = model.baseline_class
    r = np.ones((n, K))
    for (j, _) in model.components:
        q = series_prob((j, kstar))
        r[:, j - 1] = q / (1.0 - q)
    P = r / r.sum(axis=1, keepdims=True)
    if model.scheme == "bp":
        T = np.stack([table_from_ratios(r[i]) for i in range(n)])
        return P, T
    return P, None


def predict_proba(model: MulticlassModel, x) -> ProbabilityEstimate:
    pid = getattr(x, "pooling_id", None)
    if pid is not None and model.pooling_id is not None and pid != model.pooling_id:
        raise CompatibilityError(f"feature pooling {pid!r} does not match model pooling {model.pooling_id!r}")
    P, T = predict_proba_matrix(model, getattr(x, "values", x))
    return ProbabilityEstimate(P[0], None if T is None else T[0])


def classify(est: ProbabilityEstimate, rule: str = "argmax") -> int:
    """1-based class label by argmax or by pairwise max voting."""
    p = np.asarray(est.probs)
    if rule == "argmax":
        return int(np.argmax(p)) + 1
    if rule != "maxvote":
        raise ValueError("rule must be 'argmax' or 'maxvote'")
    if est.pairwise_table is None:
        raise ValueError("max voting needs a pairwise conditional table")
    return maxvote(est.pairwise_table, p)


def maxvote(T: np.ndarray, p: np.ndarray) -> int:
    K = T.shape[0]
    votes = np.zeros(K)
    for j, jj in combinations(range(K), 2):
        q = T[j, jj]
        if q > 0.5:
            votes[j] += 1
        elif q < 0.5:
            votes[jj] += 1
        else:
            votes[j] += 0.5
            votes[jj] += 0.5
    tied = np.flatnonzero(votes == votes.max())
    return int(tied[np.argmax(p[tied])]) + 1


# -------------------------------------------------------------------- tuning


def median_heuristic_gamma(X) -> float:
    """1 / median of the non-zero pairwise squared distances."""
    sq = sq_dists(X, X)
    vals = sq[np.triu_indices(sq.shape[0], 1)]
    vals = vals[vals > 0]
    if vals.size == 0:
        return 1.0
    return 1.0 / float(np.median(vals))


def default_gamma_grid(X) -> np.ndarray:
    return 2.0 ** np.arange(-8, 3) * median_heuristic_gamma(X)


def default_lambda_grid() -> np.ndarray:
    return 2.0 ** np.arange(-10, 5)


def stratified_halves(labels, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random 50/50 split, per class, so both halves see every class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    a, b = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        h = (idx.size + 1) // 2
        a.append(idx[:h])
        b.append(idx[h:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def egkl(P: np.ndarray, labels) -> float:
    """Held-out negative log-likelihood, probabilities floored at 1e-6."""
    y = np.asarray(labels, dtype=np.intp) - 1
    p = np.maximum(P[np.arange(y.size), y], EGKL_FLOOR)
    return float(-np.mean(np.log(p)))


@dataclass(eq=False)
class TuneResult:
    lam: float
    gamma: float
    egkl: float
    model: MulticlassModel
    table: list[dict]
    train_idx: np.ndarray
    tune_idx: np.ndarray


def tune_egkl(
    features,
    labels,
    scheme: str = "pairwise",
    lambda_grid: Sequence[float] | None = None,
    gamma_grid: Sequence[float] | None = None,
    split_seed: int = 0,
    grid=None,
    kernel_kind: str = "rbf",
    K: int | None = None,
    baseline_rule: str = "b1",
    workers: int = 1,
    prob_rule: str = "largest",
) -> TuneResult:
    """Grid search over (lambda, gamma) minimising held-out EGKL.

    The data are split 50/50 into train and tune halves; each grid point is
    fitted on the train half and scored on the tune half. Ties go to the
    smaller lambda, then the smaller gamma. The returned model is the winning
    train-half fit.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    K = int(K if K is not None else y.max())
    tr, tu = stratified_halves(y, split_seed)
    Xtr, ytr, Xtu, ytu = X[tr], y[tr], X[tu], y[tu]
    lams = np.sort(np.asarray(default_lambda_grid() if lambda_grid is None else lambda_grid, dtype=float))
    if kernel_kind == "linear":
        gammas = np.array([1.0])
    else:
        gammas = np.sort(np.asarray(default_gamma_grid(Xtr) if gamma_grid is None else gamma_grid, dtype=float))
    if lams.size == 0 or gammas.size == 0:
        raise ValueError("hyperparameter grids must be non-empty")

    sq = sq_dists(Xtr, Xtr) if kernel_kind == "rbf" else None
    table, best = [], None
    for lam in lams:
        for gamma in gammas:
            kern = KernelSpec(kernel_kind, float(gamma))
            try:
                m = fit_multiclass(
                    Xtr, ytr, scheme, grid, float(lam), kern, K, baseline_rule, workers, sq, prob_rule
                )
                P, _ = predict_proba_matrix(m, Xtu)
                score = egkl(P, ytu)
            except (NumericalError, DataError) as exc:
                log.warning("grid point lambda=%g gamma=%g failed: %s", lam, gamma, exc)
                table.append({"lambda": float(lam), "gamma": float(gamma), "egkl": None, "error": str(exc)})
                continue
            table.append({"lambda": float(lam), "gamma": float(gamma), "egkl": score})
            if best is None or score < best[2]:
                best = (float(lam), float(gamma), score, m)
    if best is None:
        raise NumericalError("every hyperparameter grid point failed")
    lam, gamma, score, model = best
    return TuneResult(lam, gamma, score, model, table, tr, tu)
