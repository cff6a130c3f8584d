"""Classification and calibration metrics.

All values are raw proportions in [0, 1], not percentages.
Class labels are 1-based.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

DEFAULT_BINS = 10


@dataclass(frozen=True, eq=False)
class EvalRecord:
    true_label: int
    predicted_argmax: int
    probs: np.ndarray
    predicted_maxvote: int | None = None
    image_id: str = ""


@dataclass(frozen=True)
class CalibrationBin:
    count: int
    accuracy: float
    confidence: float


@dataclass(frozen=True)
class CalibrationReport:
    bins: list[CalibrationBin]
    ece: float
    n: int

    @property
    def bin_count(self) -> int:
        return len(self.bins)


def _nonempty(records):
    if len(records) == 0:
        raise ValueError("no evaluation records")


def _predictions(records, rule):
    if rule == "argmax":
        return np.array([r.predicted_argmax for r in records])
    if rule == "maxvote":
        if any(r.predicted_maxvote is None for r in records):
            raise ValueError("max-vote predictions are missing on some records")
        return np.array([r.predicted_maxvote for r in records])
    raise ValueError("rule must be 'argmax' or 'maxvote'")


def _num_classes(records) -> int:
    return len(records[0].probs)


def misclassification(records: Sequence[EvalRecord], rule: str = "argmax") -> float:
    _nonempty(records)
    pred = _predictions(records, rule)
    truth = np.array([r.true_label for r in records])
    return int(np.count_nonzero(pred != truth)) / len(records)


def confusion_matrix(records: Sequence[EvalRecord], rule: str = "argmax", K: int | None = None) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    _nonempty(records)
    K = K or _num_classes(records)
    pred = _predictions(records, rule)
    cm = np.zeros((K, K), dtype=np.int64)
    for r, p in zip(records, pred):
        cm[r.true_label - 1, p - 1] += 1
    return cm


def macro_prf(records: Sequence[EvalRecord], rule: str = "argmax", K: int | None = None):
    """Unweighted means of per-class precision, recall and F1 (0/0 -> 0)."""
    cm = confusion_matrix(records, rule, K).astype(np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(prec.mean()), float(rec.mean()), float(f1.mean())


def ece(records: Sequence[EvalRecord], bin_count: int = DEFAULT_BINS) -> CalibrationReport:
    """Expected calibration error over equal-width bins ((m-1)/M, m/M].

    Confidence is the probability of the argmax prediction. A confidence of
    exactly 0 is put in the first bin.
    """
    _nonempty(records)
    if bin_count < 1:
        raise ValueError("bin_count must be at least 1")
    conf = np.array([float(r.probs[r.predicted_argmax - 1]) for r in records])
    hit = np.array([r.predicted_argmax == r.true_label for r in records], dtype=np.float64)
    edges = np.arange(1, bin_count + 1) / bin_count
    idx = np.minimum(np.searchsorted(edges, conf, side="left"), bin_count - 1)
    bins, total = [], 0.0
    for m in range(bin_count):
        sel = idx == m
        c = int(sel.sum())
        if c == 0:
            bins.append(CalibrationBin(0, 0.0, 0.0))
            continue
        acc = float(hit[sel].mean())
        cf = float(conf[sel].mean())
        bins.append(CalibrationBin(c, acc, cf))
        total += c * abs(acc - cf)
    return CalibrationReport(bins, total / len(records), len(records))


def _pair_auc(scores: np.ndarray, is_pos: np.ndarray) -> float:
    ranks = rankdata(scores)  # midranks on ties
    n_pos = int(is_pos.sum())
    n_neg = is_pos.size - n_pos
    return float((ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def hand_till_auc(records: Sequence[EvalRecord], K: int | None = None) -> float:
    """Hand & Till (2001) multiclass AUC: mean over class pairs of the
    averaged one-way rank AUCs."""
    _nonempty(records)
    K = K or _num_classes(records)
    if K < 2:
        raise ValueError("AUC needs at least two classes")
    truth = np.array([r.true_label for r in records])
    P = np.stack([np.asarray(r.probs, dtype=np.float64) for r in records])
    missing = [k for k in range(1, K + 1) if not np.any(truth == k)]
    if missing:
        raise ValueError(f"classes {missing} are absent from the records")
    total = 0.0
    for j, k in combinations(range(1, K + 1), 2):
        sel = (truth == j) | (truth == k)
        a_jk = _pair_auc(P[sel, j - 1], truth[sel] == j)
        a_kj = _pair_auc(P[sel, k - 1], truth[sel] == k)
        total += 0.5 * (a_jk + a_kj)
    return 2.0 * total / (K * (K - 1))


def evaluation_report(records: Sequence[EvalRecord], bin_count: int = DEFAULT_BINS, K: int | None = None) -> dict:
    K = K or _num_classes(records)
    prec, rec, f1 = macro_prf(records, "argmax", K)
    cal = ece(records, bin_count)
    cm = confusion_matrix(records, "argmax", K)
    has_vote = all(r.predicted_maxvote is not None for r in records)
    try:
        auc = hand_till_auc(records, K)
    except ValueError:
        auc = None
    return {
        "n": len(records),
        "K": K,
        "te1": misclassification(records, "argmax"),
        "te2": misclassification(records, "maxvote") if has_vote else None,
        "precision": prec,
        "recall": rec,
        "f1": f1,
        "ece": cal.ece,
        "auc": auc,
        "confusion": cm.tolist(),
        "reliability": [
            {"bin": m + 1, "count": b.count, "accuracy": b.accuracy, "confidence": b.confidence}
            for m, b in enumerate(cal.bins)
        ],
    }


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_reliability_csv(report: dict, path) -> None:
    M = len(report["reliability"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bin", "lower", "upper", "count", "accuracy", "confidence"])
        for row in report["reliability"]:
            m = row["bin"]
            wr.writerow([m, (m - 1) / M, m / M, row["count"], row["accuracy"], row["confidence"]])
