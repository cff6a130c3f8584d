"""SBWM multiclass-model artifact.

Layout: b"SBWM", u32 version, u32 header length, UTF-8 JSON header (sorted
keys), then float64 little-endian payload: the training feature matrix
followed by the dual coefficients of every component, pi by pi, in header
order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .wsvm import BinaryWsvmModel, KernelSpec, MulticlassModel, PiSeriesModel

MAGIC = b"SBWM"
VERSION = 1


def _key_to_json(key):
    return list(key) if isinstance(key, tuple) else [key]


def _key_from_json(v):
    return tuple(v) if len(v) == 2 else v[0]


def model_to_bytes(model: MulticlassModel) -> bytes:
    n, d = model.X.shape
    comps, payload = [], [np.ascontiguousarray(model.X, dtype="<f8").tobytes()]
    for key, series in model.components.items():
        rows = model.component_rows[key]
        comps.append(
            {
                "key": _key_to_json(key),
                "rows": [int(r) for r in rows],
                "y": [int(v) for v in series.models[0].y],
                "bias": [m.bias for m in series.models],
            }
        )
        for m in series.models:
            payload.append(np.ascontiguousarray(m.alpha, dtype="<f8").tobytes())
    header = {
        "scheme": model.scheme,
        "K": model.K,
        "baseline_class": model.baseline_class,
        "baseline_rule": model.baseline_rule,
        "kernel": {"kind": model.kernel.kind, "gamma": model.kernel.gamma},
        "lambda": model.lam,
        "pis": [float(p) for p in model.pis],
        "class_counts": [int(c) for c in model.class_counts],
        "pooling_id": model.pooling_id,
        "features_hash": model.features_hash,
        "prob_rule": model.prob_rule,
        "n": n,
        "d": d,
        "components": comps,
        "meta": model.meta,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(raw)) + raw + b"".join(payload)


def model_from_bytes(data: bytes) -> MulticlassModel:
    if data[:4] != MAGIC:
        raise DataError("not a model artifact")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported model artifact version {version}")
    h = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    n, d = h["n"], h["d"]
    X = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    kernel = KernelSpec(h["kernel"]["kind"], h["kernel"]["gamma"])
    pis = np.array(h["pis"], dtype=np.float64)
    components, rows_of = {}, {}
    for c in h["components"]:
        key = _key_from_json(c["key"])
        rows = np.array(c["rows"], dtype=np.intp)
        y = np.array(c["y"], dtype=np.float64)
        models = []
        for pi, bias in zip(pis, c["bias"]):
            alpha = np.frombuffer(data, dtype="<f8", count=rows.size, offset=pos).astype(np.float64)
            pos += 8 * rows.size
            models.append(BinaryWsvmModel(alpha, y, bias, float(pi), h["lambda"], kernel, np.arange(rows.size)))
        components[key] = PiSeriesModel(pis, models, X[rows])
        rows_of[key] = rows
    if pos != len(data):
        raise DataError("model artifact has trailing or missing bytes")
    return MulticlassModel(
        scheme=h["scheme"],
        K=h["K"],
        pis=pis,
        lam=h["lambda"],
        kernel=kernel,
        X=X,
        components=components,
        component_rows=rows_of,
        class_counts=np.array(h["class_counts"], dtype=np.int64),
        baseline_class=h["baseline_class"],
        baseline_rule=h["baseline_rule"],
        pooling_id=h["pooling_id"],
        features_hash=h["features_hash"],
        prob_rule=h["prob_rule"],
        meta=h["meta"],
    )


def save_model(model: MulticlassModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MulticlassModel:
    return model_from_bytes(Path(path).read_bytes())
