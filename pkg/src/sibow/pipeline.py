"""End-to-end orchestration: extract -> codebook -> encode -> train -> evaluate.

Every stage writes its artifacts plus a ``<stage>.meta.json`` sidecar holding
the hash of everything the stage consumed and the SHA-256 of each output. A
stage is skipped when the sidecar matches, so resumed runs reproduce cold
runs byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import codebook as cbmod
from . import metrics
from .encoding import METHODS, LlcParams, encode_image
from .errors import CompatibilityError, ConfigError, DataError, SibowError
from .imageio import read_pgm, standardize
from .modelio import load_model, model_to_bytes
from .pooling import (
    POOLING_IDS,
    FeatureMatrix,
    featurize,
    features_to_bytes,
    features_to_csv,
    load_features,
    source_of,
)
from .sift import DescriptorSet, SiftParams, extract, import_vlfeat, load_descriptor_sets, save_descriptor_sets
from .wsvm import (
    SCHEMES,
    KernelSpec,
    classify,
    default_pi_grid,
    fit_multiclass,
    maxvote,
    median_heuristic_gamma,
    predict_proba_matrix,
    stratified_halves,
    tune_egkl,
    ProbabilityEstimate,
)

log = logging.getLogger(__name__)

STAGES = ("extract", "split", "codebook", "encode", "train", "evaluate")


class StageFailure(SibowError):
    """A stage failed on a particular input; ``cause`` keeps the original error."""

    def __init__(self, stage: str, input_id: str | None, cause: Exception):
        where = f" on {input_id!r}" if input_id else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.input_id = input_id
        self.cause = cause


# ------------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    descriptor_source: str = "builtin"
    descriptor_dir: str | None = None
    image_size: int = 384
    sift: dict = field(default_factory=dict)
    codebook_size: int = 64
    kmeans: dict = field(default_factory=dict)
    passes: int | None = None
    chunks: int | None = None
    encoder: str = "vq"
    llc: dict | None = None
    pooling_id: str = "sum-LTF"
    scheme: str = "ova"
    baseline_rule: str = "b1"
    pi_grid_size: int = 19
    kernel: str = "rbf"
    lambda_grid: list | None = None
    gamma_grid: list | None = None
    gamma_grid_log2: list | None = None
    lam: float | None = None
    gamma: float | None = None
    split_seed: int = 0
    kmeans_seed: int = 0
    tune_seed: int = 0
    train_fraction: float = 0.8
    stratified: bool = True
    repeats: int = 10
    ece_bins: int = 10
    classes: list | None = None
    workers: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.descriptor_source in ("builtin", "vlfeat_import"), "descriptor_source must be builtin or vlfeat_import")
        need(self.encoder in METHODS, f"encoder must be one of {METHODS}")
        need(not (self.encoder == "vq" and self.llc), "llc parameters are only valid with an llc or fast_llc encoder")
        need(self.pooling_id in POOLING_IDS, f"pooling_id must be one of {POOLING_IDS}")
        need(self.scheme in SCHEMES, f"scheme must be one of {SCHEMES}")
        need(self.baseline_rule in ("b1", "b2"), "baseline_rule must be b1 or b2")
        need(self.kernel in ("rbf", "linear"), "kernel must be rbf or linear")
        need(isinstance(self.codebook_size, int) and self.codebook_size >= 1, "codebook_size must be a positive integer")
        need(isinstance(self.image_size, int) and self.image_size >= 16, "image_size must be an integer >= 16")
        need(isinstance(self.pi_grid_size, int) and self.pi_grid_size >= 1, "pi_grid_size must be a positive integer")
        need(0 < self.train_fraction < 1, "train_fraction must lie in (0, 1)")
        need(isinstance(self.repeats, int) and self.repeats >= 1, "repeats must be a positive integer")
        need(isinstance(self.ece_bins, int) and self.ece_bins >= 1, "ece_bins must be a positive integer")
        need(self.passes in (None, 1, 2), "passes must be 1, 2 or null")
        need(self.workers is None or (isinstance(self.workers, int) and self.workers >= 1), "workers must be >= 1")
        need((self.lam is None) == (self.gamma is None) or self.kernel == "linear",
             "fixed lam and gamma must be given together")
        try:
            self.sift_params()
            self.kmeans_params()
            self.llc_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def sift_params(self) -> SiftParams:
        return SiftParams(**self.sift)

    def kmeans_params(self) -> cbmod.KMeansParams:
        return cbmod.KMeansParams(seed=self.kmeans_seed, **self.kmeans)

    def llc_params(self) -> LlcParams:
        return LlcParams(**(self.llc or {}))

    def fixed_hyperparameters(self) -> bool:
        return self.lam is not None and (self.gamma is not None or self.kernel == "linear")

    def effective_workers(self, override: int | None = None) -> int:
        return override or self.workers or (os.cpu_count() or 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")  # results never depend on it
        return d


# ----------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    path: str
    image_id: str
    label: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]

    @property
    def K(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def subset(self, idx) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in idx], self.class_names)

    @classmethod
    def load(cls, path, classes: list | None = None) -> "DatasetManifest":
        """CSV with header ``path,image_id,label``; paths relative to the file."""
        path = Path(path)
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        if not rows or not {"path", "image_id", "label"} <= set(rows[0]):
            raise DataError(f"{path}: manifest needs path,image_id,label columns")
        raw = [r["label"].strip() for r in rows]
        if classes:
            names = [str(c) for c in classes]
        elif all(v.isdigit() for v in raw):
            names = [str(i) for i in range(1, max(int(v) for v in raw) + 1)]
        else:
            names = sorted(set(raw))
        index = {n: i + 1 for i, n in enumerate(names)}
        entries = []
        for r, lab in zip(rows, raw):
            if lab not in index:
                raise DataError(f"{path}: label {lab!r} of {r['image_id']!r} is not a known class")
            p = Path(r["path"])
            entries.append(ManifestEntry(str(p if p.is_absolute() else path.parent / p), r["image_id"], index[lab]))
        ids = [e.image_id for e in entries]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate image ids")
        m = cls(entries, names)
        if m.K < 2:
            raise DataError("a dataset needs at least two classes")
        return m


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "image_id", "label"])
        for e in manifest.entries:
            wr.writerow([e.path, e.image_id, manifest.class_names[e.label - 1]])


def scan_directory(root) -> DatasetManifest:
    """Build a manifest from ``root/<class>/*.pgm`` (classes sorted by name)."""
    root = Path(root)
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    entries = []
    for k, name in enumerate(names, start=1):
        for f in sorted((root / name).glob("*.pgm")):
            entries.append(ManifestEntry(str(f), f"{name}/{f.stem}", k))
    if len(names) < 2 or not entries:
        raise DataError(f"{root}: expected at least two class folders holding .pgm files")
    return DatasetManifest(entries, names)


def _apportion(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportional to ``counts``."""
    exact = counts * total / counts.sum()
    base = np.floor(exact).astype(np.int64)
    rem = total - base.sum()
    order = np.lexsort((np.arange(counts.size), -(exact - base)))
    base[order[:rem]] += 1
    return base


def split(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0, stratified: bool = True):
    """Deterministic disjoint train/test partition.

    The train size is ``round(train_fraction * n)``; stratified splits
    apportion it across classes by largest remainder.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    labels = manifest.labels()
    n = labels.size
    rng = np.random.default_rng(seed)
    n_train = int(math.floor(train_fraction * n + 0.5))
    if stratified:
        classes = np.arange(1, manifest.K + 1)
        counts = np.array([(labels == c).sum() for c in classes])
        small = [manifest.class_names[i] for i in np.flatnonzero(counts < 2)]
        if small:
            raise DataError(f"classes {small} have fewer than 2 members; cannot stratify")
        quota = np.clip(_apportion(counts, n_train), 1, counts - 1)
        train = []
        for c, q in zip(classes, quota):
            idx = rng.permutation(np.flatnonzero(labels == c))
            train.append(idx[:q])
        train = np.sort(np.concatenate(train))
    else:
        train = np.sort(rng.permutation(n)[:n_train])
    test = np.setdiff1d(np.arange(n), train)
    return manifest.subset(train), manifest.subset(test)


# -------------------------------------------------------------------- stages


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


class _Stage:
    def __init__(self, out: Path, name: str, input_hash: str, outputs: list[str]):
        self.out, self.name, self.input_hash, self.outputs = out, name, input_hash, outputs
        self.meta_path = out / f"{name}.meta.json"

    def fresh(self) -> bool:
        if not self.meta_path.exists():
            return False
        try:
            meta = json.loads(self.meta_path.read_text())
        except json.JSONDecodeError:
            return False
        if meta.get("input_hash") != self.input_hash:
            return False
        for name in self.outputs:
            p = self.out / name
            if not p.exists() or meta.get("outputs", {}).get(name) != sha256_file(p):
                return False
        return True

    def write(self, blobs: dict[str, bytes], extra: dict | None = None):
        for name, data in blobs.items():
            (self.out / name).write_bytes(data)
        meta = {
            "stage": self.name,
            "input_hash": self.input_hash,
            "outputs": {n: sha256_file(self.out / n) for n in self.outputs},
        }
        if extra:
            meta.update(extra)
        self.meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def output_hash(self) -> str:
        return _hash_obj([sha256_file(self.out / n) for n in self.outputs])


def _extract_one(entry: ManifestEntry, cfg: PipelineConfig) -> DescriptorSet:
    try:
        if cfg.descriptor_source == "builtin":
            img = standardize(read_pgm(entry.path), cfg.image_size)
            ds = extract(img, cfg.sift_params(), entry.image_id)
        else:
            src = Path(entry.path)
            if cfg.descriptor_dir:
                src = Path(cfg.descriptor_dir) / f"{entry.image_id}.sift.txt"
            ds = import_vlfeat(src.read_text(), entry.image_id)
        return DescriptorSet(entry.image_id, ds.descriptors)
    except (SibowError, OSError, ValueError) as exc:
        raise StageFailure("extract", entry.image_id, exc) from exc


def _input_fingerprint(manifest: DatasetManifest, cfg: PipelineConfig) -> list:
    fp = []
    for e in manifest.entries:
        src = Path(e.path)
        if cfg.descriptor_source == "vlfeat_import" and cfg.descriptor_dir:
            src = Path(cfg.descriptor_dir) / f"{e.image_id}.sift.txt"
        try:
            digest = sha256_file(src)
        except OSError as exc:
            raise StageFailure("extract", e.image_id, DataError(str(exc))) from exc
        fp.append([e.image_id, e.label, digest])
    return fp


@dataclass
class PipelineResult:
    out_dir: Path
    artifacts: dict
    report: dict | None = None
    tuning: list | None = None


def run_pipeline(
    cfg: PipelineConfig,
    manifest: DatasetManifest,
    out_dir,
    workers: int | None = None,
    until: str = "evaluate",
) -> PipelineResult:
    if until not in STAGES + ("tune",):
        raise ValueError(f"unknown stage {until!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nw = cfg.effective_workers(workers)
    cfg_d = cfg.to_dict()
    arts: dict = {}
    pool_exec = ThreadPoolExecutor(max_workers=nw)

    try:
        # extract
        ex_cfg = {k: cfg_d[k] for k in ("descriptor_source", "descriptor_dir", "image_size", "sift")}
        st = _Stage(out, "extract", _hash_obj([ex_cfg, _input_fingerprint(manifest, cfg)]), ["descriptors.sbwd"])
        if st.fresh():
            sets = load_descriptor_sets(out / "descriptors.sbwd")
        else:
            log.info("extracting descriptors from %d images", len(manifest.entries))
            sets = list(pool_exec.map(lambda e: _extract_one(e, cfg), manifest.entries))
            save_descriptor_sets(sets, out / "descriptors.sbwd")
            st.write({}, {"images": len(sets)})
        arts["descriptors"] = out / "descriptors.sbwd"
        by_id = {s.image_id: s for s in sets}
        desc_hash = st.output_hash()
        if until == "extract":
            return PipelineResult(out, arts)

        # split
        sp_cfg = {k: cfg_d[k] for k in ("train_fraction", "split_seed", "stratified")}
        train_m, test_m = split(manifest, cfg.train_fraction, cfg.split_seed, cfg.stratified)
        split_doc = {
            "classes": manifest.class_names,
            "train": [e.image_id for e in train_m.entries],
            "test": [e.image_id for e in test_m.entries],
        }
        st = _Stage(out, "split", _hash_obj([sp_cfg, split_doc]), ["split.json"])
        if not st.fresh():
            st.write({"split.json": (json.dumps(split_doc, indent=2) + "\n").encode()})
        arts["split"] = out / "split.json"
        split_hash = st.output_hash()
        if until == "split":
            return PipelineResult(out, arts)

        # codebook
        cb_cfg = {k: cfg_d[k] for k in ("codebook_size", "kmeans", "kmeans_seed", "passes", "chunks")}
        st = _Stage(out, "codebook", _hash_obj([cb_cfg, desc_hash, split_hash]), ["codebook.sbwc"])
        if st.fresh():
            book = cbmod.load_codebook(out / "codebook.sbwc")
        else:
            try:
                pool = cbmod.build_pool([by_id[e.image_id] for e in train_m.entries])
                book = cbmod.multipass_kmeans(
                    pool, cfg.codebook_size, cfg.kmeans_params(), cfg.passes, cfg.chunks, nw
                )
            except SibowError as exc:
                raise StageFailure("codebook", None, exc) from exc
            st.write({"codebook.sbwc": cbmod.codebook_to_bytes(book)})
        arts["codebook"] = out / "codebook.sbwc"
        book_hash = sha256_file(out / "codebook.sbwc")
        if until == "codebook":
            return PipelineResult(out, arts)

        # encode
        en_cfg = {k: cfg_d[k] for k in ("encoder", "llc", "pooling_id")}
        names = ["features_train.sbwf", "features_test.sbwf"]
        st = _Stage(out, "encode", _hash_obj([en_cfg, desc_hash, split_hash, book_hash]), names)
        if st.fresh():
            f_train, f_test = load_features(out / names[0]), load_features(out / names[1])
        else:
            f_train = encode_features([by_id[e.image_id] for e in train_m.entries], train_m.labels(), book, cfg, pool_exec)
            f_test = encode_features([by_id[e.image_id] for e in test_m.entries], test_m.labels(), book, cfg, pool_exec)
            st.write({names[0]: features_to_bytes(f_train), names[1]: features_to_bytes(f_test)})
            features_to_csv(f_train, out / "features_train.csv")
            features_to_csv(f_test, out / "features_test.csv")
        arts["features_train"], arts["features_test"] = out / names[0], out / names[1]
        feat_hash = sha256_file(out / names[0])
        if until == "encode":
            return PipelineResult(out, arts)

        # train (tuning included)
        tr_cfg = {
            k: cfg_d[k]
            for k in ("scheme", "baseline_rule", "pi_grid_size", "kernel", "lambda_grid", "gamma_grid",
                      "gamma_grid_log2", "lam", "gamma", "tune_seed", "repeats")
        }
        repeats = 1 if cfg.fixed_hyperparameters() else cfg.repeats
        model_names = [f"model_r{r:02d}.sbwm" for r in range(repeats)]
        st = _Stage(out, "train", _hash_obj([tr_cfg, feat_hash, book_hash]), model_names + ["tuning.json"])
        if st.fresh():
            models = [load_model(out / n) for n in model_names]
            tuning = json.loads((out / "tuning.json").read_text())
        else:
            models, tuning = [], []
            for r in range(repeats):
                try:
                    m, info = train_model(f_train, manifest.K, cfg, cfg.tune_seed + r, nw)
                except SibowError as exc:
                    raise StageFailure("train", f"repeat {r}", exc) from exc
                m.features_hash = feat_hash
                m.meta = {"codebook_hash": book_hash, "config": cfg_d, "repeat": r}
                models.append(m)
                tuning.append(info)
            blobs = {n: model_to_bytes(m) for n, m in zip(model_names, models)}
            blobs["tuning.json"] = (json.dumps(tuning, indent=2, sort_keys=True) + "\n").encode()
            st.write(blobs)
        arts["models"] = [out / n for n in model_names]
        arts["tuning"] = out / "tuning.json"
        if until in ("train", "tune"):
            return PipelineResult(out, arts, tuning=tuning)

        # evaluate
        ev_names = ["report.json", "reliability.csv", "predictions.csv"]
        model_hash = _hash_obj([sha256_file(p) for p in arts["models"]])
        st = _Stage(out, "evaluate", _hash_obj([cfg.ece_bins, model_hash, sha256_file(arts["features_test"])]), ev_names)
        if st.fresh():
            report = json.loads((out / "report.json").read_text())
        else:
            per = []
            for r, m in enumerate(models):
                records = predict_records(m, f_test)
                rep = metrics.evaluation_report(records, cfg.ece_bins, manifest.K)
                rep["repeat"] = r
                rep["lambda"], rep["gamma"] = m.lam, m.kernel.gamma
                per.append(rep)
                if r == 0:
                    write_predictions_csv(records, manifest.K, out / "predictions.csv")
                    metrics.write_reliability_csv(rep, out / "reliability.csv")
            report = {"classes": manifest.class_names, "repeats": per, "summary": summarize(per)}
            metrics.write_report_json(report, out / "report.json")
            st.write({})
        arts["report"] = out / "report.json"
        return PipelineResult(out, arts, report=report)
    finally:
        pool_exec.shutdown()


def encode_features(sets, labels, book, cfg: PipelineConfig, executor=None) -> FeatureMatrix:
    llc = cfg.llc_params()
    src = source_of(cfg.encoder)

    def one(item):
        ds, lab = item
        try:
            codes = encode_image(ds, book, cfg.encoder, llc)
            return featurize(codes, cfg.pooling_id, src, ds.image_id, int(lab))
        except SibowError as exc:
            raise StageFailure("encode", ds.image_id, exc) from exc

    items = list(zip(sets, labels))
    feats = list(executor.map(one, items)) if executor else [one(i) for i in items]
    if not feats:
        return FeatureMatrix(np.zeros((0, book.size)), [], np.zeros(0, dtype=np.int64), cfg.pooling_id)
    return FeatureMatrix.from_features(feats)


def _grids(cfg: PipelineConfig, X: np.ndarray):
    lams = cfg.lambda_grid
    if cfg.gamma_grid is not None:
        gammas = cfg.gamma_grid
    elif cfg.gamma_grid_log2 is not None:
        lo, hi = cfg.gamma_grid_log2
        gammas = list(2.0 ** np.arange(lo, hi + 1) * median_heuristic_gamma(X))
    else:
        gammas = None
    return lams, gammas


def train_model(f_train: FeatureMatrix, K: int, cfg: PipelineConfig, seed: int, workers: int = 1):
    grid = default_pi_grid(cfg.pi_grid_size)
    X, y = f_train.values, f_train.labels
    if cfg.fixed_hyperparameters():
        kern = KernelSpec(cfg.kernel, cfg.gamma if cfg.kernel == "rbf" else 1.0)
        m = fit_multiclass(X, y, cfg.scheme, grid, cfg.lam, kern, K, cfg.baseline_rule, workers)
        info = {"lambda": cfg.lam, "gamma": kern.gamma, "egkl": None, "grid": []}
    else:
        lams, gammas = _grids(cfg, X[stratified_halves(y, seed)[0]])
        res = tune_egkl(X, y, cfg.scheme, lams, gammas, seed, grid, cfg.kernel, K, cfg.baseline_rule, workers)
        m = res.model
        info = {"lambda": res.lam, "gamma": res.gamma, "egkl": res.egkl, "grid": res.table, "seed": seed}
    m.pooling_id = f_train.pooling_id
    return m, info


def predict_records(model, fm: FeatureMatrix) -> list:
    if model.pooling_id is not None and fm.pooling_id != model.pooling_id:
        raise CompatibilityError(
            f"features were pooled with {fm.pooling_id!r} but the model expects {model.pooling_id!r}"
        )
    if fm.M != model.X.shape[1]:
        raise CompatibilityError(f"feature length {fm.M} differs from the model's {model.X.shape[1]}")
    if len(fm) == 0:
        return []
    P, T = predict_proba_matrix(model, fm.values)
    out = []
    for i in range(len(fm)):
        est = ProbabilityEstimate(P[i], None if T is None else T[i])
        vote = maxvote(T[i], P[i]) if T is not None else None
        out.append(
            metrics.EvalRecord(int(fm.labels[i]), classify(est, "argmax"), P[i], vote, fm.image_ids[i])
        )
    return out


def write_predictions_csv(records, K: int, path) -> None:
    """``path`` may also be an open text stream."""
    if hasattr(path, "write"):
        _predictions_rows(records, K, path)
        return
    with open(path, "w", newline="") as fh:
        _predictions_rows(records, K, fh)


def _predictions_rows(records, K: int, fh) -> None:
    wr = csv.writer(fh)
    wr.writerow(["image_id"] + [f"p_{k}" for k in range(1, K + 1)] + ["argmax", "maxvote"])
    for r in records:
        wr.writerow(
            [r.image_id]
            + [repr(float(v)) for v in r.probs]
            + [r.predicted_argmax, "" if r.predicted_maxvote is None else r.predicted_maxvote]
        )


def summarize(per_repeat: list[dict]) -> dict:
    """Mean and standard error of each scalar metric across repeats."""
    out = {}
    for key in ("te1", "te2", "precision", "recall", "f1", "ece", "auc"):
        vals = [r[key] for r in per_repeat if r.get(key) is not None]
        if not vals:
            out[key] = {"mean": None, "se": None}
            continue
        arr = np.array(vals, dtype=np.float64)
        se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "se": se}
    return out


def predict_command(model_path, features=None, images=None, codebook_path=None, cfg: PipelineConfig | None = None,
                    out_csv=None, workers: int = 1):
    """Score a feature artifact, or raw PGM images via a codebook.

    Returns the evaluation records; writes CSV rows
    ``image_id, p_1..p_K, argmax, maxvote`` when ``out_csv`` is given.
    """
    model = load_model(model_path)
    if features is not None:
        fm = load_features(features) if not isinstance(features, FeatureMatrix) else features
    else:
        if codebook_path is None or cfg is None:
            raise ConfigError("predicting from images needs a codebook and a config")
        want = model.meta.get("codebook_hash")
        got = sha256_file(codebook_path)
        if want is not None and want != got:
            raise CompatibilityError("codebook does not match the one the model was trained with")
        book = cbmod.load_codebook(codebook_path)
        entries = [ManifestEntry(str(p), Path(p).stem, 0) for p in images]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            sets = list(ex.map(lambda e: _extract_one(e, cfg), entries))
            fm = encode_features(sets, [0] * len(sets), book, cfg, ex)
    records = predict_records(model, fm)
    if out_csv is not None:
        write_predictions_csv(records, model.K, out_csv)
    return records
