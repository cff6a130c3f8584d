"""Command-line entry point: ``sibow <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, metrics
from .errors import ConfigError, DataError, NumericalError, SibowError
from .modelio import load_model
from .pipeline import (
    DatasetManifest,
    PipelineConfig,
    StageFailure,
    predict_command,
    predict_records,
    run_pipeline,
    scan_directory,
    write_manifest,
    write_predictions_csv,
)
from .pooling import load_features

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

STAGE_COMMANDS = {
    "extract": "extract",
    "codebook": "codebook",
    "encode": "encode",
    "train": "train",
    "tune": "tune",
    "pipeline": "evaluate",
}


def _common(p: argparse.ArgumentParser, manifest: bool = True):
    p.add_argument("--config", type=Path, help="JSON pipeline configuration")
    p.add_argument("--seed", type=int, help="override the split, k-means and tuning seeds")
    p.add_argument("--workers", type=int, help="worker threads (default: all cores)")
    p.add_argument("--out", type=Path, default=Path("sibow-out"), help="artifact directory")
    if manifest:
        p.add_argument("--manifest", type=Path, help="CSV with path,image_id,label")
        p.add_argument("--data-dir", type=Path, help="folder with one sub-folder of .pgm files per class")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sibow", description="Bag-of-features + weighted-SVM image classifier")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    helps = {
        "extract": "compute SIFT descriptors for every image",
        "codebook": "build the k-means codebook from the training descriptors",
        "encode": "encode and pool images into feature vectors",
        "train": "train (and tune) the weighted-SVM models",
        "tune": "alias of train; writes tuning.json",
        "pipeline": "run every stage and write the evaluation report",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("evaluate", help="score a model on a feature artifact, or run the pipeline to the end")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--features", type=Path)
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)

    p = sub.add_parser("predict", help="class probabilities for features or PGM images")
    _common(p, manifest=False)
    p.add_argument("--model", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", type=Path)
    src.add_argument("--images", type=Path, nargs="+")
    p.add_argument("--codebook", type=Path, help="codebook artifact (needed with --images)")

    p = sub.add_parser("manifest", help="write a manifest CSV from a class-per-folder tree")
    p.add_argument("data_dir", type=Path)
    p.add_argument("--out", type=Path, default=Path("manifest.csv"))
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, split_seed=args.seed, kmeans_seed=args.seed, tune_seed=args.seed)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _manifest(args, cfg: PipelineConfig) -> DatasetManifest:
    if args.manifest:
        return DatasetManifest.load(args.manifest, cfg.classes)
    if args.data_dir:
        return scan_directory(args.data_dir)
    raise ConfigError("give --manifest or --data-dir")


def _run(args) -> int:
    if args.command == "manifest":
        m = scan_directory(args.data_dir)
        write_manifest(m, args.out)
        print(f"{len(m.entries)} images, {m.K} classes -> {args.out}")
        return EXIT_OK

    cfg = _config(args)
    if args.command == "predict":
        records = predict_command(
            args.model, features=args.features, images=args.images, codebook_path=args.codebook,
            cfg=cfg, out_csv=args.out if args.out.suffix == ".csv" else None,
            workers=cfg.effective_workers(),
        )
        if args.out.suffix != ".csv":
            write_predictions_csv(records, load_model(args.model).K, sys.stdout)
        return EXIT_OK

    if args.command == "evaluate" and args.model:
        if not args.features:
            raise ConfigError("evaluate --model needs --features")
        model = load_model(args.model)
        records = predict_records(model, load_features(args.features))
        if not records:
            raise DataError("feature artifact holds no images")
        if any(r.true_label < 1 for r in records):
            raise DataError("evaluation needs labelled features")
        report = metrics.evaluation_report(records, args.bins, model.K)
        args.out.mkdir(parents=True, exist_ok=True)
        metrics.write_report_json(report, args.out / "report.json")
        metrics.write_reliability_csv(report, args.out / "reliability.csv")
        print(json.dumps({k: report[k] for k in ("te1", "te2", "f1", "ece", "auc")}))
        return EXIT_OK

    until = STAGE_COMMANDS.get(args.command, "evaluate")
    res = run_pipeline(cfg, _manifest(args, cfg), args.out, until=until)
    if res.report:
        print(json.dumps(res.report["summary"], indent=2))
    else:
        print(f"{args.command}: artifacts in {res.out_dir}")
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        return _exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (SibowError, OSError) as exc:
        print(f"sibow: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
