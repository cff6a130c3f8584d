import csv
import io
import json

import pytest

from sibow import cli
from sibow.errors import ConvergenceError, DataError
from sibow.pipeline import StageFailure
from textures import CLASSES, write_dataset

CONFIG = {
    "image_size": 96,
    "codebook_size": 12,
    "scheme": "pairwise",
    "classes": list(CLASSES),
    "lam": 0.05,
    "gamma": 1.0,
    "pi_grid_size": 9,
}


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = write_dataset(root / "data")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    return root, manifest, cfg


def test_pipeline_then_predict_and_evaluate(setup, capsys):
    root, manifest, cfg = setup
    out = root / "out"
    assert cli.main(["pipeline", "--config", str(cfg), "--manifest", str(manifest), "--out", str(out),
                     "--workers", "2", "--seed", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["te2"]["mean"] is not None  # pairwise scheme provides max voting

    assert cli.main(["predict", "--model", str(out / "model_r00.sbwm"),
                     "--features", str(out / "features_test.sbwf"), "--out", "-"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0][:2] == ["image_id", "p_1"] and rows[0][-2:] == ["argmax", "maxvote"]
    assert len(rows) == 9

    ev = root / "eval"
    assert cli.main(["evaluate", "--model", str(out / "model_r00.sbwm"),
                     "--features", str(out / "features_test.sbwf"), "--out", str(ev)]) == 0
    assert (ev / "report.json").exists()


def test_stage_commands(setup):
    root, manifest, cfg = setup
    out = root / "stages"
    for cmd in ("extract", "codebook", "encode", "train"):
        assert cli.main([cmd, "--config", str(cfg), "--manifest", str(manifest), "--out", str(out)]) == 0
    assert (out / "model_r00.sbwm").exists() and not (out / "report.json").exists()


def test_manifest_command(setup, capsys):
    root, _, _ = setup
    assert cli.main(["manifest", str(root / "data"), "--out", str(root / "m2.csv")]) == 0
    assert "40 images, 4 classes" in capsys.readouterr().out


def test_exit_codes(setup, tmp_path, capsys):
    root, manifest, _ = setup
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scheme": "nope"}))
    assert cli.main(["pipeline", "--config", str(bad), "--manifest", str(manifest)]) == 2
    assert cli.main(["pipeline", "--manifest", str(tmp_path / "missing.csv")]) == 3
    assert cli.main(["pipeline"]) == 2
    assert "error" in capsys.readouterr().err
    assert cli._exit_code(ConvergenceError("cap", 0.5)) == 4
    assert cli._exit_code(StageFailure("train", None, ConvergenceError("cap", 0.5))) == 4
    assert cli._exit_code(DataError("x")) == 3


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--version"])
    assert ei.value.code == 0
