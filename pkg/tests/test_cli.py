import csv
import json
import time

import numpy as np
import pytest

from formrisk import fgrid
from formrisk.cli import main
from formrisk.cohort import label_fracture, read_manifest
from formrisk.evalharness import validate_report
from formrisk.preprocess import REASONS

FAST_DETECTOR = {"detector": {"epochs": 2, "input_size": 32, "width": 8}}
FAST_RUN = {
    "train": {"epochs": 2, "batch_size": 36, "lr": 1e-3},
    "extractor": {"backbone_channels": [4, 8, 8], "D": 8, "input_dims": [32, 32], "head_width": 8},
    "risk": {"hidden": 8},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path.name


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--workdir", str(root), "synth", "--out", "ds", "--n", "60", "--seed", "3",
                 "--prevalence", "0.3"]) == 0
    write_json(root / "pre.json", FAST_DETECTOR)
    assert main(["--workdir", str(root), "preprocess", "--dataset", "ds", "--out", "crops",
                 "--config", "pre.json", "--target-size", "32"]) == 0
    return root


def test_synth_outputs_and_idempotence(dataset, tmp_path):
    ds = dataset / "ds"
    for name in ("manifest.csv", "images.csv", "ground_truth.json", "schema.json", "config.json", "run.log"):
        assert (ds / name).exists()
    assert len(read_manifest(ds / "manifest.csv")) == 60
    assert main(["--workdir", str(tmp_path), "synth", "--out", "again", "--n", "60", "--seed", "3",
                 "--prevalence", "0.3"]) == 0
    for name in ("manifest.csv", "images.csv", "ground_truth.json", "config.json"):
        assert (ds / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_synth_prevalence_flag(tmp_path):
    cfg = write_json(tmp_path / "g.json", {"generator": {"xray_dims": [64, 128]}})
    assert main(["--workdir", str(tmp_path), "synth", "--out", "big", "--n", "2000", "--prevalence", "0.03",
                 "--config", cfg]) == 0
    truth = json.loads((tmp_path / "big" / "ground_truth.json").read_text())
    times = np.array([p["fracture_time"] for p in truth["patients"]])
    assert abs(np.mean(times <= 10) - 0.03) <= 0.01


def test_preprocess_outputs(dataset):
    out = dataset / "crops"
    summary = json.loads((out / "preprocess.json").read_text())
    assert summary["modality"] == "xray" and summary["included"] > 0
    with open(out / "exclusions.csv", newline="") as fh:
        reasons = {row["reason"] for row in csv.DictReader(fh)}
    assert reasons <= set(REASONS)
    with open(out / "crops.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert fgrid.read(out / row["path"]).shape == (32, 32)
    assert (out / "detector.fnet").exists() and (out / "manifest.csv").exists()


def test_preprocess_ct_path(tmp_path):
    assert main(["--workdir", str(tmp_path), "synth", "--out", "ct", "--n", "6", "--ct-fraction", "1"]) == 0
    write_json(tmp_path / "pre.json", FAST_DETECTOR)
    assert main(["--workdir", str(tmp_path), "preprocess", "--dataset", "ct", "--out", "ctc", "--modality", "ct",
                 "--config", "pre.json"]) == 0
    summary = json.loads((tmp_path / "ctc" / "preprocess.json").read_text())
    assert summary["target_dims"] == [96, 96] and summary["no_phantom"] == []
    assert main(["--workdir", str(tmp_path), "preprocess", "--dataset", "ct", "--out", "ctn", "--modality", "ctn",
                 "--config", "pre.json", "--detector", "ctc/detector.fnet"]) == 0


def run(root, *extra):
    write_json(root / "run.json", FAST_RUN)
    return main(["--workdir", str(root), "run", "--dataset", "crops", "--folds", "2", "--reps", "1", "--jobs", "1",
                 "--config", "run.json", *extra])


@pytest.mark.parametrize("model,inputs", [("form", "both"), ("form", "rf"), ("cox", "rf"), ("cox", "both"),
                                          ("external", "rf")])
def test_run_models(dataset, model, inputs):
    out = f"run_{model}_{inputs}"
    assert run(dataset, "--out", out, "--model", model, "--inputs", inputs) == 0
    doc = json.loads((dataset / out / "report.json").read_text())
    validate_report(doc)
    assert (dataset / out / "aucs.csv").exists() and (dataset / out / "config.json").exists()
    if model == "form":
        assert (dataset / out / "predictions.csv").exists()


def test_run_is_idempotent(dataset):
    assert run(dataset, "--out", "idem_a", "--model", "form", "--inputs", "rf") == 0
    assert run(dataset, "--out", "idem_b", "--model", "form", "--inputs", "rf") == 0
    for name in ("report.json", "aucs.csv", "predictions.csv", "config.json"):
        assert (dataset / "idem_a" / name).read_bytes() == (dataset / "idem_b" / name).read_bytes()


def test_cox_route_matches_direct_fit(dataset):
    assert run(dataset, "--out", "cox_direct", "--model", "cox", "--inputs", "rf", "--horizon", "5") == 0
    doc = json.loads((dataset / "cox_direct" / "report.json").read_text())
    task = next(t for t in doc["tasks"] if t["models"]["cox_rf"].get("auc") is not None)
    names = [c["name"] for c in task["models"]["cox_rf"]["coefficients"]]
    assert names == ["age", "bmi"] and doc["config"]["horizon"] == 5


def test_exit_codes(dataset, tmp_path):
    # validation: unknown config key, images without crops
    bad = write_json(tmp_path / "bad.json", {"train": {"epochz": 1}})
    assert main(["--workdir", str(dataset), "run", "--dataset", "crops", "--out", "x", "--config",
                 str(tmp_path / bad)]) == 2
    assert main(["--workdir", str(dataset), "run", "--dataset", "ds", "--out", "y", "--inputs", "image"]) == 2
    assert main(["--workdir", str(tmp_path), "synth", "--out", "z", "--prevalence", "1.5"]) == 2
    # io: missing dataset, corrupt detector
    assert main(["--workdir", str(tmp_path), "run", "--dataset", "nowhere", "--out", "o"]) == 4
    (tmp_path / "junk.fnet").write_bytes(b"junk")
    assert main(["--workdir", str(dataset), "preprocess", "--dataset", "ds", "--out", str(tmp_path / "p"),
                 "--detector", str(tmp_path / "junk.fnet")]) == 4


def test_numeric_fault_exit_code(tmp_path, monkeypatch):
    import formrisk.cli as cli
    from formrisk.baselines import CoxDivergence

    monkeypatch.setattr(cli, "write_dataset", lambda *a, **k: (_ for _ in ()).throw(CoxDivergence("x")))
    assert cli.main(["--workdir", str(tmp_path), "synth", "--out", "q", "--n", "5"]) == 3


def test_form_both_500_patients_runtime(tmp_path):
    assert main(["--workdir", str(tmp_path), "synth", "--out", "ds", "--n", "500", "--seed", "1",
                 "--prevalence", "0.25", "--config",
                 write_json(tmp_path / "g.json", {"generator": {"xray_dims": [64, 128]}})]) == 0
    write_json(tmp_path / "pre.json", {"detector": {"epochs": 15, "input_size": 32, "width": 8}})
    start = time.perf_counter()
    assert main(["--workdir", str(tmp_path), "preprocess", "--dataset", "ds", "--out", "crops",
                 "--config", "pre.json", "--target-size", "32"]) == 0
    cfg = {"train": {"epochs": 6, "batch_size": 36, "lr": 1e-3},
           "extractor": {"backbone_channels": [8, 16, 32], "D": 32, "input_dims": [32, 32], "head_width": 32},
           "risk": {"hidden": 32}}
    write_json(tmp_path / "run.json", cfg)
    assert main(["--workdir", str(tmp_path), "run", "--dataset", "crops", "--out", "r", "--model", "form",
                 "--inputs", "both", "--folds", "5", "--reps", "1", "--config", "run.json"]) == 0
    assert time.perf_counter() - start < 15 * 60
    validate_report(json.loads((tmp_path / "r" / "report.json").read_text()))
