import numpy as np
import pytest

from formrisk import fgrid
from formrisk.cohort import Status, label_fracture, read_manifest
from formrisk.metrics import UndefinedAUC
from formrisk.synthgen import (
    GenerationError,
    GeneratorConfig,
    bayes_auc,
    calibrate_intercept,
    generate_cohort,
    generate_records,
    logistic,
    pairwise_auc,
    render_half,
    write_dataset,
)


def labels_for(records, horizon=10):
    return {r.patient_id: label_fracture(r, horizon) for r in records}


def test_prevalence_at_2000_within_binomial_range():
    _, truth = generate_records(GeneratorConfig(n_patients=2000, seed=11, prevalence=0.03))
    assert 40 <= int(truth.fracture_10y.sum()) <= 80
    assert truth.p.mean() == pytest.approx(0.03, abs=1e-9)


def test_prevalence_converges_at_10k():
    _, truth = generate_records(GeneratorConfig(n_patients=10_000, seed=3, prevalence=0.10))
    assert abs(truth.fracture_10y.mean() - 0.10) < 0.005 + 3 * np.sqrt(0.09 / 10_000)


def test_intercept_bisection_matches_closed_form():
    # with no covariate spread, mean(logistic(a0)) = target  =>  a0 = logit(target)
    a0 = calibrate_intercept(0.2, np.zeros(10))
    assert a0 == pytest.approx(np.log(0.2 / 0.8), abs=1e-9)
    assert logistic(a0) == pytest.approx(0.2)


def test_infeasible_prevalence():
    with pytest.raises(GenerationError):
        calibrate_intercept(0.5, np.zeros(3), lo=-1.0, hi=-0.5)


def test_hazard_formula_recovered():
    _, truth = generate_records(GeneratorConfig(n_patients=50, seed=2))
    c = truth.coefficients
    eta = (c["a0"] - c["a1"] * truth.q + c["a2"] * truth.age_z + c["a3"] * truth.fall
           + c["a4"] * truth.smoking + c["a5"] * truth.q * truth.age_z)
    assert np.allclose(truth.p, 1 / (1 + np.exp(-eta)))


def test_no_image_signal_gives_chance_image_auc():
    records, truth = generate_records(GeneratorConfig(n_patients=4000, seed=5, prevalence=0.2, a1=0.0, a5=0.0))
    assert bayes_auc(truth, labels_for(records), "ImageOnly") == pytest.approx(0.5, abs=0.02)


def test_bayes_auc_ordering():
    records, truth = generate_records(GeneratorConfig(n_patients=4000, seed=5, prevalence=0.2))
    labs = labels_for(records)
    both = bayes_auc(truth, labs, "Both")
    assert 0.5 < both < 1.0
    assert both > bayes_auc(truth, labs, "RFOnly")
    assert both > bayes_auc(truth, labs, "ImageOnly")


def test_pairwise_auc_constant_and_undefined():
    assert pairwise_auc(np.ones(6), [0, 1, 0, 1, 0, 1]) == 0.5
    with pytest.raises(UndefinedAUC):
        pairwise_auc([0.1, 0.2], [1, 1])


def test_rim_width_tracks_latent_quality():
    rng = np.random.default_rng(0)
    rims = [render_half((96, 96), q, rng)[3] for q in (-2.0, 0.0, 2.0)]
    assert rims[0] < rims[1] < rims[2]


def test_censoring_and_status_mix():
    records, _ = generate_records(GeneratorConfig(n_patients=3000, seed=9, prevalence=0.2))
    status = [label_fracture(r, 10).status for r in records]
    frac_censored = status.count(Status.CENSORED) / len(status)
    assert 0.1 < frac_censored < 0.4
    assert status.count(Status.POSITIVE) > 0 and status.count(Status.NEGATIVE) > 0


def test_deterministic_bytes(tmp_path):
    cfg = GeneratorConfig(n_patients=6, seed=4, ct_fraction=0.5, xray_dims=(64, 128))
    write_dataset(tmp_path / "a", cfg)
    write_dataset(tmp_path / "b", cfg)
    for rel in ("manifest.csv", "images.csv", "ground_truth.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    for path in sorted((tmp_path / "a" / "images").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / "images" / path.name).read_bytes()


def test_dataset_layout(tmp_path):
    cfg = GeneratorConfig(n_patients=4, seed=1, ct_fraction=1.0)
    write_dataset(tmp_path, cfg)
    records = read_manifest(tmp_path / "manifest.csv")
    assert len(records) == 4
    grid = fgrid.read(tmp_path / "images" / f"{records[0].patient_id}.fgrid")
    assert grid.shape == cfg.ct_dims


def test_image_rendering_matches_in_memory_cohort(tmp_path):
    cfg = GeneratorConfig(n_patients=3, seed=8, xray_dims=(64, 128))
    _, studies, _ = generate_cohort(cfg)
    write_dataset(tmp_path, cfg)
    for s in studies:
        assert np.array_equal(fgrid.read(tmp_path / "images" / f"{s.patient_id}.fgrid"), s.grid)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(prevalence=1.5).validate()
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"n_patients": 5, "bogus": 1})
