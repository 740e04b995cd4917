import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from formrisk.cohort import PatientRecord, default_schema, label_fracture
from formrisk.evalharness import (
    DegenerateSample,
    EmptySubgroup,
    ModelSpec,
    ProtocolConfig,
    ProtocolData,
    assign_folds,
    censored_subgroup_fp,
    censored_survivors,
    derive_seed,
    fp_rate,
    run_protocol,
    validate_report,
    welch_test,
)
from formrisk.risk import RiskModelConfig
from formrisk.nncore import TrainConfig
from formrisk.synthgen import GeneratorConfig, bayes_auc, generate_records, hanley_mcneil_se, scope_probability


def welch_closed_form(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return t, df


def test_welch_fixture():
    t, df, p = welch_test([1, 2, 3, 4], [2, 3, 4, 5])
    assert t == pytest.approx(-1.0954, abs=1e-3)
    assert df == pytest.approx(6.0, abs=1e-3)
    assert p == pytest.approx(0.3153, abs=1e-3)


def test_welch_identity_and_symmetry():
    t, _, p = welch_test([1, 2, 3], [1, 2, 3])
    assert t == 0.0 and p == 1.0
    t1, d1, p1 = welch_test([1, 5, 2], [3, 3.5, 9, 1])
    t2, d2, p2 = welch_test([3, 3.5, 9, 1], [1, 5, 2])
    assert t1 == -t2 and d1 == d2 and p1 == p2


def test_welch_degenerate():
    with pytest.raises(DegenerateSample):
        welch_test([1], [1, 2])
    with pytest.raises(DegenerateSample):
        welch_test([2, 2], [3, 3])


samples = st.lists(st.floats(-100, 100), min_size=2, max_size=12).filter(lambda v: np.ptp(v) > 1e-3)


@given(samples, samples, st.floats(0.1, 10), st.floats(-50, 50))
def test_welch_matches_scipy_and_affine_invariance(a, b, scale, shift):
    t, df, p = welch_test(a, b)
    ref = stats.ttest_ind(a, b, equal_var=False)
    ct, cdf = welch_closed_form(a, b)
    assert t == pytest.approx(ct, rel=1e-9) and df == pytest.approx(cdf, rel=1e-9)
    assert p == pytest.approx(max(ref.pvalue, np.finfo(float).tiny), rel=1e-6)
    _, _, p2 = welch_test(np.array(a) * scale + shift, np.array(b) * scale + shift)
    assert p2 == pytest.approx(p, rel=1e-6)
    assert 0 < p <= 1


def test_seed_derivation():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, r, f) for r in range(10) for f in range(5)}) == 50


def test_fp_rate_thresholds():
    s = [0.0, 0.3, 0.6, 1.0]
    assert fp_rate(s, 1.0) == 0.0
    assert fp_rate(np.array(s) + 1e-9, 0.0) == 1.0
    assert fp_rate(s, 0.5) == 0.5
    with pytest.raises(EmptySubgroup):
        fp_rate([], 0.5)
    mean, se = censored_subgroup_fp([[0.6, 0.1], [0.2, 0.1], [0.9, 0.8]])
    assert mean == pytest.approx(0.5) and se == pytest.approx(np.std([0.5, 0, 1], ddof=1) / np.sqrt(3))


def test_censored_survivor_subgroup():
    recs = [PatientRecord("a", {}, False, 6.0), PatientRecord("b", {}, False, 4.0),
            PatientRecord("c", {}, False, 12.0), PatientRecord("d", {}, True, 3.0, 3.0)]
    assert censored_survivors(recs, 10) == ["a"]


def cohort(n=600, seed=0, **kw):
    cfg = GeneratorConfig(n_patients=n, seed=seed, prevalence=kw.pop("prevalence", 0.2), **kw)
    records, truth = generate_records(cfg)
    return records, truth, ProtocolData(records, default_schema())


def oracle_spec(truth):
    p = scope_probability(truth, "Both")
    return ModelSpec("oracle", kind="scores", scores=dict(zip(truth.patient_ids, p.tolist())))


def test_fold_partition_and_stratification():
    records, _, data = cohort(503)
    cfg = ProtocolConfig(k=5, seed=3)
    folds = assign_folds(data, cfg)
    assert set(folds) == {r.patient_id for r in records}
    sizes = np.bincount(list(folds.values()))
    assert sizes.max() - sizes.min() <= 1
    pos = np.bincount([folds[r.patient_id] for r in records
                       if label_fracture(r, 10).is_labeled and label_fracture(r, 10).target], minlength=5)
    assert pos.max() - pos.min() <= 1


def test_reps_one_gives_k_aucs_and_valid_schema(tmp_path):
    _, truth, data = cohort()
    rep = run_protocol(data, [oracle_spec(truth)], ProtocolConfig(k=5, reps=1, jobs=1))
    assert len(rep.models["oracle"]["auc"]) == 5
    doc = json.loads(rep.to_json())
    validate_report(doc)
    rep.save(tmp_path)
    assert (tmp_path / "aucs.csv").read_text().count("\n") == 6
    assert (tmp_path / "roc_oracle.csv").exists()


def test_oracle_passthrough_matches_bayes_auc():
    records, truth, data = cohort(3000, seed=2)
    rep = run_protocol(data, [oracle_spec(truth)], ProtocolConfig(k=5, reps=1, jobs=1))
    labels = {r.patient_id: label_fracture(r, 10) for r in records}
    bayes = bayes_auc(truth, labels, "Both")
    n_pos = sum(l.is_labeled and l.target for l in labels.values())
    n_neg = sum(l.is_labeled and not l.target for l in labels.values())
    se = hanley_mcneil_se(bayes, n_pos / 5, n_neg / 5) / math.sqrt(5)
    assert abs(rep.models["oracle"]["mean"] - bayes) < 2 * se + 0.01


def test_ablation_mode_uses_one_fold():
    _, truth, data = cohort()
    rep = run_protocol(data, [oracle_spec(truth)], ProtocolConfig(k=5, reps=3, mode="ablation", ablation_fold=2,
                                                                    jobs=1))
    assert {(r["rep"], r["fold"]) for r in rep.models["oracle"]["auc"]} == {(0, 2), (1, 2), (2, 2)}


def small_rf_specs():
    risk = RiskModelConfig(inputs="rf", hidden=16, train=TrainConfig(epochs=5, lr=1e-3))
    return [ModelSpec("form_rf", inputs="rf", risk=risk), ModelSpec("cox_rf", kind="cox", inputs="rf"),
            ModelSpec("frax", kind="external", score_column="frax")]


def test_deterministic_report_serial_and_parallel():
    _, _, data = cohort(300, seed=7)
    a = run_protocol(data, small_rf_specs(), ProtocolConfig(k=3, reps=2, jobs=1, seed=5)).to_json()
    b = run_protocol(data, small_rf_specs(), ProtocolConfig(k=3, reps=2, jobs=1, seed=5)).to_json()
    c = run_protocol(data, small_rf_specs(), ProtocolConfig(k=3, reps=2, jobs=2, seed=5)).to_json()
    assert a == b == c
    doc = json.loads(a)
    validate_report(doc)
    assert {w["over"] for w in doc["welch"]} == {"folds", "reps"}
    assert doc["models"]["frax"]["fp"] is None  # percentage scale, not a probability
    assert doc["models"]["form_rf"]["fp"]["censored_survivors"]["n"] > 0


def test_single_class_fold_is_flagged():
    records = [PatientRecord(f"p{i}", {"age": 70.0 + i, "bmi": 25.0 + i % 3}, i == 0, 12.0 if i else 2.0,
                             2.0 if i == 0 else None) for i in range(10)]
    data = ProtocolData(records, default_schema())
    scores = {r.patient_id: float(i) for i, r in enumerate(records)}
    rep = run_protocol(data, [ModelSpec("s", kind="scores", scores=scores)], ProtocolConfig(k=5, reps=1, jobs=1))
    m = rep.models["s"]
    assert len(m["auc"]) == 1 and len(m["flagged"]) == 4


def test_protocol_config_validation():
    with pytest.raises(ValueError):
        ProtocolConfig(mode="bootstrap")
    with pytest.raises(ValueError):
        ProtocolConfig(k=5, ablation_fold=5)
    with pytest.raises(ValueError):
        ModelSpec("x", kind="external")
