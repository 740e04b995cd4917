"""Cross-validation protocol, statistics and evaluation reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .baselines import (
    CoxDivergence,
    RankDeficient,
    external_score_baseline,
    fit_cox_baseline,
    select_pca_components,
    survival_at_horizon,
)
from .cohort import PatientRecord, RiskFactorSchema, Status, canonical_group, encode_many, fit_normalization, label_fracture
from .extractor import ExtractorConfig, extract_gap_features, train_extractor
from .metrics import UndefinedAUC, roc_auc, roc_curve
from .nncore import NumericFault, TrainConfig
from .risk import RiskModelConfig, predict_risk, train_risk_model
from .splits import inner_split, kfold_split

log = logging.getLogger(__name__)

MODEL_KINDS = ("form", "cox", "external", "scores")
SCHEMA_NAME = "report_schema.json"


class DegenerateSample(ValueError):
    pass


class EmptySubgroup(ValueError):
    pass


# -- statistics -----------------------------------------------------------------------


def welch_test(a, b) -> tuple[float, float, float]:
    """Two-sided Welch t-test: (t, Welch-Satterthwaite df, p)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DegenerateSample("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0:
        raise DegenerateSample("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(min(1.0, max(2.0 * stats.t.sf(abs(t), df), np.finfo(float).tiny)))
    return float(t), float(df), p


def derive_seed(master: int, rep: int, fold: int) -> int:
    """Order-independent 32-bit seed for one (repetition, fold) task."""
    return int(np.random.SeedSequence([int(master), int(rep), int(fold)]).generate_state(1)[0])


def fp_rate(scores, threshold: float) -> float:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise EmptySubgroup("no scores")
    return float(np.mean(scores > threshold))


def censored_survivors(records: list[PatientRecord], horizon: float, min_years: float = 5.0) -> list[str]:
    """Patients censored before ``horizon`` who stayed fracture-free for ``min_years``."""
    out = []
    for r in records:
        if label_fracture(r, horizon).status is Status.CENSORED and r.followup_years >= min_years:
            if not (r.event_observed and r.event_time_years < min_years):
                out.append(r.patient_id)
    return out


def censored_subgroup_fp(rep_scores, threshold: float = 0.5) -> tuple[float, float]:
    """Fraction predicted positive per repetition; returns (mean, SE across repetitions)."""
    rates = [fp_rate(s, threshold) for s in rep_scores]
    if not rates:
        raise EmptySubgroup("no repetitions")
    rates = np.array(rates)
    se = float(rates.std(ddof=1) / math.sqrt(len(rates))) if len(rates) > 1 else 0.0
    return float(rates.mean()), se


# -- protocol inputs ----------------------------------------------------------------------


@dataclass
class ModelSpec:
    name: str
    kind: str = "form"
    inputs: str = "both"
    rf_group: str = "Base"
    risk: RiskModelConfig | None = None
    score_column: str | None = None
    scores: dict | None = None
    pca_candidates: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        from .risk import canonical_inputs

        self.inputs = canonical_inputs(self.inputs)
        self.rf_group = canonical_group(self.rf_group)
        if self.kind == "form" and self.risk is None:
            self.risk = RiskModelConfig(inputs=self.inputs, rf_group=self.rf_group)
        if self.kind == "external" and not self.score_column:
            raise ValueError("external model needs score_column")
        if self.kind == "scores" and self.scores is None:
            raise ValueError("scores model needs a score mapping")

    @property
    def uses_images(self) -> bool:
        return self.kind in ("form", "cox") and self.inputs in ("image", "both")

    @property
    def uses_rf(self) -> bool:
        return self.kind in ("form", "cox") and self.inputs in ("rf", "both")


@dataclass
class ProtocolConfig:
    k: int = 5
    reps: int = 10
    horizon: float = 10.0
    mode: str = "cv"  # "cv" or "ablation"
    ablation_fold: int = 0
    seed: int = 0
    threshold: float = 0.5
    subgroup_years: float = 5.0
    select_fraction: float = 0.2
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    jobs: int | None = None

    def __post_init__(self):
        if self.mode not in ("cv", "ablation"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.k < 2 or self.reps < 1:
            raise ValueError("need k >= 2 and reps >= 1")
        if not 0 <= self.ablation_fold < self.k:
            raise ValueError("ablation fold out of range")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class ProtocolData:
    records: list[PatientRecord]
    schema: RiskFactorSchema
    crops: dict[str, list[np.ndarray]] = field(default_factory=dict)


def resolve_jobs(jobs: int | None) -> int:
    env = os.environ.get("FORM_JOBS")
    if env:
        return max(1, int(env))
    if jobs:
        return max(1, int(jobs))
    return os.cpu_count() or 1


# -- one (repetition, fold) task ---------------------------------------------------------


def _eligible(data: ProtocolData, specs: list[ModelSpec]) -> list[PatientRecord]:
    need_images = any(s.uses_images for s in specs)
    groups = {s.rf_group for s in specs if s.uses_rf}
    cols = {s.score_column for s in specs if s.kind == "external"}
    out = []
    for r in data.records:
        if need_images and not data.crops.get(r.patient_id):
            continue
        if any(n not in r.rf_values for g in groups for n in (e.name for e in data.schema.group(g))):
            continue
        if any(c not in r.rf_values for c in cols):
            continue
        out.append(r)
    return out


def _halves(data, ids):
    imgs, owner = [], []
    for pid in ids:
        for crop in data.crops[pid]:
            imgs.append(crop)
            owner.append(pid)
    return np.asarray(imgs, dtype=np.float32), np.array(owner)


def _patient_mean(values, owner, ids):
    pos = {pid: i for i, pid in enumerate(ids)}
    out = np.zeros((len(ids), values.shape[1]))
    counts = np.zeros(len(ids))
    for v, o in zip(values, owner):
        out[pos[o]] += v
        counts[pos[o]] += 1
    return out / counts[:, None]


def _patient_max(values, owner, ids):
    pos = {pid: i for i, pid in enumerate(ids)}
    out = np.full(len(ids), -np.inf)
    for v, o in zip(values, owner):
        out[pos[o]] = max(out[pos[o]], v)
    return out


def _train_config(base: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**asdict(base), "seed": seed})


def run_task(data: ProtocolData, specs: list[ModelSpec], config: ProtocolConfig, folds: dict, rep: int,
             fold: int) -> dict:
    """Train every model on the training folds and score validation fold ``fold``."""
    seed = derive_seed(config.seed, rep, fold)
    seeds = np.random.SeedSequence(seed).generate_state(4 + len(specs))
    labels = {r.patient_id: label_fracture(r, config.horizon) for r in data.records}
    eligible = _eligible(data, specs)
    by_id = {r.patient_id: r for r in eligible}
    train_ids = [r.patient_id for r in eligible if folds[r.patient_id] != fold and labels[r.patient_id].is_labeled]
    val_ids = [r.patient_id for r in eligible if folds[r.patient_id] == fold and labels[r.patient_id].is_labeled]
    surv_ids = [pid for pid in censored_survivors([r for r in eligible if folds[r.patient_id] == fold],
                                                   config.horizon, config.subgroup_years)]
    y_tr = np.array([labels[p].target for p in train_ids])
    y_val = np.array([labels[p].target for p in val_ids])
    out = {"rep": rep, "fold": fold, "seed": seed, "n_train": len(train_ids), "n_val": len(val_ids),
           "n_val_pos": int(y_val.sum()), "n_survivors": len(surv_ids), "models": {}}
    if len(np.unique(y_val)) < 2:
        out["flagged"] = "single-class validation fold"
        log.warning("rep %d fold %d: single-class validation labels; fold flagged", rep, fold)
        return out
    fit_ids, sel_ids = inner_split(train_ids, y_tr, config.select_fraction, seed=int(seeds[0]))
    y_of = {p: labels[p].target for p in train_ids}

    gap = {}
    if any(s.uses_images for s in specs):
        ecfg = ExtractorConfig(**{**asdict(config.extractor), "seed": int(seeds[1] % 2**31),
                                  "train": _train_config(config.extractor.train, int(seeds[2]))})
        x_fit, o_fit = _halves(data, fit_ids)
        x_sel, o_sel = _halves(data, sel_ids)
        net, res = train_extractor(x_fit, [y_of[o] for o in o_fit], ecfg, val_images=x_sel,
                                   val_labels=[y_of[o] for o in o_sel], val_groups=o_sel)
        out["extractor_epoch"] = res.best_epoch
        for name, ids in (("fit", fit_ids), ("sel", sel_ids), ("val", val_ids), ("surv", surv_ids)):
            x, owner = _halves(data, ids)
            gap[name] = (extract_gap_features(net, x) if len(x) else np.zeros((0, ecfg.D)), owner, ids)

    for j, spec in enumerate(specs):
        mseed = int(seeds[4 + j])
        try:
            val_scores, surv_scores, extra = _score_model(spec, data, by_id, gap, fit_ids, sel_ids, train_ids,
                                                          val_ids, surv_ids, y_of, config, mseed)
        except (CoxDivergence, RankDeficient, NumericFault) as exc:
            log.warning("rep %d fold %d model %s failed: %s", rep, fold, spec.name, exc)
            out["models"][spec.name] = {"auc": None, "error": str(exc)}
            continue
        auc = roc_auc(val_scores, y_val)
        entry = {"auc": auc, "val_ids": val_ids, "val_scores": [float(v) for v in val_scores],
                 "val_labels": [int(v) for v in y_val], "surv_scores": [float(v) for v in surv_scores]}
        entry.update(extra)
        out["models"][spec.name] = entry
    return out


def _rf_matrix(spec, data, by_id, train_ids, ids):
    if not spec.uses_rf:
        return None, []
    schema = fit_normalization([by_id[p] for p in train_ids], data.schema, spec.rf_group)
    mat, excluded = encode_many([by_id[p] for p in ids], schema, spec.rf_group)
    if excluded:
        raise ValueError(f"patients with missing risk factors reached the protocol: {excluded[:3]}")
    names = []
    for e in schema.group(spec.rf_group):
        names += [e.name] if e.kind == "continuous" else [f"{e.name}={lvl}" for lvl in e.levels]
    return mat, names


def _score_model(spec, data, by_id, gap, fit_ids, sel_ids, train_ids, val_ids, surv_ids, y_of, config, seed):
    if spec.kind == "scores":
        return (np.array([spec.scores[p] for p in val_ids], dtype=float),
                np.array([spec.scores[p] for p in surv_ids], dtype=float), {})
    if spec.kind == "external":
        recs = [by_id[p] for p in val_ids + surv_ids]
        s = external_score_baseline(recs, spec.score_column)
        return np.array([s[p] for p in val_ids]), np.array([s[p] for p in surv_ids]), {}

    rf = {name: _rf_matrix(spec, data, by_id, train_ids, ids)[0]
          for name, ids in (("fit", fit_ids), ("sel", sel_ids), ("train", train_ids), ("val", val_ids),
                            ("surv", surv_ids))}
    rf_names = _rf_matrix(spec, data, by_id, train_ids, train_ids[:1])[1] if spec.uses_rf else []

    if spec.kind == "cox":
        return _score_cox(spec, by_id, gap, rf, rf_names, fit_ids, sel_ids, train_ids, val_ids, surv_ids, config)

    rcfg = RiskModelConfig(**{**asdict(spec.risk), "inputs": spec.inputs, "rf_group": spec.rf_group,
                              "seed": seed % 2**31, "train": _train_config(spec.risk.train, seed)})
    if spec.uses_images:
        rcfg.D = gap["fit"][0].shape[1]

        def side_rows(name, ids):
            feats, owner, _ = gap[name]
            pos = {p: i for i, p in enumerate(ids)}
            r = rf[name][[pos[o] for o in owner]] if spec.uses_rf else None
            return feats, r, owner

        g_fit, r_fit, o_fit = side_rows("fit", fit_ids)
        g_sel, r_sel, o_sel = side_rows("sel", sel_ids)
        model, res = train_risk_model(g_fit, r_fit, [y_of[o] for o in o_fit], rcfg, val_gap=g_sel, val_rf=r_sel,
                                      val_labels=[y_of[o] for o in o_sel], val_groups=o_sel)

        def score(name, ids):
            feats, r, owner = side_rows(name, ids)
            if not len(ids):
                return np.zeros(0)
            return _patient_max(predict_risk(model, feats, r), owner, ids)
    else:
        model, res = train_risk_model(None, rf["fit"], [y_of[p] for p in fit_ids], rcfg, val_rf=rf["sel"],
                                      val_labels=[y_of[p] for p in sel_ids])

        def score(name, ids):
            return predict_risk(model, None, rf[name]) if len(ids) else np.zeros(0)

    return score("val", val_ids), score("surv", surv_ids), {"risk_epoch": res.best_epoch}


def _score_cox(spec, by_id, gap, rf, rf_names, fit_ids, sel_ids, train_ids, val_ids, surv_ids, config):
    def patient_gap(name):
        feats, owner, ids = gap[name]
        return _patient_mean(feats, owner, ids) if len(ids) else np.zeros((0, feats.shape[1]))

    t_fit, e_fit = survival_at_horizon([by_id[p] for p in fit_ids], config.horizon)
    t_tr, e_tr = survival_at_horizon([by_id[p] for p in train_ids], config.horizon)
    extra = {}
    n_comp = None
    if spec.uses_images:
        train = {"gap": patient_gap("fit"), "rf": rf["fit"], "times": t_fit, "events": e_fit, "rf_names": rf_names}
        sel_labels = [label_fracture(by_id[p], config.horizon).target for p in sel_ids]
        _, n_comp, aucs = select_pca_components(train, {"gap": patient_gap("sel"), "rf": rf["sel"],
                                                        "labels": sel_labels}, spec.pca_candidates)
        extra = {"pca_components": n_comp, "pca_select_auc": {str(k): v for k, v in aucs.items()}}
        train_gap = np.concatenate([patient_gap("fit"), patient_gap("sel")])
        order = {p: i for i, p in enumerate(fit_ids + sel_ids)}
        train_gap = train_gap[[order[p] for p in train_ids]]
    else:
        train_gap = None
    base = fit_cox_baseline(train_gap, rf["train"], t_tr, e_tr, n_comp, rf_names)
    extra["coefficients"] = base.model.report()["covariates"]
    val = base.predict(patient_gap("val") if spec.uses_images else None, rf["val"])
    surv = base.predict(patient_gap("surv") if spec.uses_images else None, rf["surv"]) if surv_ids else np.zeros(0)
    return val, surv, extra


# -- protocol --------------------------------------------------------------------------------

_WORKER = {}


def _init_worker(data, specs, config, folds):
    _WORKER.update(data=data, specs=specs, config=config, folds=folds)


def _run_worker(task):
    w = _WORKER
    return run_task(w["data"], w["specs"], w["config"], w["folds"], *task)


def assign_folds(data: ProtocolData, config: ProtocolConfig) -> dict[str, int]:
    """Label-stratified folds fixed by the master seed (shared by every repetition and model)."""
    ids = [r.patient_id for r in data.records]
    strata = [label_fracture(r, config.horizon).status.value for r in data.records]
    return kfold_split(ids, k=config.k, seed=config.seed, strata=strata)


def run_protocol(data: ProtocolData, specs, config: ProtocolConfig) -> "EvaluationReport":
    """Cross-validated (or single-fold ablation) evaluation of one or more models.

    In cross-validation mode every fold is scored in every repetition; in
    ablation mode only ``config.ablation_fold`` is, across all repetitions.
    Models in one call share the fold assignment and, per task, the trained
    image feature extractor.
    """
    specs = [specs] if isinstance(specs, ModelSpec) else list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    folds = assign_folds(data, config)
    fold_list = range(config.k) if config.mode == "cv" else [config.ablation_fold]
    tasks = [(r, f) for r in range(config.reps) for f in fold_list]
    jobs = min(resolve_jobs(config.jobs), len(tasks))
    if jobs <= 1:
        results = [run_task(data, specs, config, folds, r, f) for r, f in tasks]
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(data, specs, config, folds)) as ex:
            results = list(ex.map(_run_worker, tasks))
    results.sort(key=lambda t: (t["rep"], t["fold"]))
    return EvaluationReport.build(specs, config, folds, results)


# -- report ---------------------------------------------------------------------------------------


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _mean_std(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class EvaluationReport:
    config: dict
    folds: dict
    tasks: list
    models: dict
    welch: list

    @classmethod
    def build(cls, specs, config: ProtocolConfig, folds, results) -> "EvaluationReport":
        models = {}
        for spec in specs:
            rows, flagged = [], []
            for t in results:
                m = t["models"].get(spec.name)
                if t.get("flagged"):
                    flagged.append({"rep": t["rep"], "fold": t["fold"], "reason": t["flagged"]})
                elif m is None or m["auc"] is None:
                    flagged.append({"rep": t["rep"], "fold": t["fold"], "reason": (m or {}).get("error", "missing")})
                else:
                    rows.append((t["rep"], t["fold"], m["auc"]))
            models[spec.name] = cls._aggregate(spec, config, rows, flagged, results)
        welch = []
        for i, a in enumerate(specs):
            for b in specs[i + 1 :]:
                for over in ("folds", "reps"):
                    xa, xb = models[a.name]["by_" + over], models[b.name]["by_" + over]
                    try:
                        t, df, p = welch_test(list(xa.values()), list(xb.values()))
                    except DegenerateSample:
                        continue
                    welch.append({"a": a.name, "b": b.name, "over": over, "t": t, "df": df, "p": p})
        cfg = asdict(config)
        cfg["jobs"] = None
        return cls(config=cfg, folds=dict(sorted(folds.items())), tasks=results, models=models, welch=welch)

    @staticmethod
    def _aggregate(spec, config, rows, flagged, results):
        by_fold, by_rep = {}, {}
        for rep, fold, auc in rows:
            by_fold.setdefault(fold, []).append(auc)
            by_rep.setdefault(rep, []).append(auc)
        fold_means = {str(f): float(np.mean(v)) for f, v in sorted(by_fold.items())}
        rep_means = {str(r): float(np.mean(v)) for r, v in sorted(by_rep.items())}
        all_auc = [a for _, _, a in rows]
        mean = float(np.mean(all_auc)) if all_auc else None
        _, std_folds = _mean_std(list(fold_means.values()))
        _, se_reps = _mean_se(list(rep_means.values()))
        entry = {
            "kind": spec.kind, "inputs": spec.inputs, "rf_group": spec.rf_group,
            "auc": [{"rep": r, "fold": f, "auc": a} for r, f, a in rows],
            "mean": mean, "std_folds": std_folds, "se_reps": se_reps,
            "by_folds": fold_means, "by_reps": rep_means, "flagged": flagged,
        }
        entry["fp"] = EvaluationReport._fp(spec, config, results)
        return entry

    @staticmethod
    def _fp(spec, config, results):
        """Per-repetition FP rates on validation negatives and on the censored survivors."""
        neg, surv = {}, {}
        for t in results:
            m = t["models"].get(spec.name)
            if not m or m.get("auc") is None:
                continue
            scores = np.array(m["val_scores"])
            labels = np.array(m["val_labels"])
            neg.setdefault(t["rep"], []).extend(scores[labels == 0].tolist())
            surv.setdefault(t["rep"], []).extend(m["surv_scores"])
        all_scores = [s for v in list(neg.values()) + list(surv.values()) for s in v]
        if not all_scores or min(all_scores) < 0 or max(all_scores) > 1:
            return None
        out = {"threshold": config.threshold}
        for name, groups in (("validation_negative", neg), ("censored_survivors", surv)):
            reps = [v for _, v in sorted(groups.items()) if v]
            if reps:
                mean, se = censored_subgroup_fp(reps, config.threshold)
                out[name] = {"mean": mean, "se": se, "n": int(np.mean([len(v) for v in reps]))}
            else:
                out[name] = None
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "folds": self.folds, "tasks": self.tasks, "models": self.models,
                "welch": self.welch}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def save(self, outdir) -> None:
        """report.json, aucs.csv (raw per-task AUCs) and roc_<model>.csv curves."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.json").write_text(self.to_json())
        with open(outdir / "aucs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "repetition", "fold", "auc"])
            for name, m in self.models.items():
                for row in m["auc"]:
                    w.writerow([name, row["rep"], row["fold"], repr(row["auc"])])
        for name in self.models:
            try:
                fpr, tpr, thr = self.roc(name)
            except UndefinedAUC:
                continue
            with open(outdir / f"roc_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr", "threshold"])
                for a, b, c in zip(fpr, tpr, thr):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])

    def roc(self, name: str):
        """ROC of pooled validation scores (every task) for model ``name``."""
        scores, labels = [], []
        for t in self.tasks:
            m = t["models"].get(name)
            if m and m.get("auc") is not None:
                scores += m["val_scores"]
                labels += m["val_labels"]
        return roc_curve(scores, labels)

    def compare(self, a: str, b: str, over: str = "folds") -> tuple[float, float, float]:
        if over not in ("folds", "reps"):
            raise ValueError("over must be 'folds' or 'reps'")
        return welch_test(list(self.models[a]["by_" + over].values()), list(self.models[b]["by_" + over].values()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def report_schema() -> dict:
    return json.loads(resources.files("formrisk").joinpath(SCHEMA_NAME).read_text(encoding="utf-8"))


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())


__all__ = [
    "DegenerateSample", "EmptySubgroup", "EvaluationReport", "ModelSpec", "ProtocolConfig", "ProtocolData",
    "UndefinedAUC", "assign_folds", "censored_subgroup_fp", "censored_survivors", "derive_seed", "fp_rate",
    "kfold_split", "resolve_jobs", "roc_auc", "roc_curve", "run_protocol", "run_task", "validate_report",
    "welch_test",
]
