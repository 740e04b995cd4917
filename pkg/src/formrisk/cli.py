"""Command-line front end: ``formrisk synth | preprocess | run``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fgrid
from .baselines import CoxDivergence
from .cohort import ConfigurationError, RiskFactorSchema, ValidationError, canonical_group, read_manifest
from .evalharness import (
    ModelSpec,
    ProtocolConfig,
    ProtocolData,
    run_protocol,
    validate_report,
)
from .extractor import ExtractorConfig
from .nncore import NumericFault, TrainConfig
from .nncore.serialize import ModelFileError
from .preprocess import KeypointDetector, PreprocessConfig, preprocess_dataset, training_halves
from .risk import RiskModelConfig, write_predictions
from .synthgen import GenerationError, GeneratorConfig, write_dataset

log = logging.getLogger("formrisk")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(ValueError):
    """Invalid or incompatible command-line / config-file settings."""


# -- config handling ----------------------------------------------------------------------------


def build_dataclass(cls, data: dict, where: str):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys (recursively for nested dataclasses)."""
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise UsageError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = build_dataclass(type(default), value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise UsageError(f"{where}: {exc}") from exc


def load_config(path, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"{path}: unknown sections {unknown}; allowed: {sorted(allowed)}")
    return data


def _snapshot(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj), default=list))


def _setup_run_dir(outdir: Path, command: str, snapshot: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(json.dumps({"command": command, **snapshot}, indent=2, sort_keys=True) + "\n")
    handler = logging.FileHandler(outdir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("formrisk").addHandler(handler)


# -- commands -------------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, {"generator"})
    gen = build_dataclass(GeneratorConfig, cfg.get("generator", {}), "generator")
    overrides = {"n_patients": args.n, "seed": args.seed, "prevalence": args.prevalence,
                 "ct_fraction": args.ct_fraction}
    gen = dataclasses.replace(gen, **{k: v for k, v in overrides.items() if v is not None})
    gen.validate()
    out = Path(args.out)
    _setup_run_dir(out, "synth", {"generator": gen.to_dict()})
    info = write_dataset(out, gen)
    log.info("wrote %d patients to %s", info["records"], out)
    return EXIT_OK


def _detector_for(args, dataset: Path, pcfg: PreprocessConfig, dcfg: dict, out: Path) -> KeypointDetector:
    if args.detector:
        return KeypointDetector.load(args.detector)
    if not (dataset / "ground_truth.json").exists():
        raise UsageError("no --detector given and the dataset has no annotations to train one")
    halves, points, classes = training_halves(dataset, pcfg, seed=dcfg.get("seed", 0))
    det = KeypointDetector(input_size=dcfg.get("input_size", 64), width=dcfg.get("width", 16),
                           seed=dcfg.get("seed", 0))
    det.fit(halves, points, classes, epochs=dcfg.get("epochs", 40), lr=dcfg.get("lr", 3e-3),
            batch_size=dcfg.get("batch_size", 16), seed=dcfg.get("seed", 0))
    det.save(out / "detector.fnet")
    return det


DETECTOR_KEYS = {"input_size", "width", "seed", "epochs", "lr", "batch_size"}


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, {"preprocess", "detector"})
    pre = dict(cfg.get("preprocess", {}))
    pre["modality"] = args.modality
    if args.target_size:
        pre["target_dims"] = [args.target_size, args.target_size]
    pcfg = build_dataclass(PreprocessConfig, pre, "preprocess")
    dcfg = cfg.get("detector", {})
    unknown = sorted(set(dcfg) - DETECTOR_KEYS)
    if unknown:
        raise UsageError(f"detector: unknown keys {unknown}")
    dataset, out = Path(args.dataset), Path(args.out)
    _setup_run_dir(out, "preprocess", {"preprocess": _snapshot(pcfg), "detector": dcfg,
                                       "detector_path": args.detector})
    det = _detector_for(args, dataset, pcfg, dcfg, out)
    summary = preprocess_dataset(dataset, out, det, pcfg)
    log.info("preprocess: %s", summary)
    return EXIT_OK


def load_protocol_data(dataset: Path) -> ProtocolData:
    schema = RiskFactorSchema.load(dataset / "schema.json")
    records = read_manifest(dataset / "manifest.csv", schema)
    crops: dict[str, list] = {}
    if (dataset / "crops.csv").exists():
        with open(dataset / "crops.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                crops.setdefault(row["patient_id"], []).append(fgrid.read(dataset / row["path"]))
    return ProtocolData(records, schema, crops)


def cmd_run(args) -> int:
    cfg = load_config(args.config, {"protocol", "extractor", "risk", "train"})
    dataset, out = Path(args.dataset), Path(args.out)
    data = load_protocol_data(dataset)

    train = build_dataclass(TrainConfig, cfg.get("train", {}), "train")
    ext = dict(cfg.get("extractor", {}))
    ext.setdefault("train", dataclasses.asdict(train))
    extractor = build_dataclass(ExtractorConfig, ext, "extractor")
    proto = dict(cfg.get("protocol", {}))
    if "extractor" in proto:
        raise UsageError("protocol.extractor: use the top-level 'extractor' section")
    proto.update({"k": args.folds, "reps": args.reps, "horizon": float(args.horizon), "seed": args.seed,
                  "mode": args.mode})
    if args.jobs is not None:
        proto["jobs"] = args.jobs
    pconfig = build_dataclass(ProtocolConfig, proto, "protocol")
    pconfig.extractor = extractor

    rf_group = canonical_group(args.rf_group)
    if args.model == "external":
        spec = ModelSpec(name="external", kind="external", inputs="rf", score_column=args.score_column)
    else:
        if args.inputs in ("image", "both") and not data.crops:
            raise UsageError(f"--model {args.model} --inputs {args.inputs} needs a preprocessed dataset with crops")
        risk = dict(cfg.get("risk", {}))
        risk.setdefault("train", dataclasses.asdict(train))
        risk.update({"inputs": args.inputs, "rf_group": rf_group})
        rcfg = build_dataclass(RiskModelConfig, risk, "risk")
        spec = ModelSpec(name=f"{args.model}_{args.inputs}", kind=args.model, inputs=args.inputs,
                         rf_group=rf_group, risk=rcfg)
    if args.model != "form" and "risk" in cfg:
        log.warning("the 'risk' config section is ignored for --model %s", args.model)

    snapshot = {"dataset": str(dataset), "model": args.model, "inputs": args.inputs, "rf_group": rf_group,
                "score_column": args.score_column, "protocol": {**_snapshot(pconfig), "jobs": None},
                "risk": _snapshot(spec.risk) if spec.risk else None}
    _setup_run_dir(out, "run", snapshot)
    report = run_protocol(data, [spec], pconfig)
    doc = json.loads(report.to_json())
    validate_report(doc)
    report.save(out)
    if spec.kind == "form":
        rows = []
        for t in report.tasks:
            m = t["models"].get(spec.name)
            if m and m.get("auc") is not None:
                rows += [(pid, p, t["fold"], t["rep"]) for pid, p in zip(m["val_ids"], m["val_scores"])]
        write_predictions(out / "predictions.csv", rows)
    m = report.models[spec.name]
    print(f"{spec.name}: mean AUC {m['mean']:.4f} (STD folds {m['std_folds']}, SE reps {m['se_reps']})"
          if m["mean"] is not None else f"{spec.name}: no evaluable folds")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="formrisk", description=__doc__)
    p.add_argument("--workdir", default=".", help="base directory for every relative path")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--prevalence", type=float)
    s.add_argument("--ct-fraction", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="crop proximal femur regions from a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--modality", choices=["xray", "ct", "ctn"], default="xray")
    s.add_argument("--detector", help="trained keypoint detector; trained on dataset annotations if omitted")
    s.add_argument("--target-size", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("run", help="cross-validated evaluation of one model configuration")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model", choices=["form", "cox", "external"], default="form")
    s.add_argument("--inputs", choices=["image", "rf", "both"], default="both")
    s.add_argument("--rf-group", choices=["base", "multiple", "abmd", "frax", "tbs"], default="base")
    s.add_argument("--score-column", default="frax")
    s.add_argument("--horizon", type=int, choices=[5, 10], default=10)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--mode", choices=["cv", "ablation"], default="cv")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_run)
    return p


def _resolve_paths(args) -> None:
    base = Path(args.workdir)
    for key in ("out", "dataset", "config", "detector"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(args, key, str(base / value))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("formrisk").setLevel(getattr(logging, args.log_level))
    _resolve_paths(args)
    try:
        with np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except (OSError, fgrid.FGridError, ModelFileError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (UsageError, ValidationError, ConfigurationError, GenerationError, ValueError, KeyError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except (NumericFault, CoxDivergence, FloatingPointError) as exc:
        log.error("numeric fault: %s", exc)
        return EXIT_NUMERIC
    finally:
        for h in list(logging.getLogger("formrisk").handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger("formrisk").removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
