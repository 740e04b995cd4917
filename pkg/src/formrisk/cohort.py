"""Patients, risk-factor schemas, outcome labels and the cohort manifest."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

GROUPS = ("Base", "Multiple", "aBMD", "FRAX", "TBS")


class ValidationError(ValueError):
    """Malformed record or manifest."""


class ConfigurationError(ValueError):
    """Schema or normalization problem that makes encoding impossible."""


class MissingRiskFactor(KeyError):
    """A required risk factor is absent; the patient must be excluded."""

    def __init__(self, patient_id: str, name: str):
        super().__init__(name)
        self.patient_id = patient_id
        self.name = name

    def __str__(self):
        return f"patient {self.patient_id}: missing risk factor {self.name!r}"


class Status(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    CENSORED = "censored"


@dataclass(frozen=True)
class OutcomeLabel:
    status: Status
    horizon_years: float

    @property
    def is_labeled(self) -> bool:
        return self.status is not Status.CENSORED

    @property
    def target(self) -> int:
        if self.status is Status.CENSORED:
            raise ValueError("censored outcome has no binary target")
        return int(self.status is Status.POSITIVE)


@dataclass
class PatientRecord:
    patient_id: str
    rf_values: dict[str, float]
    event_observed: bool
    followup_years: float
    event_time_years: float | None = None

    def validate(self) -> None:
        if self.followup_years is None or not math.isfinite(self.followup_years) or self.followup_years < 0:
            raise ValidationError(f"{self.patient_id}: followup_years must be a nonnegative number")
        if self.event_observed:
            t = self.event_time_years
            if t is None or not math.isfinite(t) or t < 0:
                raise ValidationError(f"{self.patient_id}: observed event needs a nonnegative event time")
        elif self.event_time_years is not None:
            raise ValidationError(f"{self.patient_id}: event time given without an observed event")


def label_fracture(record: PatientRecord, horizon_years: float) -> OutcomeLabel:
    """Positive / Negative / Censored status of ``record`` at ``horizon_years``."""
    if not horizon_years > 0:
        raise ValueError(f"horizon must be positive, got {horizon_years}")
    record.validate()
    if record.event_observed and record.event_time_years <= horizon_years:
        status = Status.POSITIVE
    elif record.followup_years >= horizon_years:
        status = Status.NEGATIVE
    else:
        status = Status.CENSORED
    return OutcomeLabel(status, float(horizon_years))


@dataclass(frozen=True)
class RiskFactor:
    name: str
    kind: str  # "continuous" | "categorical"
    groups: frozenset[str]
    levels: tuple[str, ...] = ()
    mean: float | None = None
    std: float | None = None

    @property
    def width(self) -> int:
        return 1 if self.kind == "continuous" else len(self.levels)


@dataclass(frozen=True)
class RiskFactorSchema:
    entries: tuple[RiskFactor, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate risk factor names in {names}")
        for e in self.entries:
            if e.kind not in ("continuous", "categorical"):
                raise ConfigurationError(f"{e.name}: unknown kind {e.kind!r}")
            if e.kind == "categorical" and len(e.levels) < 2:
                raise ConfigurationError(f"{e.name}: categorical factors need at least 2 levels")
            unknown = set(e.groups) - set(GROUPS)
            if unknown:
                raise ConfigurationError(f"{e.name}: unknown groups {sorted(unknown)}")
            if "Base" in e.groups and "Multiple" not in e.groups:
                raise ConfigurationError(f"{e.name}: Base factors must also belong to Multiple")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def group(self, group: str) -> list[RiskFactor]:
        group = canonical_group(group)
        return [e for e in self.entries if group in e.groups]

    def width(self, group: str) -> int:
        return sum(e.width for e in self.group(group))

    def with_entry(self, entry: RiskFactor) -> "RiskFactorSchema":
        return RiskFactorSchema(self.entries + (entry,))

    def to_dict(self) -> dict:
        out = []
        for e in self.entries:
            d = {"name": e.name, "kind": e.kind, "groups": sorted(e.groups)}
            if e.levels:
                d["levels"] = list(e.levels)
            if e.mean is not None:
                d["mean"] = e.mean
                d["std"] = e.std
            out.append(d)
        return {"entries": out}

    @classmethod
    def from_dict(cls, data: dict) -> "RiskFactorSchema":
        entries = []
        for d in data["entries"]:
            extra = set(d) - {"name", "kind", "groups", "levels", "mean", "std"}
            if extra:
                raise ConfigurationError(f"unknown schema keys {sorted(extra)}")
            entries.append(RiskFactor(
                name=d["name"], kind=d["kind"], groups=frozenset(d.get("groups", ())),
                levels=tuple(d.get("levels", ())), mean=d.get("mean"), std=d.get("std"),
            ))
        return cls(tuple(entries))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RiskFactorSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def canonical_group(group: str) -> str:
    for g in GROUPS:
        if g.lower() == str(group).lower():
            return g
    raise ConfigurationError(f"unknown risk-factor group {group!r}; expected one of {GROUPS}")


def default_schema() -> RiskFactorSchema:
    """Base = {age, bmi}; Multiple adds questionnaire items; densitometric groups add one score each."""
    everything = frozenset(GROUPS)
    yes_no = ("no", "yes")
    multiple = frozenset({"Multiple"})
    return RiskFactorSchema((
        RiskFactor("age", "continuous", everything),
        RiskFactor("bmi", "continuous", everything),
        RiskFactor("fall_history", "categorical", multiple, yes_no),
        RiskFactor("smoking", "categorical", multiple, yes_no),
        RiskFactor("alcohol", "categorical", multiple, yes_no),
        RiskFactor("cancer", "categorical", multiple, yes_no),
        RiskFactor("hypertension", "categorical", multiple, yes_no),
        RiskFactor("abmd", "continuous", frozenset({"aBMD"})),
        RiskFactor("frax", "continuous", frozenset({"FRAX"})),
        RiskFactor("tbs", "continuous", frozenset({"TBS"})),
    ))


def fit_normalization(records: list[PatientRecord], schema: RiskFactorSchema,
                      group: str | None = None) -> RiskFactorSchema:
    """Schema copy whose continuous entries carry training-sample mean and std (n-1).

    With ``group`` only that group's entries are fitted; the rest are copied unchanged.
    """
    if not records:
        raise ValueError("cannot fit normalization on an empty training set")
    wanted = None if group is None else {e.name for e in schema.group(group)}
    fitted = []
    for e in schema.entries:
        if e.kind != "continuous" or (wanted is not None and e.name not in wanted):
            fitted.append(e)
            continue
        values = [r.rf_values.get(e.name) for r in records]
        values = np.array([v for v in values if v is not None and not _is_nan(v)], dtype=float)
        if values.size < 2:
            raise ValueError(f"{e.name}: need at least 2 training values, got {values.size}")
        std = float(values.std(ddof=1))
        if std == 0.0:
            raise ConfigurationError(f"{e.name}: zero standard deviation in training data")
        fitted.append(replace(e, mean=float(values.mean()), std=std))
    return RiskFactorSchema(tuple(fitted))


def _is_nan(v) -> bool:
    return isinstance(v, float) and math.isnan(v)


def encode_risk_factors(record: PatientRecord, schema: RiskFactorSchema, group: str) -> np.ndarray:
    """One-hot categorical blocks and z-scored continuous values in schema order."""
    parts = []
    for e in schema.group(group):
        v = record.rf_values.get(e.name)
        if v is None or _is_nan(v):
            raise MissingRiskFactor(record.patient_id, e.name)
        if e.kind == "continuous":
            if e.mean is None or e.std is None:
                raise ConfigurationError(f"{e.name}: normalization statistics not fitted")
            if e.std == 0:
                raise ConfigurationError(f"{e.name}: zero standard deviation")
            parts.append([(float(v) - e.mean) / e.std])
        else:
            level = int(v)
            if level != v or not 0 <= level < len(e.levels):
                raise ValidationError(f"{record.patient_id}: {e.name} level {v} out of range")
            block = [0.0] * len(e.levels)
            block[level] = 1.0
            parts.append(block)
    return np.array([x for p in parts for x in p], dtype=float)


def encode_many(records, schema, group) -> tuple[np.ndarray, list[str]]:
    """Encode every record that has all factors; returns (matrix, excluded ids)."""
    rows, excluded = [], []
    for r in records:
        try:
            rows.append(encode_risk_factors(r, schema, group))
        except MissingRiskFactor:
            excluded.append(r.patient_id)
    width = schema.width(group)
    return (np.vstack(rows) if rows else np.zeros((0, width))), excluded


# -- manifest -----------------------------------------------------------------

MANIFEST_FIXED = ("patient_id", "event_observed", "event_time_years", "followup_years")


def write_manifest(path, records: list[PatientRecord], rf_names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_FIXED) + list(rf_names))
        for r in records:
            row = [r.patient_id, int(r.event_observed),
                   "" if r.event_time_years is None else repr(float(r.event_time_years)),
                   repr(float(r.followup_years))]
            for name in rf_names:
                v = r.rf_values.get(name)
                row.append("" if v is None else _fmt_value(v))
            w.writerow(row)


def _fmt_value(v) -> str:
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def read_manifest(path, schema: RiskFactorSchema | None = None) -> list[PatientRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_FIXED if c not in header]
        if missing:
            raise ValidationError(f"manifest missing columns {missing}")
        rf_names = [c for c in header if c not in MANIFEST_FIXED]
        if schema is not None:
            unknown = set(rf_names) - set(schema.names)
            if unknown:
                raise ValidationError(f"manifest columns not in schema: {sorted(unknown)}")
        records = []
        for row in reader:
            try:
                rf = {n: float(row[n]) for n in rf_names if row[n] != ""}
                et = row["event_time_years"]
                rec = PatientRecord(
                    patient_id=row["patient_id"],
                    rf_values=rf,
                    event_observed=bool(int(row["event_observed"])),
                    followup_years=float(row["followup_years"]),
                    event_time_years=float(et) if et != "" else None,
                )
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"bad manifest row {row.get('patient_id')!r}: {exc}") from exc
            rec.validate()
            records.append(rec)
    return records


@dataclass
class Cohort:
    records: list[PatientRecord]
    schema: RiskFactorSchema = field(default_factory=default_schema)

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.patient_id: r for r in self.records}

    def labels(self, horizon_years: float) -> dict[str, OutcomeLabel]:
        return {r.patient_id: label_fracture(r, horizon_years) for r in self.records}
