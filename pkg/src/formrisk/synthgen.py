"""Synthetic hip cohorts drawn from a known fracture-hazard model.

Every patient gets a latent bone quality ``q ~ N(0, 1)`` that is rendered into
both hip halves as the width and brightness of a cortical rim around a
synthetic femoral head.  The true 10-year fracture probability is

    p = logistic(a0 - a1*q + a2*age_z + a3*fall + a4*smoking + a5*q*age_z)

with ``a0`` found by bisection so the cohort's mean ``p`` hits the requested
prevalence.  Fracture times are exponential with the constant hazard that
reproduces ``p`` at ten years, so shorter horizons are consistent.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import fgrid
from .cohort import PatientRecord, default_schema, write_manifest

KEYPOINT_NAMES = (
    "head_apex", "head_medial", "head_inferomedial", "head_center",
    "neck_superior", "neck_inferior", "greater_troch_tip", "greater_troch_lateral",
    "lesser_troch", "shaft_lateral", "shaft_medial", "shaft_canal",
)
CROP_KEYPOINTS = (0, 6, 8, 9, 10)
COMPLETENESS = ("complete", "incomplete", "implant")
SIDES = ("right", "left")
HORIZON = 10.0


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    n_patients: int = 500
    seed: int = 0
    ct_fraction: float = 0.0
    ct_dims: tuple[int, int, int] = (48, 64, 128)  # (anterior-posterior, superior-inferior, left-right)
    xray_dims: tuple[int, int] = (128, 256)
    phantom_top_range: tuple[float, float] = (0.62, 0.70)  # fraction of the AP extent
    phantom_thickness: tuple[int, int] = (4, 6)
    table_thickness: tuple[int, int] = (3, 5)
    a0: float | None = None  # None -> calibrated to ``prevalence``
    a1: float = 1.0
    a2: float = 0.5
    a3: float = 0.6
    a4: float = 0.5
    a5: float = -2.0
    prevalence: float = 0.03
    censor_fraction: float = 1.0 / 3.0
    implant_rate: float = 0.03
    incomplete_rate: float = 0.05
    missing_rf_rate: float = 0.0
    ct_gain_range: tuple[float, float] = (0.9, 1.1)

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if min(self.xray_dims) < 64:
            raise ValueError(f"X-ray dims must be >= 64 per axis, got {self.xray_dims}")
        if min(self.ct_dims) < 32:
            raise ValueError(f"CT dims must be >= 32 per axis, got {self.ct_dims}")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        for name in ("ct_fraction", "censor_fraction", "implant_rate", "incomplete_rate", "missing_rf_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.implant_rate + self.incomplete_rate > 1.0:
            raise ValueError("implant_rate + incomplete_rate must not exceed 1")
        lo, hi = self.phantom_top_range
        if not 0.3 < lo <= hi < 0.95:
            raise ValueError("phantom_top_range must be a sub-range of (0.3, 0.95)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown generator config keys {sorted(extra)}")
        data = dict(data)
        for key in ("ct_dims", "xray_dims", "phantom_top_range", "phantom_thickness", "table_thickness",
                    "ct_gain_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ImageStudy:
    patient_id: str
    modality: str  # "XRAY" | "CT3D"
    grid: np.ndarray


@dataclass
class GroundTruth:
    patient_ids: list[str]
    q: np.ndarray
    p: np.ndarray
    age_z: np.ndarray
    fall: np.ndarray
    smoking: np.ndarray
    fracture_time: np.ndarray
    fracture_10y: np.ndarray
    a0: float
    coefficients: dict
    modality: list[str]
    rim_width: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    completeness: list[tuple[str, str]] = field(default_factory=list)
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 12, 2)))
    markers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2, 2)))  # (head, lesser) per side
    crop_row: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def index(self) -> dict[str, int]:
        return {pid: i for i, pid in enumerate(self.patient_ids)}

    def to_json(self) -> dict:
        return {
            "a0": self.a0,
            "coefficients": self.coefficients,
            "patients": [
                {
                    "patient_id": pid,
                    "modality": self.modality[i],
                    "q": float(self.q[i]),
                    "p": float(self.p[i]),
                    "fracture_time": float(self.fracture_time[i]),
                    "rim_width": [float(v) for v in self.rim_width[i]],
                    "completeness": list(self.completeness[i]),
                    "keypoints": self.keypoints[i].tolist(),
                    "markers": self.markers[i].tolist(),
                    "crop_row": int(self.crop_row[i]),
                }
                for i, pid in enumerate(self.patient_ids)
            ],
        }


def logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def linear_predictor(coef: dict, q, age_z, fall, smoking):
    return (coef["a0"] - coef["a1"] * q + coef["a2"] * age_z + coef["a3"] * fall
            + coef["a4"] * smoking + coef["a5"] * q * age_z)


def calibrate_intercept(target: float, rest: np.ndarray, lo: float = -60.0, hi: float = 60.0,
                        tol: float = 1e-12) -> float:
    """Bisection for a0 with mean(logistic(a0 + rest)) == target."""

    def gap(a0):
        return float(np.mean(logistic(a0 + rest))) - target

    g_lo, g_hi = gap(lo), gap(hi)
    if not (g_lo <= 0.0 <= g_hi):
        raise GenerationError(
            f"cannot reach prevalence {target}: mean risk spans [{g_lo + target:.4f}, {g_hi + target:.4f}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def horizon_probability(p, horizon: float):
    """Fracture probability by ``horizon`` under the constant-hazard time model."""
    return 1.0 - (1.0 - np.asarray(p)) ** (horizon / HORIZON)


# -- rendering ------------------------------------------------------------------


def _disk(rr, cc, center, radius):
    d = np.hypot(rr - center[0], cc - center[1])
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def _segment(rr, cc, a, b, half_width):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    ab = b - a
    t = np.clip(((rr - a[0]) * ab[0] + (cc - a[1]) * ab[1]) / (ab @ ab), 0.0, 1.0)
    d = np.hypot(rr - (a[0] + t * ab[0]), cc - (a[1] + t * ab[1]))
    return np.clip(half_width - d + 0.5, 0.0, 1.0)


def render_half(shape: tuple[int, int], q: float, rng: np.random.Generator, state: str = "complete"):
    """One hip half in canonical orientation (medial side toward larger columns).

    Returns (image, keypoints (12, 2) as (row, col), markers (2, 2) for head
    center and lesser trochanter, rim width in pixels).
    """
    h, w = shape
    u = min(h, w)
    s = rng.uniform(0.92, 1.08)
    dy, dx = rng.uniform(-0.04, 0.04, size=2) * u
    rr, cc = np.mgrid[0:h, 0:w].astype(float)

    head = np.array([0.30 * h + dy, 0.62 * w + dx])
    radius = 0.12 * u * s
    rim = radius * float(np.clip(0.20 + 0.07 * q, 0.04, 0.45))
    rim_level = float(np.clip(0.80 + 0.06 * q, 0.5, 1.0))
    trab_level = 0.45 + 0.04 * q
    gt = np.array([0.36 * h + dy, 0.27 * w + dx])
    gt_r = 0.075 * u * s
    neck_end = np.array([0.44 * h + dy, 0.40 * w + dx])
    neck_hw = 0.065 * u * s
    shaft_c = 0.36 * w + dx
    shaft_w = 0.17 * u * s
    shaft_top = 0.40 * h + dy
    wall = 0.035 * u
    lt = np.array([0.56 * h + dy, shaft_c + shaft_w / 2 + 0.02 * u])
    lt_r = 0.035 * u * s
    shaft_row = 0.66 * h + dy

    img = 0.12 + gaussian_filter(rng.standard_normal((h, w)), 2.0) * 0.04
    texture = gaussian_filter(rng.standard_normal((h, w)), 1.0) * 0.05

    in_shaft = np.clip(np.minimum(cc - (shaft_c - shaft_w / 2), (shaft_c + shaft_w / 2) - cc) + 0.5, 0, 1)
    in_shaft = in_shaft * np.clip(rr - shaft_top + 0.5, 0, 1)
    inner = np.clip(np.minimum(cc - (shaft_c - shaft_w / 2 + wall), (shaft_c + shaft_w / 2 - wall) - cc) + 0.5, 0, 1)
    shaft_img = in_shaft * (0.85 - 0.45 * inner)
    img = np.maximum(img, shaft_img)
    img = np.maximum(img, _segment(rr, cc, head, neck_end, neck_hw) * (0.50 + texture))
    img = np.maximum(img, _disk(rr, cc, gt, gt_r) * (0.55 + texture))
    img = np.maximum(img, _disk(rr, cc, lt, lt_r) * 0.70)

    head_disk = _disk(rr, cc, head, radius)
    core = _disk(rr, cc, head, radius - rim)
    head_img = core * (trab_level + texture) + (head_disk - core) * rim_level
    img = np.where(head_disk > 0, (1 - head_disk) * img + head_img, img)

    if state == "implant":
        img = np.maximum(img, _segment(rr, cc, neck_end, (0.88 * h + dy, shaft_c), 0.035 * u) * 1.0)
        img = np.maximum(img, _disk(rr, cc, head, radius * 0.95) * 0.97)
    elif state == "incomplete":
        if rng.random() < 0.5:
            cut = int(head[0] + rng.uniform(0.0, 1.0) * radius)
            img[:cut, :] = 0.02
        else:
            cut = int(head[1] - rng.uniform(0.0, 1.0) * radius)
            img[:, cut:] = 0.02

    img = img + rng.normal(0.0, 0.015, size=(h, w))
    img = np.clip(img, 0.0, 1.0)

    kps = np.array([
        (head[0] - radius, head[1]),
        (head[0], head[1] + radius),
        head + radius * np.sqrt(0.5),
        (head[0], head[1]),
        head + (neck_end - head) * 0.5 + np.array([-neck_hw, 0.0]),
        head + (neck_end - head) * 0.5 + np.array([neck_hw, 0.0]),
        (gt[0] - gt_r, gt[1]),
        (gt[0], gt[1] - gt_r),
        (lt[0], lt[1]),
        (shaft_row, shaft_c - shaft_w / 2),
        (shaft_row, shaft_c + shaft_w / 2),
        (shaft_row, shaft_c),
    ])
    markers = np.array([head, lt])
    return img.astype(np.float32), kps, markers, rim


def noise_half(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A half image without anatomy (smoothed noise)."""
    h, w = shape
    base = rng.uniform(0.05, 0.6)
    img = base + gaussian_filter(rng.standard_normal((h, w)), rng.uniform(0.5, 4.0)) * rng.uniform(0.05, 0.3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def compose_halves(right: np.ndarray, left_canonical: np.ndarray) -> np.ndarray:
    """Full image: right hip on the image's left, left hip mirrored on the right."""
    return np.concatenate([right, left_canonical[:, ::-1]], axis=1)


def build_ct_volume(projection: np.ndarray, dims: tuple[int, int, int], rng: np.random.Generator,
                    config: GeneratorConfig) -> tuple[np.ndarray, int]:
    """Extrude a coronal image into an (AP, SI, LR) volume with phantom and table below.

    Returns (volume, crop row) where the crop row is the first AP row of the
    phantom/table complex.
    """
    depth, height, width = dims
    lo, hi = config.phantom_top_range
    crop = int(rng.integers(int(lo * depth), int(hi * depth) + 1))
    ph = int(rng.integers(config.phantom_thickness[0], config.phantom_thickness[1] + 1))
    gap = 1
    tb = int(rng.integers(config.table_thickness[0], config.table_thickness[1] + 1))
    if crop + ph + gap + tb > depth:
        raise GenerationError("CT depth too small for phantom and table bands")

    vol = np.zeros(dims, dtype=np.float64)
    body_top = int(rng.integers(1, max(2, depth // 10) + 1))
    n_rows = crop - body_top
    # body: an elliptical axial cross-section resting on the phantom
    d = np.arange(depth)[:, None]
    x = np.arange(width)[None, :]
    cy = (body_top + crop - 1) / 2.0
    ry = n_rows / 2.0 + 0.5
    rx = width * rng.uniform(0.44, 0.48)
    ellipse = ((d - cy) / ry) ** 2 + ((x - (width - 1) / 2.0) / rx) ** 2 <= 1.0
    ellipse[crop:] = False
    tissue = 0.15 * ellipse.astype(float)
    n_bone = max(4, n_rows // 3)
    b0 = int(round(cy - n_bone / 2))
    bone_scale = crop / n_bone * 0.85
    for di in range(depth):
        vol[di] = tissue[di][None, :]
        if b0 <= di < b0 + n_bone:
            vol[di] += np.clip(projection - 0.12, 0.0, None) * bone_scale * ellipse[di][None, :]
    vol[crop : crop + ph] = 4.0 + rng.normal(0.0, 0.05, size=(ph, height, width))
    vol[crop + ph + gap : crop + ph + gap + tb] = 2.5
    gain = rng.uniform(*config.ct_gain_range)
    vol = vol * gain + rng.normal(0.0, 0.01, size=dims)
    return vol.astype(np.float32), crop


# -- cohort ---------------------------------------------------------------------


def _rf_table(n: int, rng: np.random.Generator):
    age = np.clip(rng.normal(74.0, 6.0, n), 65.0, 95.0)
    return {
        "age": age,
        "bmi": np.clip(rng.normal(27.0, 3.8, n), 16.0, 45.0),
        "fall_history": (rng.random(n) < 0.20).astype(float),
        "smoking": (rng.random(n) < 0.15).astype(float),
        "alcohol": (rng.random(n) < 0.30).astype(float),
        "cancer": (rng.random(n) < 0.15).astype(float),
        "hypertension": (rng.random(n) < 0.45).astype(float),
    }


def rf_only_probability(coef: dict, age_z, fall, smoking, horizon: float = HORIZON, n_nodes: int = 64):
    """E[p_h | risk factors], integrating q ~ N(0, 1) by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / weights.sum()
    eta = linear_predictor(coef, nodes[None, :], np.asarray(age_z)[:, None],
                           np.asarray(fall)[:, None], np.asarray(smoking)[:, None])
    return horizon_probability(logistic(eta), horizon) @ weights


def image_only_probability(coef: dict, q, age_z, fall, smoking, horizon: float = HORIZON, chunk: int = 512):
    """E[p_h | q], averaging over the cohort's empirical risk-factor distribution."""
    q = np.asarray(q, float)
    out = np.empty(len(q))
    for start in range(0, len(q), chunk):
        qs = q[start : start + chunk, None]
        eta = linear_predictor(coef, qs, age_z[None, :], fall[None, :], smoking[None, :])
        out[start : start + chunk] = horizon_probability(logistic(eta), horizon).mean(axis=1)
    return out


def generate_records(config: GeneratorConfig) -> tuple[list[PatientRecord], GroundTruth]:
    """Risk factors, outcomes and latent variables (no images)."""
    config.validate()
    n = config.n_patients
    ss = np.random.SeedSequence(config.seed)
    rng = np.random.default_rng(ss.spawn(1)[0])

    rf = _rf_table(n, rng)
    q = rng.standard_normal(n)
    age_z = (rf["age"] - 74.0) / 6.0
    coef = {"a0": 0.0, "a1": config.a1, "a2": config.a2, "a3": config.a3, "a4": config.a4, "a5": config.a5}
    rest = linear_predictor(coef, q, age_z, rf["fall_history"], rf["smoking"])
    if not np.all(np.isfinite(rest)):
        raise GenerationError("non-finite hazard coefficients")
    a0 = config.a0 if config.a0 is not None else calibrate_intercept(config.prevalence, rest)
    coef["a0"] = float(a0)
    p = logistic(a0 + rest)

    hazard = -np.log1p(-np.minimum(p, 1 - 1e-15)) / HORIZON
    t_fx = rng.exponential(1.0, n) / np.maximum(hazard, 1e-300)
    censored = rng.random(n) < config.censor_fraction
    followup = np.where(censored, rng.uniform(0.5, HORIZON, n), rng.uniform(HORIZON + 0.5, 15.0, n))
    observed = t_fx <= followup

    rf["abmd"] = 0.95 + 0.12 * (0.8 * q + 0.6 * rng.standard_normal(n))
    rf["tbs"] = 1.30 + 0.10 * (0.6 * q + 0.8 * rng.standard_normal(n))
    rf["frax"] = 100.0 * rf_only_probability(coef, age_z, rf["fall_history"], rf["smoking"])
    modality = np.where(rng.random(n) < config.ct_fraction, "CT3D", "XRAY")
    missing = rng.random((n, len(rf))) < config.missing_rf_rate

    names = default_schema().names
    width = len(str(n - 1))
    ids = [f"P{i:0{width}d}" for i in range(n)]
    records = []
    for i, pid in enumerate(ids):
        values = {}
        for j, name in enumerate(names):
            if not missing[i, j]:
                values[name] = float(rf[name][i])
        records.append(PatientRecord(
            patient_id=pid,
            rf_values=values,
            event_observed=bool(observed[i]),
            followup_years=float(min(followup[i], t_fx[i]) if observed[i] else followup[i]),
            event_time_years=float(t_fx[i]) if observed[i] else None,
        ))

    truth = GroundTruth(
        patient_ids=ids, q=q, p=p, age_z=age_z, fall=rf["fall_history"], smoking=rf["smoking"],
        fracture_time=t_fx, fracture_10y=t_fx <= HORIZON, a0=float(a0), coefficients=coef,
        modality=[str(m) for m in modality],
        rim_width=np.zeros((n, 2)), completeness=[("complete", "complete")] * n,
        keypoints=np.zeros((n, 2, 12, 2)), markers=np.zeros((n, 2, 2, 2)),
        crop_row=np.full(n, -1, dtype=int),
    )
    return records, truth


def patient_seeds(config: GeneratorConfig) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(config.seed).spawn(config.n_patients + 1)[1:]


def render_study(config: GeneratorConfig, truth: GroundTruth, i: int,
                 seed: np.random.SeedSequence | None = None) -> ImageStudy:
    """Render patient ``i``'s image and fill its ground-truth geometry in place."""
    if seed is None:
        seed = patient_seeds(config)[i]
    rng = np.random.default_rng(seed)
    modality = truth.modality[i]
    if modality == "CT3D":
        height, width = config.ct_dims[1], config.ct_dims[2]
    else:
        height, width = config.xray_dims
    half_w = width // 2
    halves, states = [], []
    for side in range(2):
        u = rng.random()
        if u < config.implant_rate:
            state = "implant"
        elif u < config.implant_rate + config.incomplete_rate:
            state = "incomplete"
        else:
            state = "complete"
        img, kps, markers, rim = render_half((height, half_w), truth.q[i], rng, state)
        halves.append(img)
        states.append(state)
        truth.keypoints[i, side] = kps
        truth.markers[i, side] = markers
        truth.rim_width[i, side] = rim
    truth.completeness[i] = tuple(states)
    image = compose_halves(halves[0], halves[1])
    if width % 2:
        image = np.concatenate([image[:, :half_w], image[:, half_w - 1 : half_w], image[:, half_w:]], axis=1)
    if modality == "CT3D":
        volume, crop = build_ct_volume(image, config.ct_dims, rng, config)
        truth.crop_row[i] = crop
        return ImageStudy(truth.patient_ids[i], modality, volume)
    return ImageStudy(truth.patient_ids[i], modality, image.astype(np.float32))


def generate_cohort(config: GeneratorConfig):
    """(records, studies, ground truth) for ``config``; deterministic in ``config.seed``."""
    records, truth = generate_records(config)
    seeds = patient_seeds(config)
    studies = [render_study(config, truth, i, seeds[i]) for i in range(config.n_patients)]
    return records, studies, truth


# -- oracles --------------------------------------------------------------------


def scope_probability(truth: GroundTruth, scope: str, horizon: float = HORIZON) -> np.ndarray:
    """True fracture probability restricted to the information in ``scope``."""
    coef = truth.coefficients
    scope = scope.lower()
    if scope == "both":
        return horizon_probability(truth.p, horizon)
    if scope == "rfonly":
        return rf_only_probability(coef, truth.age_z, truth.fall, truth.smoking, horizon)
    if scope == "imageonly":
        return image_only_probability(coef, truth.q, truth.age_z, truth.fall, truth.smoking, horizon)
    raise ValueError(f"unknown scope {scope!r}; expected ImageOnly, RFOnly or Both")


def bayes_auc(truth: GroundTruth, labels: dict, scope: str = "Both", min_labeled: int = 500) -> float:
    """AUC of the scope-restricted true probability over all labeled patients.

    ``labels`` maps patient id to an OutcomeLabel (censored ones are skipped).
    Concordance is counted exhaustively over positive/negative pairs.
    """
    idx = truth.index()
    rows, y = [], []
    horizon = None
    for pid, lab in labels.items():
        if not lab.is_labeled:
            continue
        rows.append(idx[pid])
        y.append(lab.target)
        horizon = lab.horizon_years
    if len(rows) < min_labeled:
        raise ValueError(f"bayes_auc needs >= {min_labeled} labeled patients, got {len(rows)}")
    score = scope_probability(truth, scope, horizon)[np.array(rows)]
    return pairwise_auc(score, np.array(y))


def pairwise_auc(scores, labels) -> float:
    """Exhaustive concordance over all positive/negative pairs."""
    from .metrics import UndefinedAUC

    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUC("AUC needs both classes")
    total = 0.0
    for start in range(0, pos.size, 256):
        block = pos[start : start + 256, None]
        total += float(np.sum(block > neg[None, :]) + 0.5 * np.sum(block == neg[None, :]))
    return total / (pos.size * neg.size)


def hanley_mcneil_se(auc: float, n_pos: int, n_neg: int) -> float:
    q1 = auc / (2 - auc)
    q2 = 2 * auc * auc / (1 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc * auc) + (n_neg - 1) * (q2 - auc * auc)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


# -- on-disk dataset ------------------------------------------------------------


def write_dataset(outdir, config: GeneratorConfig) -> dict:
    """Manifest, image index, FGRID grids, ground truth JSON and the schema."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    records, truth = generate_records(config)
    schema = default_schema()
    write_manifest(outdir / "manifest.csv", records, schema.names)
    schema.save(outdir / "schema.json")
    seeds = patient_seeds(config)
    with open(outdir / "images.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "modality", "side", "path"])
        for i in range(config.n_patients):
            study = render_study(config, truth, i, seeds[i])
            rel = f"images/{study.patient_id}.fgrid"
            fgrid.write(outdir / rel, study.grid)
            w.writerow([study.patient_id, study.modality, "both", rel])
    (outdir / "ground_truth.json").write_text(json.dumps(truth.to_json(), sort_keys=True) + "\n")
    (outdir / "generator.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    return {"records": len(records), "path": str(outdir)}
