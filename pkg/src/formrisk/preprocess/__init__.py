"""Image preprocessing: phantom removal, projection, rescaling, hip splitting,
keypoint-based completeness filtering and proximal-femur cropping."""
from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import fgrid
from ..cohort import RiskFactorSchema, canonical_group, read_manifest
from .geometry import (
    CROP_KEYPOINTS,
    CROP_PADDING,
    TARGET_DIMS,
    RescaleWarning,
    crop_femur,
    femur_box,
    flip_half,
    project_coronal,
    rescale,
    resample,
    resize,
    split_halves,
)
from .keypoints import (
    CLASSES,
    N_KEYPOINTS,
    THRESHOLDS,
    KeyPointSet,
    KeypointDetector,
    completeness_filter,
    detect_keypoints,
)
from .phantom import NoPhantomFound, detect_phantom_crop, remove_phantom

log = logging.getLogger(__name__)

SIDES = ("right", "left")
# cli modality -> (grid modality, rescale mode)
MODALITIES = {"xray": ("XRAY", "global"), "ct": ("CT3D", "global"), "ctn": ("CT3D", "per_patient")}
REASONS = ("implant", "incomplete", "low-confidence", "missing-rf")


@dataclass
class PreprocessConfig:
    modality: str = "xray"
    rescale_constant: float = 1.0
    projection: str = "mean"
    thresholds: dict = field(default_factory=lambda: dict(THRESHOLDS))
    target_dims: tuple[int, int] | None = None
    rf_group: str = "Base"

    def __post_init__(self):
        self.modality = self.modality.lower()
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {sorted(MODALITIES)}")
        self.rf_group = canonical_group(self.rf_group)
        if self.target_dims is None:
            self.target_dims = TARGET_DIMS[self.grid_modality]
        self.target_dims = tuple(int(d) for d in self.target_dims)

    @property
    def grid_modality(self) -> str:
        return MODALITIES[self.modality][0]

    @property
    def rescale_mode(self) -> str:
        return MODALITIES[self.modality][1]


@dataclass
class HalfResult:
    patient_id: str
    side: str
    keypoints: KeyPointSet | None
    crop: np.ndarray | None
    reason: str | None = None

    @property
    def included(self) -> bool:
        return self.reason is None


def to_image(grid: np.ndarray, config: PreprocessConfig) -> tuple[np.ndarray, bool]:
    """2D rescaled image from a stored grid; returns (image, phantom_found).

    CT volumes are cropped above the phantom and projected; radiographs pass
    straight to rescaling.
    """
    grid = np.asarray(grid)
    found = True
    if config.grid_modality == "CT3D":
        if grid.ndim != 3:
            raise ValueError(f"CT input must be a 3D volume, got {grid.ndim}D")
        grid, found = remove_phantom(grid)
        grid = project_coronal(grid, config.projection)
    elif grid.ndim != 2:
        raise ValueError(f"X-ray input must be a 2D grid, got {grid.ndim}D")
    return rescale(grid, config.rescale_mode, config.rescale_constant), found


def preprocess_image(patient_id: str, image: np.ndarray, detector: KeypointDetector,
                     config: PreprocessConfig) -> list[HalfResult]:
    """Split a rescaled 2D image, detect keypoints per half, filter and crop."""
    halves = split_halves(image)
    out = []
    for side, half, kps in zip(SIDES, halves, detector.predict(list(halves))):
        reason = None
        if kps.completeness != "complete":
            reason = kps.completeness
        elif not completeness_filter(kps, config.grid_modality, config.thresholds):
            reason = "low-confidence"
        crop = None
        if reason is None:
            try:
                crop = crop_femur(half, kps.points, config.target_dims)
            except ValueError:
                reason = "incomplete"
        out.append(HalfResult(patient_id, side, kps, crop, reason))
    return out


def _read_index(dataset: Path) -> list[dict]:
    with open(dataset / "images.csv", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def preprocess_dataset(dataset, outdir, detector: KeypointDetector, config: PreprocessConfig) -> dict:
    """Run the pipeline over an on-disk dataset.

    Writes ``crops/*.fgrid``, ``crops.csv`` (patient_id, side, path),
    ``exclusions.csv`` (patient_id, side, reason) and copies the manifest and
    schema so the output is itself a dataset.
    """
    dataset, outdir = Path(dataset), Path(outdir)
    (outdir / "crops").mkdir(parents=True, exist_ok=True)
    schema = RiskFactorSchema.load(dataset / "schema.json")
    records = {r.patient_id: r for r in read_manifest(dataset / "manifest.csv", schema)}
    needed = [rf.name for rf in schema.group(config.rf_group)]
    wanted = config.grid_modality

    crops, exclusions, no_phantom = [], [], []
    for row in _read_index(dataset):
        if row["modality"] != wanted:
            continue
        pid = row["patient_id"]
        image, found = to_image(fgrid.read(dataset / row["path"]), config)
        if not found:
            log.warning("no phantom found for %s; volume used uncropped", pid)
            no_phantom.append(pid)
        rec = records.get(pid)
        missing = rec is None or any(n not in rec.rf_values for n in needed)
        for res in preprocess_image(pid, image, detector, config):
            reason = res.reason
            if reason is None and missing:
                reason = "missing-rf"
            if reason is not None:
                exclusions.append((pid, res.side, reason))
                continue
            rel = f"crops/{pid}_{res.side}.fgrid"
            fgrid.write(outdir / rel, res.crop)
            crops.append((pid, res.side, rel))

    with open(outdir / "crops.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "side", "path"])
        w.writerows(crops)
    with open(outdir / "exclusions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "side", "reason"])
        w.writerows(exclusions)
    for name in ("manifest.csv", "schema.json"):
        shutil.copyfile(dataset / name, outdir / name)
    summary = {
        "modality": config.modality,
        "target_dims": list(config.target_dims),
        "included": len(crops),
        "excluded": {r: sum(1 for e in exclusions if e[2] == r) for r in REASONS},
        "no_phantom": no_phantom,
    }
    (outdir / "preprocess.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def read_crops(dataset) -> list[tuple[str, str, np.ndarray]]:
    """(patient_id, side, crop) triples from a preprocessed dataset."""
    dataset = Path(dataset)
    with open(dataset / "crops.csv", newline="", encoding="utf-8") as fh:
        return [(r["patient_id"], r["side"], fgrid.read(dataset / r["path"])) for r in csv.DictReader(fh)]


def training_halves(dataset, config: PreprocessConfig, n_noise: int | None = None, seed: int = 0):
    """Half images, ground-truth points and classes for detector training.

    Reads the annotation file written next to a synthetic dataset and adds
    featureless noise halves labeled incomplete (about 10% of the total).
    """
    from ..synthgen import noise_half

    dataset = Path(dataset)
    truth = {p["patient_id"]: p for p in json.loads((dataset / "ground_truth.json").read_text())["patients"]}
    halves, points, classes = [], [], []
    for row in _read_index(dataset):
        if row["modality"] != config.grid_modality:
            continue
        gt = truth[row["patient_id"]]
        image, _ = to_image(fgrid.read(dataset / row["path"]), config)
        for side, half in enumerate(split_halves(image)):
            halves.append(half)
            points.append(np.asarray(gt["keypoints"][side], dtype=float))
            classes.append(gt["completeness"][side])
    if not halves:
        raise ValueError(f"no {config.grid_modality} images to train the detector on")
    rng = np.random.default_rng(seed)
    n_noise = len(halves) // 10 if n_noise is None else n_noise
    for _ in range(n_noise):
        halves.append(noise_half(halves[0].shape, rng))
        points.append(None)
        classes.append("incomplete")
    return halves, points, classes


__all__ = [
    "CLASSES", "CROP_KEYPOINTS", "CROP_PADDING", "MODALITIES", "N_KEYPOINTS", "REASONS", "SIDES", "TARGET_DIMS",
    "THRESHOLDS", "HalfResult", "KeyPointSet", "KeypointDetector", "NoPhantomFound", "PreprocessConfig",
    "RescaleWarning", "completeness_filter", "crop_femur", "detect_keypoints", "detect_phantom_crop",
    "femur_box", "flip_half", "preprocess_dataset", "preprocess_image", "project_coronal", "read_crops",
    "remove_phantom", "rescale", "resample", "resize", "split_halves", "to_image", "training_halves",
]
