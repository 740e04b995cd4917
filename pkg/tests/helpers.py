"""Synthetic crops built from ground-truth keypoints (bypassing the detector)."""
import numpy as np

from formrisk.cohort import label_fracture
from formrisk.preprocess.geometry import crop_femur, split_halves
from formrisk.synthgen import GeneratorConfig, generate_cohort


def gt_crop_cohort(n, seed=1, size=32, horizon=10, **kw):
    """(records, truth, crops by patient id) with ground-truth crops of every complete half."""
    kw.setdefault("prevalence", 0.25)
    cfg = GeneratorConfig(n_patients=n, seed=seed, xray_dims=(64, 128), implant_rate=0.0, incomplete_rate=0.0,
                          **kw)
    records, studies, truth = generate_cohort(cfg)
    crops = {}
    for i, study in enumerate(studies):
        crops[study.patient_id] = [crop_femur(h, truth.keypoints[i, side], (size, size))
                                   for side, h in enumerate(split_halves(study.grid))]
    return records, truth, crops


def labeled_halves(records, crops, horizon=10):
    x, y, owner = [], [], []
    for r in records:
        lab = label_fracture(r, horizon)
        if not lab.is_labeled:
            continue
        for c in crops[r.patient_id]:
            x.append(c)
            y.append(lab.target)
            owner.append(r.patient_id)
    return np.array(x), np.array(y), np.array(owner)
