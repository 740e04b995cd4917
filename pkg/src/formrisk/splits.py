"""Patient-level fold assignment."""
from __future__ import annotations

import numpy as np


def kfold_split(patient_ids, k: int = 5, seed: int = 0, strata=None) -> dict[str, int]:
    """Shuffled, stratified partition of patients into ``k`` folds.

    Patients are shuffled within each stratum, strata are laid end to end and
    positions are dealt round-robin, so overall fold sizes and per-stratum
    fold sizes both differ by at most one.
    """
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of patients ({len(ids)})")
    rng = np.random.default_rng(seed)
    if strata is None:
        strata = [0] * len(ids)
    strata = list(strata)
    if len(strata) != len(ids):
        raise ValueError("strata must align with patient ids")
    order = []
    for level in sorted(set(strata), key=str):
        members = [i for i, s in enumerate(strata) if s == level]
        order.extend(members[j] for j in rng.permutation(len(members)))
    return {ids[i]: pos % k for pos, i in enumerate(order)}


def inner_split(patient_ids, labels, fraction: float = 0.2, seed: int = 0) -> tuple[list[str], list[str]]:
    """Stratified (fit, select) split of patients for checkpoint selection."""
    ids = list(patient_ids)
    k = max(2, int(round(1.0 / fraction)))
    folds = kfold_split(ids, k=k, seed=seed, strata=list(labels))
    fit = [p for p in ids if folds[p] != 0]
    select = [p for p in ids if folds[p] == 0]
    return fit, select
