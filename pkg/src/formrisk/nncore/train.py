from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..metrics import UndefinedAUC, roc_auc
from .network import class_weights, weighted_cross_entropy

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p, _ in params]
        self.v = [np.zeros_like(p) for p, _ in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for (p, g), m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p, g in self.params:
            p -= (self.lr * g).astype(p.dtype)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 36
    lr: float = 1e-4
    class_weighting: bool = True
    seed: int = 0
    optimizer: str = "adam"
    shuffle: bool = True


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float | None = None


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


def _length(inputs) -> int:
    return len(inputs[0]) if isinstance(inputs, tuple) else len(inputs)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Index batches over ``n`` samples; the short final batch is kept."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def predict_proba(model, inputs, batch_size: int = 256) -> np.ndarray:
    """Positive-class probability in eval mode."""
    n = _length(inputs)
    out = np.empty(n, dtype=float)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        out[idx] = model.forward(_take(inputs, idx), training=False)[:, 1]
    return out


def group_max(scores: np.ndarray, groups) -> tuple[np.ndarray, np.ndarray]:
    """Max score per group; returns (unique groups, scores) in sorted group order."""
    groups = np.asarray(groups)
    uniq, inv = np.unique(groups, return_inverse=True)
    agg = np.full(len(uniq), -np.inf)
    np.maximum.at(agg, inv, scores)
    return uniq, agg


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_auc(scores, labels)
    except UndefinedAUC:
        return None


def train(model, inputs, labels, config: TrainConfig, *, val_inputs=None, val_labels=None,
          val_groups=None, augment: Callable | None = None,
          on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Mini-batch training under a class-weighted cross-entropy loss.

    ``model`` follows the network protocol (forward/backward/zero_grad/
    parameters/get_state/set_state/reseed_dropout) and outputs two-class
    probabilities.  When validation data is supplied the parameters with the
    best validation AUC are restored at the end; ``val_groups`` aggregates
    validation samples by max before scoring (one patient, several images).
    """
    labels = np.asarray(labels, dtype=int)
    n = _length(inputs)
    if n == 0:
        raise ValueError("empty training set")
    counts = np.bincount(labels, minlength=2)
    if np.any(counts == 0):
        raise ValueError(f"training labels contain an empty class (counts={counts.tolist()})")
    if config.class_weighting:
        sample_w = class_weights(labels, 2)[labels]
    else:
        sample_w = np.ones(n)

    rng = np.random.default_rng(config.seed)
    model.reseed_dropout(int(rng.integers(2**63)))
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, lr=config.lr)
    elif config.optimizer == "sgd":
        opt = SGD(params, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")

    result = TrainResult()
    best_state = None
    for epoch in range(config.epochs):
        total = 0.0
        train_scores = np.empty(n)
        for idx in iter_batches(n, config.batch_size, rng if config.shuffle else None):
            x = _take(inputs, idx)
            if augment is not None:
                x = augment(x, rng)
            model.zero_grad()
            probs = model.forward(x, training=True)
            loss, grad = weighted_cross_entropy(probs, labels[idx], sample_w[idx].astype(probs.dtype))
            model.backward(grad)
            opt.step()
            total += loss * len(idx)
            train_scores[idx] = probs[:, 1]
        record = {"epoch": epoch, "loss": total / n, "train_auc": _safe_auc(train_scores, labels)}
        if val_inputs is not None:
            scores = predict_proba(model, val_inputs)
            vl = np.asarray(val_labels, dtype=int)
            if val_groups is not None:
                _, scores = group_max(scores, val_groups)
                _, vl = group_max(vl.astype(float), val_groups)
            record["val_auc"] = _safe_auc(scores, vl.astype(int))
            if record["val_auc"] is not None and (
                result.best_val_auc is None or record["val_auc"] > result.best_val_auc
            ):
                result.best_val_auc = record["val_auc"]
                result.best_epoch = epoch
                best_state = model.get_state()
        result.history.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record)
        log.debug("epoch %d %s", epoch, record)

    if best_state is not None:
        model.set_state(best_state)
    else:
        result.best_epoch = config.epochs - 1
    return result
