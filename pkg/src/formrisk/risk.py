"""Risk estimation MLP fusing reduced image features with risk factors."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .nncore import (
    Dropout,
    FullyConnected,
    ReLU,
    Sequential,
    Softmax,
    TrainConfig,
    TrainResult,
    predict_proba,
    serialize,
    train,
)

log = logging.getLogger(__name__)

INPUTS = ("image", "rf", "both")


class PatientExcluded(ValueError):
    """No usable image half remains for a patient."""


def canonical_inputs(inputs: str) -> str:
    key = str(inputs).lower().replace("_", "").replace("-", "")
    aliases = {"image": "image", "imageonly": "image", "rf": "rf", "rfonly": "rf", "both": "both"}
    if key not in aliases:
        raise ValueError(f"unknown inputs {inputs!r}; expected one of {INPUTS}")
    return aliases[key]


@dataclass
class RiskModelConfig:
    inputs: str = "both"
    s: int = 5
    dropout: float = 0.5
    rf_group: str = "Base"
    D: int = 256
    hidden: int = 128
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.inputs = canonical_inputs(self.inputs)
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class RiskNet:
    """Two-input network; inputs are always passed as a ``(gap, rf)`` pair.

    The GAP branch is FC(hidden) -> ReLU -> FC(s*k) -> ReLU (width ``hidden``
    instead of s*k for image-only models); its output is concatenated with the
    risk-factor vector and fed to Dropout -> FC(hidden) -> ReLU -> FC(2) -> Softmax.
    """

    def __init__(self, config: RiskModelConfig, k: int, dtype=np.float32):
        if config.inputs != "image" and k < 1:
            raise ValueError("risk-factor inputs need k >= 1")
        self.config = config
        self.k = k if config.inputs != "image" else 0
        self.reduced_width = 0
        self.branch = None
        if config.inputs != "rf":
            self.reduced_width = config.s * k if config.inputs == "both" else config.hidden
            self.branch = Sequential([
                FullyConnected(config.D, config.hidden), ReLU(),
                FullyConnected(config.hidden, self.reduced_width), ReLU(),
            ], seed=config.seed, dtype=dtype)
        self.concat_width = self.reduced_width + self.k
        self.head = Sequential([
            Dropout(config.dropout), FullyConnected(self.concat_width, config.hidden), ReLU(),
            FullyConnected(config.hidden, 2), Softmax(),
        ], seed=config.seed + 1, dtype=dtype)
        self.trained = False

    def _nets(self):
        return [n for n in (self.branch, self.head) if n is not None]

    def forward(self, inputs, training=False):
        gap, rf = inputs
        parts = []
        if self.branch is not None:
            gap = np.asarray(gap)
            if gap.ndim != 2 or gap.shape[1] != self.config.D:
                raise ValueError(f"expected GAP features of width {self.config.D}, got {gap.shape}")
            parts.append(self.branch.forward(gap, training))
        if self.k:
            rf = np.asarray(rf, dtype=self.head.dtype)
            if rf.ndim != 2 or rf.shape[1] != self.k:
                raise ValueError(f"expected risk-factor vectors of width {self.k}, got {np.shape(rf)}")
            parts.append(rf)
        return self.head.forward(np.concatenate(parts, axis=1), training)

    def backward(self, grad):
        g = self.head.backward(grad)
        if self.branch is not None:
            self.branch.backward(g[:, : self.reduced_width])
        return g

    def zero_grad(self):
        for n in self._nets():
            n.zero_grad()

    def parameters(self):
        return [p for n in self._nets() for p in n.parameters()]

    def get_state(self):
        return [p.copy() for p, _ in self.parameters()]

    def set_state(self, state):
        for (p, _), s in zip(self.parameters(), state):
            p[...] = s

    def reseed_dropout(self, seed):
        self.head.reseed_dropout(seed)

    def save(self, path) -> None:
        c = self.config
        spec = {"type": "risk", "inputs": c.inputs, "s": c.s, "dropout": c.dropout, "rf_group": c.rf_group,
                "D": c.D, "hidden": c.hidden, "k": self.k}
        serialize.save(path, spec, [p for p, _ in self.parameters()])

    @classmethod
    def load(cls, path) -> "RiskNet":
        spec, tensors = serialize.load(path)
        if spec.get("type") != "risk":
            raise serialize.ModelFileError("not a risk model file")
        cfg = RiskModelConfig(inputs=spec["inputs"], s=spec["s"], dropout=spec["dropout"],
                              rf_group=spec["rf_group"], D=spec["D"], hidden=spec["hidden"])
        net = cls(cfg, spec["k"])
        serialize.restore_state(net, tensors)
        net.trained = True
        return net


def build_risk_model(config: RiskModelConfig, k: int) -> RiskNet:
    return RiskNet(config, k)


def _pair(gap, rf, n):
    gap = np.zeros((n, 0)) if gap is None else np.asarray(gap, dtype=float)
    rf = np.zeros((n, 0)) if rf is None else np.asarray(rf, dtype=float)
    return gap, rf


def train_risk_model(gap, rf, labels, config: RiskModelConfig, *, val_gap=None, val_rf=None,
                     val_labels=None, val_groups=None) -> tuple[RiskNet, TrainResult]:
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise ValueError("risk model training needs both classes")
    k = 0 if rf is None else np.asarray(rf).shape[1]
    net = build_risk_model(config, k)
    val = None
    if val_labels is not None:
        val = _pair(val_gap, val_rf, len(val_labels))
    result = train(net, _pair(gap, rf, len(labels)), labels, config.train,
                   val_inputs=val, val_labels=val_labels, val_groups=val_groups)
    net.trained = True
    log.info("risk model (%s) selected epoch %d (val AUC %s)", config.inputs, result.best_epoch,
             result.best_val_auc)
    return net, result


def predict_risk(model: RiskNet, gap=None, rf=None) -> np.ndarray:
    """Positive-class probabilities in eval mode."""
    if not getattr(model, "trained", False):
        raise RuntimeError("risk model has not been trained")
    n = len(gap) if gap is not None else len(rf)
    return predict_proba(model, _pair(gap, rf, n))


def aggregate_patient_score(side_probabilities) -> float:
    """Patient risk is the maximum over the available hip sides."""
    values = [float(v) for v in side_probabilities if v is not None]
    if not values:
        raise PatientExcluded("no included hip halves")
    return max(values)


def write_predictions(path, rows) -> None:
    """CSV patient_id, probability, fold, repetition."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "probability", "fold", "repetition"])
        for pid, prob, fold, rep in rows:
            w.writerow([pid, repr(float(prob)), int(fold), int(rep)])
