"""Image feature extractor: a small CNN trained on fracture labels, read out at its GAP layer."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fgrid
from .nncore import (
    Conv,
    Dropout,
    FullyConnected,
    GlobalAveragePool,
    ReLU,
    Sequential,
    Softmax,
    TrainConfig,
    TrainResult,
    serialize,
    train,
)
from .preprocess.geometry import resample

log = logging.getLogger(__name__)


@dataclass
class ExtractorConfig:
    backbone_channels: tuple[int, ...] = (32, 64, 128)
    D: int = 256
    input_dims: tuple[int, int] = (96, 96)
    head_width: int = 128
    dropout: float = 0.5
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: bool = True

    def validate(self) -> None:
        if self.D < 1 or any(c < 1 for c in self.backbone_channels):
            raise ValueError("channel widths must be positive")
        blocks = len(self.backbone_channels) + 1
        if min(self.input_dims) < 2**blocks:
            raise ValueError(f"input dims {self.input_dims} too small for {blocks} stride-2 blocks")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class FeatureVector:
    patient_id: str
    side: str
    values: np.ndarray


class ExtractorNet:
    """Conv backbone ending in GAP, followed by FC -> ReLU -> Dropout -> FC -> Softmax."""

    def __init__(self, config: ExtractorConfig, dtype=np.float32):
        config.validate()
        self.config = config
        layers, c_in = [], 1
        for c in tuple(config.backbone_channels) + (config.D,):
            layers += [Conv(c_in, c, 3, stride=2), ReLU()]
            c_in = c
        layers.append(GlobalAveragePool())
        self.backbone = Sequential(layers, seed=config.seed, dtype=dtype)
        self.head = Sequential([
            FullyConnected(config.D, config.head_width), ReLU(), Dropout(config.dropout),
            FullyConnected(config.head_width, 2), Softmax(),
        ], seed=config.seed + 1, dtype=dtype)
        self.trained = False

    def forward(self, x, training=False):
        return self.head.forward(self.backbone.forward(x, training), training)

    def backward(self, grad):
        return self.backbone.backward(self.head.backward(grad))

    def zero_grad(self):
        self.backbone.zero_grad()
        self.head.zero_grad()

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()

    def get_state(self):
        return self.backbone.get_state() + self.head.get_state()

    def set_state(self, state):
        n = len(self.backbone.parameters())
        self.backbone.set_state(state[:n])
        self.head.set_state(state[n:])

    def reseed_dropout(self, seed):
        self.head.reseed_dropout(seed)

    def gap(self, x) -> np.ndarray:
        return self.backbone.forward(x, training=False)

    def save(self, path) -> None:
        c = self.config
        spec = {"type": "extractor", "backbone_channels": list(c.backbone_channels), "D": c.D,
                "input_dims": list(c.input_dims), "head_width": c.head_width, "dropout": c.dropout,
                "layers": self.backbone.specs() + self.head.specs()}
        serialize.save(path, spec, [p for p, _ in self.parameters()])

    @classmethod
    def load(cls, path) -> "ExtractorNet":
        spec, tensors = serialize.load(path)
        if spec.get("type") != "extractor":
            raise serialize.ModelFileError("not an extractor model file")
        cfg = ExtractorConfig(backbone_channels=tuple(spec["backbone_channels"]), D=spec["D"],
                              input_dims=tuple(spec["input_dims"]), head_width=spec["head_width"],
                              dropout=spec["dropout"])
        net = cls(cfg)
        serialize.restore_state(net, tensors)
        net.trained = True
        return net


def build_extractor(config: ExtractorConfig) -> ExtractorNet:
    return ExtractorNet(config)


@dataclass
class AugmentParams:
    flip: bool = False
    zoom: float = 1.0
    scale: float = 1.0
    shift: float = 0.0


def draw_augment(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        zoom=float(rng.uniform(0.9, 1.1)),
        scale=float(rng.uniform(0.9, 1.1)),
        shift=float(rng.uniform(-0.05, 0.05)),
    )


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if params.flip:
        img = img[:, ::-1]
    if params.zoom != 1.0:
        h, w = img.shape
        bh, bw = h / params.zoom, w / params.zoom
        r0, c0 = (h - bh) / 2 - 0.5, (w - bw) / 2 - 0.5
        img = resample(img, (r0, c0, r0 + bh, c0 + bw), (h, w))
    return np.clip(img * params.scale + params.shift, 0.0, 1.0)


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Random flip, central zoom and intensity jitter, clamped to [0, 1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_augment(image, draw_augment(rng))


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i, 0] = apply_augment(x[i, 0], draw_augment(rng))
    return out


def as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    return arr


def train_extractor(images, labels, config: ExtractorConfig, *, val_images=None, val_labels=None,
                    val_groups=None) -> tuple[ExtractorNet, TrainResult]:
    """Train on labeled crops; the checkpoint with the best validation AUC is kept."""
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise ValueError("extractor training needs both classes")
    net = build_extractor(config)
    result = train(
        net, as_batch(images), labels, config.train,
        val_inputs=None if val_images is None else as_batch(val_images),
        val_labels=val_labels, val_groups=val_groups,
        augment=augment_batch if config.augment else None,
    )
    net.trained = True
    log.info("extractor selected epoch %d (val AUC %s)", result.best_epoch, result.best_val_auc)
    return net, result


def extract_gap_features(net: ExtractorNet, images, batch_size: int = 256) -> np.ndarray:
    """GAP activations in eval mode, one row per image."""
    if not getattr(net, "trained", False):
        raise RuntimeError("extractor has not been trained")
    x = as_batch(images)
    rows = [net.gap(x[s : s + batch_size]) for s in range(0, len(x), batch_size)]
    return np.concatenate(rows, axis=0).astype(float) if rows else np.zeros((0, net.config.D))


def write_features_csv(path, vectors: list[FeatureVector]) -> None:
    if not vectors:
        raise ValueError("no feature vectors to write")
    d = len(vectors[0].values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "side"] + [f"f_{i}" for i in range(d)])
        for v in vectors:
            if len(v.values) != d:
                raise ValueError("feature width must be constant across a dataset")
            w.writerow([v.patient_id, v.side] + [repr(float(x)) for x in v.values])


def read_features_csv(path) -> list[FeatureVector]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.append(FeatureVector(row[0], row[1], np.array([float(x) for x in row[2:]])))
    return out


def write_features_binary(path, vectors: list[FeatureVector]) -> None:
    """Concatenated (1, D) FGRID blobs plus a ``.index.csv`` sidecar with ids and sides."""
    path = Path(path)
    with open(path, "wb") as fh:
        for v in vectors:
            fh.write(fgrid.encode(np.asarray(v.values, dtype=float).reshape(1, -1)))
    with open(path.with_suffix(".index.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "side"])
        for v in vectors:
            w.writerow([v.patient_id, v.side])


def read_features_binary(path) -> list[FeatureVector]:
    path = Path(path)
    buf = path.read_bytes()
    with open(path.with_suffix(".index.csv"), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    out, pos = [], 0
    for pid, side in rows:
        grid, pos = fgrid.decode(buf, pos)
        out.append(FeatureVector(pid, side, grid.ravel().astype(float)))
    return out
