"""Heatmap-regression keypoint detector with a completeness classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nncore import (
    Adam,
    Conv,
    FullyConnected,
    GlobalAveragePool,
    ReLU,
    Sequential,
    Softmax,
    iter_batches,
    mean_squared_error,
    weighted_cross_entropy,
)
from ..nncore import serialize
from .geometry import resize

log = logging.getLogger(__name__)

N_KEYPOINTS = 12
CLASSES = ("complete", "incomplete", "implant")
THRESHOLDS = {"XRAY": 0.01, "CT3D": 0.2}


@dataclass
class KeyPointSet:
    points: np.ndarray  # (12, 2) as (row, col)
    completeness: str
    confidence: float
    probabilities: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.shape != (N_KEYPOINTS, 2):
            raise ValueError(f"expected {N_KEYPOINTS} points, got shape {self.points.shape}")
        if self.completeness not in CLASSES:
            raise ValueError(f"unknown completeness class {self.completeness!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def completeness_filter(kps: KeyPointSet, modality: str, thresholds: dict | None = None) -> bool:
    """True (include) iff the half is complete with confidence above the modality threshold."""
    thresholds = THRESHOLDS if thresholds is None else thresholds
    key = "CT3D" if modality.upper() in ("CT", "CTN", "CT3D") else "XRAY"
    return kps.completeness == "complete" and kps.confidence > thresholds[key]


def gaussian_heatmaps(points: np.ndarray, size: int, stride: int, sigma: float) -> np.ndarray:
    """(12, size/stride, size/stride) Gaussian targets for points in input pixels."""
    n = size // stride
    grid = np.arange(n, dtype=float)
    pts = np.asarray(points, dtype=float) / stride
    dr = grid[None, :, None] - pts[:, 0, None, None]
    dc = grid[None, None, :] - pts[:, 1, None, None]
    return np.exp(-(dr**2 + dc**2) / (2 * sigma**2))


def decode_heatmap(heat: np.ndarray, window: int = 5) -> tuple[float, float]:
    """Argmax refined by the center of mass of the positive part in a window."""
    r, c = np.unravel_index(np.argmax(heat), heat.shape)
    k = window // 2
    r0, r1 = max(0, r - k), min(heat.shape[0], r + k + 1)
    c0, c1 = max(0, c - k), min(heat.shape[1], c + k + 1)
    patch = np.maximum(heat[r0:r1, c0:c1], 0.0)
    total = patch.sum()
    if total <= 0:
        return float(r), float(c)
    rr, cc = np.mgrid[r0:r1, c0:c1]
    return float((rr * patch).sum() / total), float((cc * patch).sum() / total)


class KeypointDetector:
    """Shared convolutional trunk with a heatmap head and a 3-class head.

    Heatmaps are produced at ``input_size / stride`` resolution.  Inputs are
    half images resized to ``input_size`` square; predicted points are mapped
    back to the half image's own coordinates.
    """

    def __init__(self, input_size: int = 64, width: int = 16, seed: int = 0, dtype=np.float32):
        self.input_size = input_size
        self.width = width
        self.stride = 2
        self.sigma = 1.0
        c = width
        self.trunk = Sequential([
            Conv(1, c // 2, 3), ReLU(),
            Conv(c // 2, c, 3, stride=2), ReLU(),
            Conv(c, c, 3, dilation=1), ReLU(),
            Conv(c, c, 3, dilation=2), ReLU(),
            Conv(c, c, 3, dilation=4), ReLU(),
            Conv(c, c, 3, dilation=8), ReLU(),
            Conv(c, c, 3, dilation=1), ReLU(),
        ], seed=seed, dtype=dtype)
        self.heat_head = Sequential([Conv(c, N_KEYPOINTS, 1)], seed=seed + 1, dtype=dtype)
        self.cls_head = Sequential([
            Conv(c, 2 * c, 3, stride=2), ReLU(),
            Conv(2 * c, 2 * c, 3, stride=2), ReLU(),
            GlobalAveragePool(), FullyConnected(2 * c, len(CLASSES)), Softmax(),
        ], seed=seed + 2, dtype=dtype)
        self.trained = False

    # network protocol
    def forward(self, x, training=False):
        feats = self.trunk.forward(x, training)
        return self.heat_head.forward(feats, training), self.cls_head.forward(feats, training)

    def backward(self, grad_heat, grad_cls):
        g = self.heat_head.backward(grad_heat) + self.cls_head.backward(grad_cls)
        return self.trunk.backward(g)

    def zero_grad(self):
        for net in (self.trunk, self.heat_head, self.cls_head):
            net.zero_grad()

    def parameters(self):
        return self.trunk.parameters() + self.heat_head.parameters() + self.cls_head.parameters()

    def get_state(self):
        return [p.copy() for p, _ in self.parameters()]

    def set_state(self, state):
        params = self.parameters()
        for (p, _), s in zip(params, state):
            p[...] = s

    def prepare(self, halves) -> np.ndarray:
        return np.stack([resize(h, (self.input_size, self.input_size)) for h in halves])[:, None].astype(
            self.trunk.dtype)

    def fit(self, halves, points, classes, epochs: int = 40, batch_size: int = 16, lr: float = 3e-3,
            heat_weight: float = 1.0, foreground_weight: float = 10.0, seed: int = 0,
            on_epoch=None) -> list[dict]:
        """Train on half images with ground-truth points (in half coordinates) and class names.

        Heatmap loss is applied only to complete and implant halves; the class
        loss uses all of them.  Pixels near a keypoint are up-weighted by
        ``foreground_weight`` so no heatmap settles on the all-zero output, and
        the learning rate follows a cosine decay.
        """
        x = self.prepare(halves)
        scales = np.array([[self.input_size / h.shape[0], self.input_size / h.shape[1]] for h in halves])
        y_cls = np.array([CLASSES.index(c) for c in classes])
        pts_in = np.array([(np.asarray(p) + 0.5) * s[None, :] - 0.5 if p is not None else np.zeros((12, 2))
                           for p, s in zip(points, scales)])
        heat_mask = np.array([c != "incomplete" and p is not None for c, p in zip(classes, points)], dtype=float)
        targets = np.stack([gaussian_heatmaps(p, self.input_size, self.stride, self.sigma) for p in pts_in])
        targets = targets.astype(self.trunk.dtype)
        counts = np.bincount(y_cls, minlength=len(CLASSES)).astype(float)
        cls_w = np.where(counts > 0, len(y_cls) / (len(CLASSES) * np.maximum(counts, 1)), 0.0)

        rng = np.random.default_rng(seed)
        opt = Adam(self.parameters(), lr=lr)
        history = []
        for epoch in range(epochs):
            opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
            tot_h = tot_c = 0.0
            for idx in iter_batches(len(x), batch_size, rng):
                self.zero_grad()
                heat, probs = self.forward(x[idx], training=True)
                t = targets[idx]
                w = (1.0 + (foreground_weight - 1.0) * (t > 0.1)) * (heat_weight * heat_mask[idx])[:, None, None, None]
                lh, gh = mean_squared_error(heat, t, w.astype(t.dtype))
                lc, gc = weighted_cross_entropy(probs, y_cls[idx], cls_w[y_cls[idx]])
                self.backward(gh, gc)
                opt.step()
                tot_h += lh * len(idx)
                tot_c += lc * len(idx)
            rec = {"epoch": epoch, "heat_loss": tot_h / len(x), "class_loss": tot_c / len(x)}
            history.append(rec)
            log.debug("detector epoch %s", rec)
            if on_epoch is not None:
                on_epoch(epoch, rec)
        self.trained = True
        return history

    def predict(self, halves, batch_size: int = 64) -> list[KeyPointSet]:
        if not self.trained:
            raise RuntimeError("keypoint detector has not been trained")
        out = []
        for start in range(0, len(halves), batch_size):
            chunk = halves[start : start + batch_size]
            heat, probs = self.forward(self.prepare(chunk), training=False)
            for h_img, hm, pr in zip(chunk, heat, probs):
                pts = np.array([decode_heatmap(m) for m in hm]) * self.stride
                scale = np.array([h_img.shape[0] / self.input_size, h_img.shape[1] / self.input_size])
                pts = (pts + 0.5) * scale[None, :] - 0.5
                k = int(np.argmax(pr))
                out.append(KeyPointSet(pts, CLASSES[k], float(pr[k]),
                                       {c: float(v) for c, v in zip(CLASSES, pr)}))
        return out

    def detect(self, half: np.ndarray) -> KeyPointSet:
        return self.predict([half])[0]

    def save(self, path) -> None:
        spec = {"type": "keypoint_detector", "input_size": self.input_size, "width": self.width,
                "dtype": self.trunk.dtype.name}
        serialize.save(path, spec, [p for p, _ in self.parameters()])

    @classmethod
    def load(cls, path) -> "KeypointDetector":
        spec, tensors = serialize.load(path)
        if spec.get("type") != "keypoint_detector":
            raise serialize.ModelFileError("not a keypoint detector file")
        det = cls(input_size=spec["input_size"], width=spec["width"], dtype=spec["dtype"])
        serialize.restore_state(det, tensors)
        det.trained = True
        return det


def detect_keypoints(detector: KeypointDetector, half: np.ndarray) -> KeyPointSet:
    return detector.detect(half)
