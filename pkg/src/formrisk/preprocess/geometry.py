"""Projection, intensity rescaling, hip splitting and femur cropping."""
from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.ndimage import map_coordinates

log = logging.getLogger(__name__)

CROP_KEYPOINTS = (0, 6, 8, 9, 10)  # head apex, greater trochanter, lesser trochanter, two shaft points
CROP_PADDING = 0.15
TARGET_DIMS = {"XRAY": (224, 224), "CT3D": (96, 96)}


class RescaleWarning(UserWarning):
    pass


def project_coronal(volume: np.ndarray, method: str = "mean") -> np.ndarray:
    """Collapse the anterior-posterior axis (axis 0) of a (AP, SI, LR) volume."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.shape[0] == 0 or volume.size == 0:
        raise ValueError(f"expected a nonempty 3D volume, got shape {volume.shape}")
    if method == "mean":
        return volume.mean(axis=0)
    if method == "max":
        return volume.max(axis=0)
    raise ValueError(f"unknown projection method {method!r}")


def rescale(image: np.ndarray, mode: str = "global", constant: float = 1.0) -> np.ndarray:
    """Map intensities into [0, 1].

    ``global`` divides by ``constant`` and clamps; ``per_patient`` maps the
    image's own [min, max] affinely onto [0, 1].
    """
    image = np.asarray(image, dtype=float)
    if image.size == 0:
        raise ValueError("cannot rescale an empty image")
    if mode == "global":
        if not constant > 0:
            raise ValueError("rescale constant must be positive")
        return np.clip(image / constant, 0.0, 1.0)
    if mode == "per_patient":
        lo, hi = float(image.min()), float(image.max())
        if hi == lo:
            warnings.warn("constant image cannot be rescaled per patient; returning zeros", RescaleWarning,
                          stacklevel=2)
            return np.zeros_like(image)
        return (image - lo) / (hi - lo)
    raise ValueError(f"unknown rescale mode {mode!r}")


def flip_half(half: np.ndarray) -> np.ndarray:
    """Mirror left-right."""
    return np.asarray(half)[:, ::-1]


def split_halves(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(right hip, mirrored left hip); an odd center column is dropped.

    The patient's right hip is displayed on the image's left side, so the
    right half is the first ``width // 2`` columns.
    """
    image = np.asarray(image)
    w = image.shape[1]
    if w < 2:
        raise ValueError("image must be at least 2 columns wide")
    hw = w // 2
    return image[:, :hw].copy(), flip_half(image[:, w - hw :]).copy()


def resample(image: np.ndarray, box: tuple[float, float, float, float], out_dims: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of the continuous box (r0, c0, r1, c1) to ``out_dims``.

    Pixel centers sit at integer coordinates; the box edges are pixel edges,
    so the full image is ``(-0.5, -0.5, h - 0.5, w - 0.5)``.
    """
    r0, c0, r1, c1 = box
    oh, ow = out_dims
    rows = r0 + (np.arange(oh) + 0.5) * (r1 - r0) / oh
    cols = c0 + (np.arange(ow) + 0.5) * (c1 - c0) / ow
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(np.asarray(image, dtype=float), [rr, cc], order=1, mode="nearest")


def resize(image: np.ndarray, out_dims: tuple[int, int]) -> np.ndarray:
    h, w = np.asarray(image).shape
    return resample(image, (-0.5, -0.5, h - 0.5, w - 0.5), out_dims)


def femur_box(points: np.ndarray, image_shape: tuple[int, int], padding: float = CROP_PADDING,
              subset=CROP_KEYPOINTS) -> tuple[float, float, float, float]:
    """Padded, squared bounding box of the crop keypoints, clipped to the image."""
    pts = np.asarray(points, dtype=float)[list(subset)]
    rmin, cmin = pts.min(axis=0)
    rmax, cmax = pts.max(axis=0)
    if rmax - rmin <= 0 or cmax - cmin <= 0:
        raise ValueError("degenerate femur box (zero area)")
    h, w = rmax - rmin, cmax - cmin
    rmin, rmax = rmin - padding * h, rmax + padding * h
    cmin, cmax = cmin - padding * w, cmax + padding * w
    side = max(rmax - rmin, cmax - cmin)
    rc, cc = (rmin + rmax) / 2, (cmin + cmax) / 2
    H, W = image_shape
    r0 = max(rc - side / 2, -0.5)
    r1 = min(rc + side / 2, H - 0.5)
    c0 = max(cc - side / 2, -0.5)
    c1 = min(cc + side / 2, W - 0.5)
    return (r0, c0, r1, c1)


def crop_femur(half: np.ndarray, points: np.ndarray, target_dims: tuple[int, int]) -> np.ndarray:
    """Proximal-femur crop from keypoints, resampled to ``target_dims``."""
    half = np.asarray(half)
    box = femur_box(points, half.shape)
    return resample(half, box, target_dims).astype(np.float32)


def box_contains(box, point) -> bool:
    r0, c0, r1, c1 = box
    return r0 <= point[0] <= r1 and c0 <= point[1] <= c1
