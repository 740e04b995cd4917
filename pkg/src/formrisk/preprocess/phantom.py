"""Calibration-phantom and table removal via a Hough line transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NoPhantomFound(RuntimeError):
    pass


def hough_lines(points: np.ndarray, shape: tuple[int, int], thetas: np.ndarray):
    """Vote accumulator over (theta, rho) for edge ``points`` given as (row, col).

    A line is ``col*cos(theta) + row*sin(theta) = rho``; rho is binned to
    whole pixels.  Returns (accumulator[theta, rho], rho offset).
    """
    h, w = shape
    diag = int(np.ceil(np.hypot(h, w)))
    acc = np.zeros((len(thetas), 2 * diag + 1), dtype=np.int64)
    if len(points) == 0:
        return acc, diag
    rows = points[:, 0].astype(float)
    cols = points[:, 1].astype(float)
    cos, sin = np.cos(thetas), np.sin(thetas)
    for t in range(len(thetas)):
        rho = np.rint(cols * cos[t] + rows * sin[t]).astype(int) + diag
        acc[t] += np.bincount(rho, minlength=acc.shape[1])
    return acc, diag


@dataclass
class PhantomLine:
    theta: float
    rho: float
    votes: int
    top_row: int


def rising_edges(image: np.ndarray, rel_threshold: float = 0.3, min_contrast: float = 1e-3) -> np.ndarray:
    """(row, col) of pixels whose intensity jumps up relative to the row above."""
    jump = np.diff(np.asarray(image, dtype=float), axis=0)
    peak = float(jump.max()) if jump.size else 0.0
    if peak <= min_contrast:
        return np.zeros((0, 2), dtype=int)
    r, c = np.nonzero(jump >= rel_threshold * peak)
    return np.stack([r + 1, c], axis=1)


def phantom_lines(volume: np.ndarray, max_tilt_deg: float = 10.0, vote_fraction: float = 0.6,
                  rel_threshold: float = 0.3) -> list[PhantomLine]:
    """Near-horizontal lines in the mean axial projection, strongest first."""
    axial = np.asarray(volume, dtype=float).mean(axis=1)  # (AP rows, LR cols)
    h, w = axial.shape
    pts = rising_edges(axial, rel_threshold)
    thetas = np.deg2rad(np.arange(90.0 - max_tilt_deg, 90.0 + max_tilt_deg + 1e-9, 0.5))
    acc, offset = hough_lines(pts, (h, w), thetas)
    min_votes = vote_fraction * w
    lines = []
    work = acc.copy()
    while True:
        t, r = np.unravel_index(np.argmax(work), work.shape)
        votes = int(work[t, r])
        if votes < min_votes:
            break
        theta, rho = float(thetas[t]), float(r - offset)
        xs = np.array([0.0, w - 1.0])
        ys = (rho - xs * np.cos(theta)) / np.sin(theta)
        lines.append(PhantomLine(theta, rho, votes, int(np.floor(ys.min() + 0.5))))
        # suppress the neighbourhood of this peak
        work[max(0, t - 4) : t + 5, max(0, r - 2) : r + 3] = 0
    return lines


def detect_phantom_crop(volume: np.ndarray, **kwargs) -> int:
    """First AP row of the phantom/table complex; rows from it on are discarded.

    Raises NoPhantomFound if no near-horizontal line gathers enough votes.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {volume.shape}")
    lines = phantom_lines(volume, **kwargs)
    if not lines:
        raise NoPhantomFound("no phantom or table line in the axial projection")
    return max(1, min(line.top_row for line in lines))


def remove_phantom(volume: np.ndarray, **kwargs) -> tuple[np.ndarray, bool]:
    """(cropped volume, found flag); without a phantom the volume passes through."""
    try:
        row = detect_phantom_crop(volume, **kwargs)
    except NoPhantomFound:
        return volume, False
    return volume[:row], True
