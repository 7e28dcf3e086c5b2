"""Segmentation accuracy and temporal smoothness measures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateError, ShapeError

logger = logging.getLogger(__name__)


def _spacing2(spacing) -> tuple[float, float]:
    if np.ndim(spacing) == 0:
        return float(spacing), float(spacing)
    sy, sx = spacing
    return float(sy), float(sx)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError("dice: masks differ in shape", a.shape, b.shape)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (or the image)."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    inner = m[1:-1, 1:-1]
    interior = inner & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def mean_contour_distance(a: np.ndarray, b: np.ndarray, spacing=1.0) -> float:
    """Symmetric mean nearest-contour distance in physical units."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError("mean_contour_distance: masks differ in shape", a.shape, b.shape)
    if not a.any():
        raise DegenerateError("mean_contour_distance: first mask is empty")
    if not b.any():
        raise DegenerateError("mean_contour_distance: second mask is empty")
    sy, sx = _spacing2(spacing)
    pa = np.argwhere(contour(a)) * np.array([sy, sx])
    pb = np.argwhere(contour(b)) * np.array([sy, sx])
    dab = cKDTree(pb).query(pa)[0]
    dba = cKDTree(pa).query(pb)[0]
    return float(0.5 * (dab.mean() + dba.mean()))


def area_series(labels: np.ndarray, class_id: int, spacing=1.0) -> np.ndarray:
    """Per-frame area (mm^2) of ``class_id`` in a (T, H, W) label sequence."""
    sy, sx = _spacing2(spacing)
    labels = np.asarray(labels)
    return (labels == class_id).reshape(len(labels), -1).sum(axis=1) * (sy * sx)


def curvature_series(area: np.ndarray, cyclic: bool = False) -> tuple[np.ndarray, float]:
    """``|A''| / (1 + A'^2)^1.5`` by central differences (unit frame step).

    Non-cyclic mode drops both endpoints; cyclic mode wraps and keeps all frames.
    """
    a = np.asarray(area, dtype=np.float64)
    if len(a) < 3:
        raise DegenerateError(f"curvature needs >= 3 frames, got {len(a)}")
    if cyclic:
        nxt, prv = np.roll(a, -1), np.roll(a, 1)
        cur = a
    else:
        nxt, prv, cur = a[2:], a[:-2], a[1:-1]
    d1 = (nxt - prv) / 2.0
    d2 = nxt - 2.0 * cur + prv
    kappa = np.abs(d2) / (1.0 + d1 * d1) ** 1.5
    return kappa, float(kappa.mean())


@dataclass
class StructureMetrics:
    dice: float
    mcd_mm: float
    area_error_mm2: float
    area_series: np.ndarray
    curvature: np.ndarray
    mean_curvature: float
    per_frame_dice: np.ndarray | None = None


@dataclass
class MetricsReport:
    structures: dict[str, StructureMetrics] = field(default_factory=dict)
    frames: list[int] = field(default_factory=list)

    def row(self, name: str) -> dict:
        s = self.structures[name]
        return {"dice": s.dice, "mcd_mm": s.mcd_mm, "area_err_mm2": s.area_error_mm2,
                "mean_curvature": s.mean_curvature}


def evaluate_method(predicted: np.ndarray, reference: dict[int, np.ndarray], spacing,
                    structures: dict[str, int] | None = None, dense_truth: np.ndarray | None = None,
                    cyclic: bool = False) -> MetricsReport:
    """Accuracy at the annotated frames in ``reference``; curvature over all frames.

    Contour distance is NaN at a frame where either mask is empty.
    """
    from .phantom import STRUCTURES

    structures = structures or STRUCTURES
    predicted = np.asarray(predicted)
    frames = sorted(reference)
    if any(t >= len(predicted) for t in frames):
        raise ShapeError("prediction does not cover every annotated frame", predicted.shape)
    sy, sx = _spacing2(spacing)
    report = MetricsReport(frames=frames)
    for name, cid in structures.items():
        dices, mcds, area_errs = [], [], []
        for t in frames:
            p, r = predicted[t] == cid, np.asarray(reference[t]) == cid
            dices.append(dice(p, r))
            try:
                mcds.append(mean_contour_distance(p, r, (sy, sx)))
            except DegenerateError:
                logger.warning("%s empty at frame %d; contour distance undefined", name, t)
                mcds.append(np.nan)
            area_errs.append(abs(float(p.sum()) - float(r.sum())) * sy * sx)
        areas = area_series(predicted, cid, (sy, sx))
        kappa, mk = curvature_series(areas, cyclic)
        pfd = None
        if dense_truth is not None:
            pfd = np.array([dice(predicted[t] == cid, dense_truth[t] == cid) for t in range(len(predicted))])
        report.structures[name] = StructureMetrics(
            float(np.mean(dices)), float(np.mean(mcds)), float(np.mean(area_errs)), areas, kappa, mk, pfd)
    return report
