"""Overlap, surface-distance and volume measures for 2D/3D binary masks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume_io import Mask, RecistAnnotation


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.data if isinstance(pred, Mask) else pred).astype(bool)
    g = np.asarray(gt.data if isinstance(gt, Mask) else gt).astype(bool)
    if p.shape != g.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _arrays(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(pred, gt) -> float:
    """2TP / (2TP + FP + FN); 1 when both masks are empty."""
    c = confusion(pred, gt)
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def precision_recall(pred, gt) -> tuple[float, float]:
    c = confusion(pred, gt)
    prec = 1.0 if c.tp + c.fp == 0 else c.tp / (c.tp + c.fp)
    rec = 1.0 if c.tp + c.fn == 0 else c.tp / (c.tp + c.fn)
    return prec, rec


def volumetric_similarity(pred, gt) -> float:
    """1 - (FN - FP) / (2TP + FP + FN). Over-segmentation pushes it above 1."""
    c = confusion(pred, gt)
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 1.0 - (c.fn - c.fp) / den


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-neighbour outside the mask or the grid."""
    m = np.asarray(mask, bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(m.ndim, 1), border_value=0)
    return m & ~inner


def _spacing_for(shape, spacing) -> tuple[float, ...]:
    """Spacing per array axis; ``spacing`` is given x-first like everywhere else."""
    if spacing is None:
        return (1.0,) * len(shape)
    sp = tuple(float(s) for s in spacing)[: len(shape)]
    if len(sp) != len(shape):
        raise DataError(f"need {len(shape)} spacing values")
    return sp[::-1]


def avg_hausdorff(pred, gt, spacing=None, sample: int | None = None, seed: int = 0) -> float:
    """Average Hausdorff distance in mm: max of the two directed mean boundary distances.

    ``spacing`` is (sx, sy[, sz]). With ``sample`` set, each directed mean is
    taken over at most that many randomly chosen boundary voxels.
    """
    p, g = _arrays(pred, gt)
    if not p.any() or not g.any():
        raise DataError("AVD undefined for an empty mask")
    if spacing is None and isinstance(gt, Mask):
        spacing = gt.spacing_mm
    sp = _spacing_for(p.shape, spacing)
    bp, bg = boundary(p), boundary(g)
    # distance from every voxel to the nearest boundary voxel of the other mask
    d_to_g = ndimage.distance_transform_edt(~bg, sampling=sp)
    d_to_p = ndimage.distance_transform_edt(~bp, sampling=sp)
    rng = np.random.default_rng(seed)

    def directed(src, dist):
        vals = dist[src]
        if sample is not None and len(vals) > sample:
            vals = vals[rng.choice(len(vals), sample, replace=False)]
        return float(vals.mean())

    return max(directed(bp, d_to_g), directed(bg, d_to_p))


def ellipsoid_volume(annotation_or_length, width: float | None = None, spacing=None) -> float:
    """pi * L * W^2 / 6 from the long (L) and short (W) diameters in mm."""
    if isinstance(annotation_or_length, RecistAnnotation):
        if spacing is None:
            raise ValueError("spacing needed to measure an annotation")
        length, width = annotation_or_length.lengths_mm(spacing)
    else:
        length = float(annotation_or_length)
    if width is None:
        raise ValueError("width required")
    if length < 0 or width < 0:
        raise ValueError("diameters must be non-negative")
    return math.pi * length * width * width / 6.0


def mask_volume(mask: Mask) -> float:
    return float(np.count_nonzero(mask.data)) * mask.voxel_volume_mm3


def measure(item, spacing=None) -> float:
    """Volume (mm^3) of a Mask, or the ellipsoid estimate of a RECIST annotation."""
    if isinstance(item, Mask):
        return mask_volume(item)
    if isinstance(item, RecistAnnotation):
        return ellipsoid_volume(item, spacing=spacing)
    raise TypeError(f"cannot measure {type(item).__name__}")


@dataclass(frozen=True)
class VolumeChangeReport:
    method_deltas: np.ndarray
    reference_deltas: np.ndarray
    slope: float
    intercept: float
    r2: float

    def rows(self) -> list[dict]:
        return [{"pair": i, "reference_delta_mm3": float(r), "method_delta_mm3": float(m)}
                for i, (r, m) in enumerate(zip(self.reference_deltas, self.method_deltas))]


def fit_line(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Ordinary least squares y = a x + b; returns (a, b, R^2)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2:
        raise DataError("need at least two pairs for a slope")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise DataError("reference deltas are all equal; slope undefined")
    a = ((x - xm) * (y - ym)).sum() / sxx
    b = ym - a * xm
    ss_tot = ((y - ym) ** 2).sum()
    ss_res = ((y - (a * x + b)) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(a), float(b), float(r2)


def volume_change_report(method_pairs, reference_pairs, spacing=None) -> VolumeChangeReport:
    """Regress follow-up minus baseline volume of a method on that of a reference.

    Each pair is (baseline, follow-up), each a Mask or a RECIST annotation
    (measured with ``spacing``).
    """
    if len(method_pairs) != len(reference_pairs):
        raise DataError("method and reference lists differ in length")
    if len(method_pairs) < 2:
        raise DataError("need at least two pairs for a slope")
    md = np.array([measure(b, spacing) - measure(a, spacing) for a, b in method_pairs])
    rd = np.array([measure(b, spacing) - measure(a, spacing) for a, b in reference_pairs])
    slope, icpt, r2 = fit_line(rd, md)
    return VolumeChangeReport(md, rd, slope, icpt, r2)
