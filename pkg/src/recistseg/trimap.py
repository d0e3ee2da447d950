"""Four-region trimaps (FG / PFG / PBG / BG) built from RECIST marks or model output."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AnnotationError, DataError, FallbackRequired
from .volume_io import RecistAnnotation

P_BG = 0.2
MIN_FG_PX = 10
IGNORE = 255

_EIGHT = np.ones((3, 3), dtype=bool)


class Label(enum.IntEnum):
    BG = 0
    FG = 1
    PBG = 2
    PFG = 3


class TrimapMode(str, enum.Enum):
    RecistR = "recist-r"
    BboxPlain = "bbox"
    BboxInner = "bbox-inner"
    RecistDilateOnly = "recist-dilate"


@dataclass(frozen=True, eq=False)
class Trimap:
    labels: np.ndarray
    ignore: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.ndim != 2 or labels.max(initial=0) > 3:
            raise DataError("trimap labels must be a 2D array over {0,1,2,3}")
        ignore = np.zeros(labels.shape, bool) if self.ignore is None else np.asarray(self.ignore, bool)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ignore", ignore)

    @property
    def dims(self) -> tuple[int, int]:
        return self.labels.shape[1], self.labels.shape[0]

    @property
    def fg(self) -> np.ndarray:
        return self.labels == Label.FG

    @property
    def bg(self) -> np.ndarray:
        return self.labels == Label.BG

    def counts(self) -> dict[str, int]:
        return {lab.name: int((self.labels == lab).sum()) for lab in Label}

    def to_raster(self) -> np.ndarray:
        """Export raster: 0=BG, 1=FG, 2=PBG, 3=PFG, 255=ignore."""
        out = self.labels.copy()
        out[self.ignore] = IGNORE
        return out


def _line(x0: int, y0: int, x1: int, y1: int):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_recist(annotation: RecistAnnotation, dims) -> np.ndarray:
    """Bresenham raster of both axes as a (ny, nx) boolean image."""
    nx, ny = int(dims[0]), int(dims[1])
    out = np.zeros((ny, nx), dtype=bool)
    for seg in (annotation.long_axis, annotation.short_axis):
        (ax, ay), (bx, by) = ((int(math.floor(x + 0.5)), int(math.floor(y + 0.5))) for x, y in seg)
        for x, y in ((ax, ay), (bx, by)):
            if not (0 <= x < nx and 0 <= y < ny):
                raise AnnotationError(f"RECIST endpoint ({x}, {y}) outside {nx}x{ny} image")
        for x, y in _line(ax, ay, bx, by):
            out[y, x] = True
    return out


def _centered_box(h: int, w: int, fraction: float) -> np.ndarray:
    """Centred, aspect-preserving rectangle whose area is closest to ``fraction`` of h*w."""
    target = fraction * h * w
    s = math.sqrt(fraction)
    best = None
    for bh in {max(1, math.floor(h * s)), max(1, math.ceil(h * s))}:
        for bw in {max(1, math.floor(w * s)), max(1, math.ceil(w * s))}:
            key = (abs(bh * bw - target), bh, bw)
            best = key if best is None or key < best else best
    _, bh, bw = best
    bh, bw = min(bh, h), min(bw, w)
    out = np.zeros((h, w), dtype=bool)
    y0, x0 = (h - bh) // 2, (w - bw) // 2
    out[y0:y0 + bh, x0:x0 + bw] = True
    return out


def dilate_to_area(seed: np.ndarray, target: float) -> np.ndarray:
    """Grow ``seed`` by 3x3 dilation until its area first reaches ``target``.

    The ring that crosses the target is only partly added: its pixels closest
    to ``seed`` (row-major on ties) until the area is ``ceil(target)``.
    """
    cur = seed.copy()
    need = math.ceil(target)
    while cur.sum() < need:
        nxt = ndimage.binary_dilation(cur, structure=_EIGHT)
        if nxt.sum() == cur.sum():
            break
        if nxt.sum() > need:
            ring = np.flatnonzero(nxt & ~cur)
            d = ndimage.distance_transform_edt(~seed).ravel()[ring]
            keep = ring[np.argsort(d, kind="stable")[: need - int(cur.sum())]]
            cur.ravel()[keep] = True
            break
        cur = nxt
    return cur


def _split_uncertain(fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Label FG/BG and divide the rest into PFG/PBG by nearest-set distance (ties to PFG)."""
    labels = np.full(fg.shape, Label.PBG, dtype=np.uint8)
    free = ~(fg | bg)
    if free.any():
        d_fg = ndimage.distance_transform_edt(~fg) if fg.any() else np.full(fg.shape, np.inf)
        d_bg = ndimage.distance_transform_edt(~bg) if bg.any() else np.full(fg.shape, np.inf)
        labels[free & (d_fg <= d_bg)] = Label.PFG
    labels[bg] = Label.BG
    labels[fg] = Label.FG
    return labels


def trimap_from_recist(annotation: RecistAnnotation, roi_dims, fg_fraction: float = 0.10,
                       bg_fraction: float = 0.50) -> Trimap:
    """Trimap for a RECIST ROI: outer half BG, dilated RECIST (10% of the ROI) FG."""
    nx, ny = int(roi_dims[0]), int(roi_dims[1])
    if nx < 4 or ny < 4:
        raise DataError(f"ROI {nx}x{ny} is smaller than 4x4")
    r = rasterize_recist(annotation, (nx, ny))
    fg = dilate_to_area(r, fg_fraction * nx * ny)
    bg = ~_centered_box(ny, nx, 1.0 - bg_fraction) & ~fg
    return Trimap(_split_uncertain(fg, bg))


def recist_bbox(annotation: RecistAnnotation, roi_dims, padding: float = 0.25) -> tuple[int, int, int, int]:
    """Tight box around the RECIST marks grown by ``padding`` of its extent: (x0, x1, y0, y1)."""
    nx, ny = int(roi_dims[0]), int(roi_dims[1])
    pts = np.floor(annotation.points + 0.5)
    lo, hi = pts.min(axis=0), pts.max(axis=0) + 1
    pad = (hi - lo) * padding / 2
    x0, y0 = np.floor(lo - pad + 0.5).astype(int)
    x1, y1 = np.floor(hi + pad + 0.5).astype(int)
    return max(0, x0), min(nx, x1), max(0, y0), min(ny, y1)


def trimap_from_bbox(annotation: RecistAnnotation, roi_dims, mode) -> Trimap:
    """Bounding-box trimap variants used as baselines for the RECIST trimap."""
    mode = TrimapMode(mode)
    if mode is TrimapMode.RecistR:
        return trimap_from_recist(annotation, roi_dims)
    nx, ny = int(roi_dims[0]), int(roi_dims[1])
    x0, x1, y0, y1 = recist_bbox(annotation, roi_dims)
    inside = np.zeros((ny, nx), dtype=bool)
    inside[y0:y1, x0:x1] = True
    bg = ~inside
    if mode is TrimapMode.BboxPlain:
        labels = np.where(inside, Label.PFG, Label.BG).astype(np.uint8)
        return Trimap(labels)
    if mode is TrimapMode.BboxInner:
        fg = np.zeros_like(inside)
        fg[y0:y1, x0:x1] = _centered_box(y1 - y0, x1 - x0, 0.20)
        return Trimap(_split_uncertain(fg, bg))
    fg = dilate_to_area(rasterize_recist(annotation, roi_dims), 0.20 * inside.sum())
    fg &= inside
    labels = np.full((ny, nx), Label.PBG, dtype=np.uint8)
    labels[bg] = Label.BG
    labels[fg] = Label.FG
    return Trimap(labels, ignore=(labels == Label.PBG))


def binarize_to_cover(prob_map: np.ndarray, annotation: RecistAnnotation) -> tuple[np.ndarray, float]:
    """Highest threshold whose foreground still covers half of the RECIST pixels."""
    prob_map = np.asarray(prob_map, dtype=float)
    r = rasterize_recist(annotation, (prob_map.shape[1], prob_map.shape[0]))
    vals = np.sort(prob_map[r])[::-1]
    need = math.ceil(len(vals) / 2)
    t = float(vals[need - 1])
    if t <= 0:
        raise FallbackRequired("model assigns zero probability to the RECIST pixels")
    return prob_map >= t, t


def _model_regions(prob_map, ref: RecistAnnotation, p_bg: float):
    r = rasterize_recist(ref, (prob_map.shape[1], prob_map.shape[0]))
    try:
        mask, _ = binarize_to_cover(prob_map, ref)
    except FallbackRequired:
        mask = None
    fg = r.copy()
    if mask is not None:
        comps, n = ndimage.label(mask, structure=_EIGHT)
        hit = np.unique(comps[r & mask])
        fg |= np.isin(comps, hit[hit > 0])
    # FG already holds every RECIST pixel, so low-probability pixels outside it
    # form regions that cannot overlap the marks
    bg = (prob_map < p_bg) & ~fg
    return mask, fg, bg


def trimap_from_model(prob_map: np.ndarray, est_recist: RecistAnnotation | None,
                      recist: RecistAnnotation | None = None, p_bg: float = P_BG) -> Trimap:
    """Trimap from a foreground-probability map and the (estimated) RECIST on the slice.

    Raises :class:`FallbackRequired` when the binarised map covers nothing or
    no confident background region exists.
    """
    ref = est_recist if est_recist is not None else recist
    if ref is None:
        raise ValueError("need a RECIST (estimated or actual) for the slice")
    prob_map = np.asarray(prob_map, dtype=float)
    mask, fg, bg = _model_regions(prob_map, ref, p_bg)
    if mask is None:
        raise FallbackRequired("model found nothing on the RECIST pixels")
    if not bg.any():
        raise FallbackRequired("no confident background region")
    return Trimap(_split_uncertain(fg, bg))


def fallback_labels(prob_map: np.ndarray, est_recist: RecistAnnotation, p_bg: float = P_BG) -> Trimap:
    """RECIST-plus-model labels for training when GrabCut or the model fails.

    Everything not confidently FG or BG is PBG and flagged ``ignore``.
    """
    prob_map = np.asarray(prob_map, dtype=float)
    _, fg, bg = _model_regions(prob_map, est_recist, p_bg)
    labels = np.full(prob_map.shape, Label.PBG, dtype=np.uint8)
    labels[bg] = Label.BG
    labels[fg] = Label.FG
    return Trimap(labels, ignore=(labels == Label.PBG))
