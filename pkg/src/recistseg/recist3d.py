"""Off-slice RECIST estimates by Pythagorean projection onto neighbouring slices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import AnnotationError
from .volume_io import RecistAnnotation


@dataclass(frozen=True, eq=False)
class Recist3D:
    """Estimated annotations keyed by slice offset from the RECIST slice."""

    reference: RecistAnnotation
    spacing_mm: tuple[float, float, float]
    by_offset: dict[int, RecistAnnotation] = field(default_factory=dict)
    long_mm: dict[int, float] = field(default_factory=dict)

    def __getitem__(self, tau: int) -> RecistAnnotation:
        return self.by_offset[tau]

    def __contains__(self, tau) -> bool:
        return tau in self.by_offset

    @property
    def offsets(self) -> list[int]:
        return sorted(self.by_offset)

    @property
    def intersection(self) -> np.ndarray:
        return self.reference.intersection()

    def within_extent(self, tau: int) -> bool:
        return self.long_mm.get(tau, 0.0) > 0


def _endpoint_distance(v: np.ndarray, sx: float, sy: float) -> float:
    return math.hypot(v[0] * sx, v[1] * sy)


def semi_axes_mm(annotation: RecistAnnotation, spacing) -> tuple[float, float]:
    """Physical distance (mm) from the axis crossing to each long-axis endpoint."""
    c = annotation.intersection()
    sx, sy = spacing[0], spacing[1]
    return tuple(_endpoint_distance(np.array(p) - c, sx, sy) for p in annotation.long_axis)


def estimate(annotation: RecistAnnotation, spacing_mm, offsets: Iterable[int] | int) -> Recist3D:
    """Project the annotation onto slices ``r + tau`` for each offset ``tau``.

    A long-axis endpoint at distance ``a`` mm from the crossing moves along
    its own in-plane direction to ``sqrt(max(0, a^2 - (tau * sz)^2))``. The
    short axis is scaled about the crossing so the short/long ratio is kept.
    Passing an int ``K`` means offsets ``-K..K``.
    """
    sx, sy, sz = (float(s) for s in spacing_mm)
    if sz <= 0 or sx <= 0 or sy <= 0:
        raise AnnotationError("spacing must be positive")
    if isinstance(offsets, (int, np.integer)):
        offsets = range(-int(offsets), int(offsets) + 1)
    offsets = sorted({int(t) for t in offsets})
    long0, _ = annotation.lengths_mm((sx, sy))
    if long0 <= 0:
        raise AnnotationError("degenerate long axis")
    c = annotation.intersection()
    long_v = [np.array(p) - c for p in annotation.long_axis]
    short_v = [np.array(q) - c for q in annotation.short_axis]
    dists = [_endpoint_distance(v, sx, sy) for v in long_v]

    by_offset, lengths = {}, {}
    for tau in offsets:
        if tau == 0:
            by_offset[0], lengths[0] = annotation, long0
            continue
        h2 = (tau * sz) ** 2
        pts = []
        for v, a in zip(long_v, dists):
            d = math.sqrt(max(0.0, a * a - h2))
            pts.append(c + v * (d / a) if a > 0 else c.copy())
        long_t = math.hypot((pts[1][0] - pts[0][0]) * sx, (pts[1][1] - pts[0][1]) * sy)
        f = long_t / long0
        short = [c + v * f for v in short_v]
        by_offset[tau] = replace(
            annotation,
            slice_index=annotation.slice_index + tau,
            long_axis=tuple((float(p[0]), float(p[1])) for p in pts),
            short_axis=tuple((float(q[0]), float(q[1])) for q in short),
        )
        lengths[tau] = long_t
    return Recist3D(annotation, (sx, sy, sz), by_offset, lengths)


def extent(r3: Recist3D) -> tuple[int, int]:
    """Largest symmetric offset range whose long axes all have positive length."""
    e = 0
    while (e + 1) in r3.long_mm and (-e - 1) in r3.long_mm and r3.long_mm[e + 1] > 0 and r3.long_mm[-e - 1] > 0:
        e += 1
    return -e, e


def extent_of(annotation: RecistAnnotation, spacing_mm) -> int:
    """Half-extent in slices implied by the annotation alone."""
    a = max(semi_axes_mm(annotation, spacing_mm))
    sz = float(spacing_mm[2])
    # largest integer tau with tau * sz < a
    e = int(math.ceil(a / sz)) - 1
    return max(e, 0)
