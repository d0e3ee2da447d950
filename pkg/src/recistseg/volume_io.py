"""Volumes, masks and RECIST annotations: types, on-disk formats, preprocessing.

A volume is stored as a JSON sidecar (``*.vol.json``) next to a raw
little-endian payload (``*.raw``) in z-major order. Annotations are a JSON
array of records in a ``*.recist.json`` file.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnnotationError, DataError, FormatError

_DTYPES = {
    "uint8": "<u1",
    "int16": "<i2",
    "int32": "<i4",
    "float32": "<f4",
    "float64": "<f8",
}

Point = tuple[float, float]


def _round(v: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(v + 0.5))


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar grid. ``data`` has shape (nz, ny, nx), or (C, nz, ny, nx)
    for a multi-channel stack. ``spacing_mm`` is (sx, sy, sz). ``origin`` is
    the voxel offset (x, y, z) of this grid inside the volume it was cropped
    from."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim not in (3, 4):
            raise DataError(f"volume data must be 3D or 4D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise DataError("volume dims must all be >= 1")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise DataError(f"non-positive spacing {self.spacing_mm}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape[-3:]
        return nx, ny, nz

    @property
    def channels(self) -> int:
        return self.data.shape[0] if self.data.ndim == 4 else 1

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def slice(self, z: int) -> np.ndarray:
        """Axial slice ``z`` as (ny, nx), or (ny, nx, C) for a stack."""
        if self.data.ndim == 4:
            return np.moveaxis(self.data[:, z], 0, -1)
        return self.data[z]


class Mask(Volume):
    """Binary volume with values in {0, 1}."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size and not np.isin(np.unique(data), (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))
        super().__post_init__()

    @classmethod
    def empty_like(cls, volume: Volume) -> "Mask":
        return cls(np.zeros(volume.data.shape[-3:], np.uint8), volume.spacing_mm, volume.origin)


# --------------------------------------------------------------------------
# annotations


@dataclass(frozen=True)
class RecistAnnotation:
    slice_index: int
    long_axis: tuple[Point, Point]
    short_axis: tuple[Point, Point]
    window: tuple[float, float] = (-160.0, 240.0)
    lesion_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "slice_index", int(self.slice_index))
        for name in ("long_axis", "short_axis"):
            seg = getattr(self, name)
            pts = tuple((float(p[0]), float(p[1])) for p in seg)
            if len(pts) != 2:
                raise AnnotationError(f"{name} needs exactly two endpoints")
            object.__setattr__(self, name, pts)
        object.__setattr__(self, "window", (float(self.window[0]), float(self.window[1])))

    @property
    def points(self) -> np.ndarray:
        """The four endpoints as a (4, 2) array of (x, y)."""
        return np.array(self.long_axis + self.short_axis, dtype=float)

    def long_length_px(self) -> float:
        (x0, y0), (x1, y1) = self.long_axis
        return math.hypot(x1 - x0, y1 - y0)

    def short_length_px(self) -> float:
        (x0, y0), (x1, y1) = self.short_axis
        return math.hypot(x1 - x0, y1 - y0)

    def lengths_mm(self, spacing: Sequence[float]) -> tuple[float, float]:
        sx, sy = spacing[0], spacing[1]
        out = []
        for (x0, y0), (x1, y1) in (self.long_axis, self.short_axis):
            out.append(math.hypot((x1 - x0) * sx, (y1 - y0) * sy))
        return out[0], out[1]

    def intersection(self) -> np.ndarray:
        """Crossing point of the two axis lines, (x, y)."""
        p0, p1 = np.array(self.long_axis)
        q0, q1 = np.array(self.short_axis)
        d1, d2 = p1 - p0, q1 - q0
        if np.hypot(*d2) == 0:
            return q0.copy()
        if np.hypot(*d1) == 0:
            return p0.copy()
        den = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(den) < 1e-12:
            return (p0 + p1 + q0 + q1) / 4.0
        t = ((q0[0] - p0[0]) * d2[1] - (q0[1] - p0[1]) * d2[0]) / den
        return p0 + t * d1

    def shifted(self, dx: float, dy: float, dz: int = 0) -> "RecistAnnotation":
        mv = lambda seg: tuple((x + dx, y + dy) for x, y in seg)  # noqa: E731
        return replace(
            self,
            slice_index=self.slice_index + dz,
            long_axis=mv(self.long_axis),
            short_axis=mv(self.short_axis),
        )

    def validate(self, dims: Sequence[int] | None = None, spacing: Sequence[float] | None = None):
        """Raise :class:`AnnotationError` unless the annotation is well formed."""
        if spacing is not None:
            lo, sh = self.lengths_mm(spacing)
            if lo + 1e-9 < sh:
                raise AnnotationError(f"long axis ({lo:.3f} mm) shorter than short axis ({sh:.3f} mm)")
        if self.short_length_px() > 0 and self.long_length_px() > 0:
            if _segment_distance(*self.long_axis, *self.short_axis) > 0.5:
                raise AnnotationError("long and short axes do not intersect")
        if dims is not None:
            nx, ny, nz = dims
            if not 0 <= self.slice_index < nz:
                raise AnnotationError(f"slice index {self.slice_index} outside volume (nz={nz})")
            pts = self.points
            if (pts < -0.5).any() or (pts[:, 0] > nx - 0.5).any() or (pts[:, 1] > ny - 0.5).any():
                raise AnnotationError("RECIST endpoint outside the image")

    def to_dict(self) -> dict:
        return {
            "slice_index": self.slice_index,
            "long_axis": [list(p) for p in self.long_axis],
            "short_axis": [list(p) for p in self.short_axis],
            "window": list(self.window),
            "lesion_id": self.lesion_id,
            "patient_id": self.patient_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecistAnnotation":
        try:
            return cls(
                slice_index=d["slice_index"],
                long_axis=tuple(tuple(p) for p in d["long_axis"]),
                short_axis=tuple(tuple(p) for p in d["short_axis"]),
                window=tuple(d.get("window", (-160.0, 240.0))),
                lesion_id=str(d.get("lesion_id", "")),
                patient_id=str(d.get("patient_id", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad annotation record: {exc}") from exc


def _point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, float) for v in (p, a, b))
    d = b - a
    n = d @ d
    t = 0.0 if n == 0 else float(np.clip((p - a) @ d / n, 0.0, 1.0))
    return float(np.hypot(*(a + t * d - p)))


def _segment_distance(a0, a1, b0, b1) -> float:
    a0, a1, b0, b1 = (np.asarray(v, float) for v in (a0, a1, b0, b1))

    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a0, a1, b0), orient(a0, a1, b1)
    o3, o4 = orient(b0, b1, a0), orient(b0, b1, a1)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return 0.0
    return min(
        _point_segment_distance(a0, b0, b1),
        _point_segment_distance(a1, b0, b1),
        _point_segment_distance(b0, a0, a1),
        _point_segment_distance(b1, a0, a1),
    )


@dataclass
class LesionRecord:
    """One lesion on disk: volume path, its annotation, optional ground truth."""

    volume_path: str
    annotation: RecistAnnotation
    mask_path: str | None = None
    fold: int | None = None

    def load(self) -> "Lesion":
        vol = read_volume(self.volume_path)
        gt = None
        if self.mask_path:
            m = read_volume(self.mask_path)
            gt = Mask(m.data, m.spacing_mm, m.origin)
        return Lesion(vol, self.annotation, gt)

    def to_dict(self) -> dict:
        return {
            "volume_path": self.volume_path,
            "annotation": self.annotation.to_dict(),
            "mask_path": self.mask_path,
            "fold": self.fold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LesionRecord":
        return cls(
            volume_path=d["volume_path"],
            annotation=RecistAnnotation.from_dict(d["annotation"]),
            mask_path=d.get("mask_path"),
            fold=d.get("fold"),
        )


def read_lesion_list(path) -> list[LesionRecord]:
    """Read a JSON list of lesion records; relative paths resolve against the list's folder."""
    path = Path(path)
    try:
        items = json.loads(path.read_text())
        recs = [LesionRecord.from_dict(d) for d in items]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"cannot read lesion list {path}: {e}") from None
    base = path.parent
    for r in recs:
        if not Path(r.volume_path).is_absolute():
            r.volume_path = str(base / r.volume_path)
        if r.mask_path and not Path(r.mask_path).is_absolute():
            r.mask_path = str(base / r.mask_path)
    return recs


@dataclass
class Lesion:
    """An in-memory lesion: HU volume, RECIST annotation, optional ground truth."""

    volume: Volume
    annotation: RecistAnnotation
    mask: Mask | None = None

    @property
    def lesion_id(self) -> str:
        return self.annotation.lesion_id


# --------------------------------------------------------------------------
# file formats


def _raw_path(header_path: Path) -> Path:
    name = header_path.name
    stem = name[: -len(".vol.json")] if name.endswith(".vol.json") else header_path.stem
    return header_path.with_name(stem + ".raw")


def write_volume(volume: Volume, path) -> Path:
    """Write ``volume`` as ``<stem>.vol.json`` + ``<stem>.raw``; returns the header path."""
    path = Path(path)
    if not path.name.endswith(".vol.json"):
        path = path.with_name(path.name + ".vol.json")
    data = volume.data
    dtype = next((k for k, v in _DTYPES.items() if np.dtype(v) == data.dtype.newbyteorder("<")), None)
    if dtype is None:
        data = data.astype(np.float64)
        dtype = "float64"
    raw = _raw_path(path)
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "dtype": dtype,
        "order": "czyx" if data.ndim == 4 else "zyx",
        "data_file": raw.name,
        "origin_voxel": list(volume.origin),
    }
    if data.ndim == 4:
        header["channels"] = int(data.shape[0])
    path.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable volume header {path}: {exc}") from exc
    try:
        nx, ny, nz = (int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype = np.dtype(_DTYPES[header["dtype"]])
        order = header.get("order", "zyx")
        channels = int(header.get("channels", 1))
        origin = tuple(header.get("origin_voxel", (0, 0, 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed volume header {path}: {exc}") from exc
    if order not in ("zyx", "czyx"):
        raise FormatError(f"unsupported voxel order {order!r}")
    if min(nx, ny, nz, channels) < 1:
        raise FormatError("volume dims must all be >= 1")
    if any(s <= 0 for s in spacing):
        raise FormatError(f"non-positive spacing {spacing}")
    raw = path.with_name(header["data_file"]) if "data_file" in header else _raw_path(path)
    try:
        buf = raw.read_bytes()
    except OSError as exc:
        raise FormatError(f"unreadable volume payload {raw}: {exc}") from exc
    expected = nx * ny * nz * channels
    if len(buf) != expected * dtype.itemsize:
        raise FormatError(
            f"size mismatch: header says {expected} voxels, payload holds {len(buf) / dtype.itemsize:g}"
        )
    data = np.frombuffer(buf, dtype=dtype).astype(dtype.newbyteorder("="))
    shape = (nz, ny, nx) if order == "zyx" else (channels, nz, ny, nx)
    return Volume(data.reshape(shape), spacing, origin)


def read_mask(path) -> Mask:
    v = read_volume(path)
    return Mask(v.data, v.spacing_mm, v.origin)


def write_annotations(annotations: Sequence[RecistAnnotation], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([a.to_dict() for a in annotations], indent=2) + "\n")
    return path


def read_annotations(path) -> list[RecistAnnotation]:
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable annotation file {path}: {exc}") from exc
    if isinstance(records, dict):
        records = [records]
    return [RecistAnnotation.from_dict(r) for r in records]


# --------------------------------------------------------------------------
# preprocessing


def apply_window(data: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map [lo, hi] affinely onto [0, 1], clipping outside."""
    if not lo < hi:
        raise DataError(f"degenerate window [{lo}, {hi}]")
    return np.clip((np.asarray(data, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def roi_box(annotation: RecistAnnotation, dims: Sequence[int], box: str = "long") -> tuple[int, int, int, int]:
    """In-plane crop box ``(x0, x1, y0, y1)`` (half-open), clamped to ``dims``.

    ``box="long"`` gives a square of side twice the long-axis length centred
    on the axis intersection; ``box="recist"`` gives a 2w x 2h box around the
    tight bounding box of the four endpoints.
    """
    nx, ny = dims[0], dims[1]
    if box == "long":
        length = annotation.long_length_px()
        if length <= 0:
            raise AnnotationError("degenerate (zero-length) long axis")
        cx, cy = annotation.intersection()
        side = max(4, _round(2 * length))
        x0 = _round(cx - side / 2)
        y0 = _round(cy - side / 2)
        x1, y1 = x0 + side, y0 + side
    elif box == "recist":
        pts = annotation.points
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        if annotation.long_length_px() <= 0:
            raise AnnotationError("degenerate (zero-length) long axis")
        w = max(4, _round(2 * (hi[0] - lo[0] + 1)))
        h = max(4, _round(2 * (hi[1] - lo[1] + 1)))
        cx, cy = (lo + hi) / 2
        x0, y0 = _round(cx - w / 2), _round(cy - h / 2)
        x1, y1 = x0 + w, y0 + h
    else:
        raise ValueError(f"unknown box kind {box!r}")
    return max(0, x0), min(nx, x1), max(0, y0), min(ny, y1)


def crop_and_window(volume: Volume, annotation: RecistAnnotation, box: str = "long") -> Volume:
    """Crop an axial ROI (all slices) around the RECIST marks and window it to [0, 1].

    The returned volume's ``origin`` records the crop offset so annotations
    can be moved into ROI coordinates with ``annotation.shifted(-x0, -y0)``.
    """
    lo, hi = annotation.window
    if not lo < hi:
        raise DataError(f"degenerate window [{lo}, {hi}]")
    annotation.validate(volume.dims)
    x0, x1, y0, y1 = roi_box(annotation, volume.dims, box)
    roi = volume.data[..., y0:y1, x0:x1]
    ox, oy, oz = volume.origin
    return Volume(apply_window(roi, lo, hi), volume.spacing_mm, (ox + x0, oy + y0, oz))


def to_roi(annotation: RecistAnnotation, roi: Volume, parent: Volume | None = None) -> RecistAnnotation:
    """Express ``annotation`` in the pixel frame of ``roi``."""
    px, py, _ = parent.origin if parent is not None else (0, 0, 0)
    ox, oy, _ = roi.origin
    return annotation.shifted(px - ox, py - oy)


# --------------------------------------------------------------------------
# mask <-> RECIST


def _boundary_pixels(sl: np.ndarray) -> np.ndarray:
    fg = sl.astype(bool)
    pad = np.pad(fg, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    ys, xs = np.nonzero(fg & ~interior)
    return np.stack([xs, ys], axis=1).astype(float)


def _chord_inside(sl: np.ndarray, a, b, step: float = 0.25) -> bool:
    n = max(2, int(math.ceil(math.hypot(b[0] - a[0], b[1] - a[1]) / step)) + 1)
    t = np.linspace(0.0, 1.0, n)
    xs = np.floor(a[0] + t * (b[0] - a[0]) + 0.5).astype(int)
    ys = np.floor(a[1] + t * (b[1] - a[1]) + 0.5).astype(int)
    return bool(sl[ys, xs].all())


def slice_recist(sl: np.ndarray, spacing: Sequence[float], perp_tol_deg: float = 5.0):
    """Long and short axes of a single binary slice as two endpoint pairs."""
    sl = np.asarray(sl).astype(bool)
    if sl.sum() < 2:
        raise DataError("single-pixel cross-section: cannot measure RECIST")
    sx, sy = float(spacing[0]), float(spacing[1])
    pts = _boundary_pixels(sl)
    i, j = np.triu_indices(len(pts), k=1)
    d = (pts[j] - pts[i]) * (sx, sy)
    dist = np.hypot(d[:, 0], d[:, 1])

    order = np.argsort(-dist, kind="stable")
    long_ab = None
    for idx in order:
        a, b = pts[i[idx]], pts[j[idx]]
        if _chord_inside(sl, a, b):
            long_ab, long_dir = (a, b), d[idx] / dist[idx]
            break
    if long_ab is None:  # pragma: no cover - a pair of adjacent boundary pixels always qualifies
        raise DataError("no in-mask chord found")

    cos_tol = math.sin(math.radians(perp_tol_deg))
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.abs(d @ long_dir) / dist
    cand = np.nonzero(cosang <= cos_tol)[0]
    cand = cand[np.argsort(-dist[cand], kind="stable")]
    short_ab = None
    for idx in cand:
        a, b = pts[i[idx]], pts[j[idx]]
        if _segment_distance(a, b, *long_ab) <= 0.5 and _chord_inside(sl, a, b):
            short_ab = (a, b)
            break
    if short_ab is None:
        mid = (long_ab[0] + long_ab[1]) / 2
        short_ab = (mid, mid)
    as_pts = lambda ab: tuple((float(p[0]), float(p[1])) for p in ab)  # noqa: E731
    return as_pts(long_ab), as_pts(short_ab)


def mask_to_recist(
    mask: Mask,
    spacing: Sequence[float] | None = None,
    window: tuple[float, float] = (-160.0, 240.0),
    lesion_id: str = "",
    patient_id: str = "",
) -> RecistAnnotation:
    """Measure RECIST diameters on the maximal-area axial slice of ``mask``."""
    data = np.asarray(mask.data)
    if not data.any():
        raise DataError("empty mask: cannot measure RECIST")
    spacing = mask.spacing_mm if spacing is None else spacing
    areas = data.reshape(data.shape[0], -1).sum(axis=1)
    peak = int(np.argmax(areas))
    # the 5 successive slices nearest the peak; ties resolve to the lowest index
    lo, hi = max(0, peak - 2), min(len(areas), peak + 3)
    r = lo + int(np.argmax(areas[lo:hi]))
    long_ax, short_ax = slice_recist(data[r], spacing)
    return RecistAnnotation(r, long_ax, short_ax, window, lesion_id, patient_id)


def inject_recist_noise(annotation: RecistAnnotation, max_fraction: float, seed=None) -> RecistAnnotation:
    """Scale each axis by an independent factor in [1 - f, 1 + f] about the intersection."""
    if not 0 <= max_fraction < 1:
        raise ValueError("max_fraction must lie in [0, 1)")
    if max_fraction == 0:
        return annotation
    rng = np.random.default_rng(seed)
    c = annotation.intersection()
    out = []
    for seg, length in ((annotation.long_axis, annotation.long_length_px()),
                        (annotation.short_axis, annotation.short_length_px())):
        f = rng.uniform(1 - max_fraction, 1 + max_fraction)
        if length > 0 and length * f < 1.0:
            f = 1.0 / length
        out.append(tuple(tuple(c + (np.array(p) - c) * f) for p in seg))
    return replace(annotation, long_axis=out[0], short_axis=out[1])
