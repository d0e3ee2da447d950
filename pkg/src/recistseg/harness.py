"""Synthetic lesion phantoms, patient-level folds and the experiment runner."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume_io import Lesion, Mask, RecistAnnotation, Volume, mask_to_recist

SHAPES = ("ellipsoid", "superellipsoid", "blob")


@dataclass(frozen=True)
class PhantomSpec:
    """A lesion embedded in a noisy, windowed-CT-like background.

    Intensities are in windowed [0, 1] units and mapped back to HU through
    ``window`` when the volume is written.
    """

    shape: str = "ellipsoid"
    semi_axes_mm: tuple[float, float, float] = (10.0, 7.0, 8.0)
    exponent: float = 2.0
    rotation_deg: float = 0.0
    lesion_intensity: float = 0.65
    background_intensity: float = 0.35
    noise_std: float = 0.05
    dims: tuple[int, int, int] = (64, 64, 24)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    center_offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    falloff: float = 0.0
    core_fraction: float = 0.0
    core_intensity: float = 0.45
    blur_px: float = 0.0
    texture_std: float = 0.0
    texture_px: float = 3.0
    distractors: int = 0
    window: tuple[float, float] = (-160.0, 240.0)
    seed: int = 0
    lesion_id: str = "L0"
    patient_id: str = "P0"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown phantom shape {self.shape!r}")


def _grid_mm(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    cx = (nx - 1) / 2 * sx + spec.center_offset_mm[0]
    cy = (ny - 1) / 2 * sy + spec.center_offset_mm[1]
    cz = (nz - 1) / 2 * sz + spec.center_offset_mm[2]
    z, y, x = np.meshgrid(np.arange(nz) * sz - cz, np.arange(ny) * sy - cy, np.arange(nx) * sx - cx,
                          indexing="ij")
    th = math.radians(spec.rotation_deg)
    xr = x * math.cos(th) + y * math.sin(th)
    yr = -x * math.sin(th) + y * math.cos(th)
    return xr, yr, z, (cx, cy, cz)


def _shape_level(spec: PhantomSpec, xr, yr, z, rng) -> np.ndarray:
    a, b, c = spec.semi_axes_mm
    p = spec.exponent if spec.shape == "superellipsoid" else 2.0
    level = np.abs(xr / a) ** p + np.abs(yr / b) ** p + np.abs(z / c) ** p
    if spec.shape == "blob":
        # low-order angular perturbation of the radius
        az = np.arctan2(yr / b, xr / a)
        el = np.arctan2(z / c, np.hypot(xr / a, yr / b))
        amp = rng.uniform(0.05, 0.15, size=3)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        r = 1 + amp[0] * np.cos(2 * az + ph[0]) + amp[1] * np.cos(3 * az + ph[1]) + amp[2] * np.cos(2 * el + ph[2])
        level = level / r**2
    return level


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Mask, RecistAnnotation]:
    """Rasterise the analytic lesion; returns (HU volume, exact mask, RECIST)."""
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    xr, yr, z, (cx, cy, cz) = _grid_mm(spec)
    level = _shape_level(spec, xr, yr, z, rng)
    inside = level <= 1.0
    if not inside.any():
        raise DataError("lesion misses every voxel centre")
    border = np.zeros_like(inside)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    if (inside & border).any():
        raise DataError("lesion exceeds volume")

    img = np.full(inside.shape, spec.background_intensity, dtype=np.float64)
    for _ in range(spec.distractors):
        img += _distractor(spec, xr, yr, z, rng, inside)
    contrast = spec.lesion_intensity - spec.background_intensity
    # radial fall-off: full contrast at the centre, (1 - falloff) of it at the rim
    img[inside] = spec.lesion_intensity - spec.falloff * contrast * np.sqrt(level[inside])
    if spec.core_fraction > 0:
        img[inside & (level <= spec.core_fraction**2)] = spec.core_intensity
    if spec.texture_std > 0:
        tex = ndimage.gaussian_filter(rng.normal(size=img.shape), sigma=(0, spec.texture_px, spec.texture_px))
        img = img + (spec.texture_std / max(tex.std(), 1e-12)) * tex * ~inside
    if spec.blur_px > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, spec.blur_px, spec.blur_px))
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    lo, hi = spec.window
    hu = np.clip(np.floor(lo + img * (hi - lo) + 0.5), -32768, 32767).astype(np.int16)
    mask = Mask(inside.astype(np.uint8), spec.spacing_mm)
    recist = mask_to_recist(mask, window=spec.window, lesion_id=spec.lesion_id, patient_id=spec.patient_id)
    return Volume(hu, spec.spacing_mm), mask, recist


def _distractor(spec, xr, yr, z, rng, inside) -> np.ndarray:
    """A soft-edged blob of lesion-like brightness placed clear of the lesion."""
    a, b, c = spec.semi_axes_mm
    r = rng.uniform(0.4, 0.8) * min(a, b)
    ang = rng.uniform(0, 2 * np.pi)
    dist = max(a, b) * rng.uniform(1.15, 1.5) + r
    px, py = dist * math.cos(ang), dist * math.sin(ang)
    d = np.sqrt((xr - px) ** 2 + (yr - py) ** 2 + (z * 0.5) ** 2)
    blob = (d <= r).astype(float)
    blob[inside] = 0.0
    return blob * (spec.lesion_intensity - spec.background_intensity) * rng.uniform(0.85, 1.0)


def phantom_lesion(spec: PhantomSpec) -> Lesion:
    vol, mask, recist = generate_phantom(spec)
    return Lesion(vol, recist, mask)


def random_phantom_specs(n: int, seed: int, shape: str = "ellipsoid", aspect=(0.4, 0.8),
                         falloff: float = 0.5, size_mm=(10.0, 18.0), blur_px: float = 0.9,
                         dims=(80, 80, 24), z_scale=(0.8, 1.2), **overrides) -> list[PhantomSpec]:
    """``n`` varied phantoms; each gets its own derived seed and patient id.

    Defaults give a partial-volume blur of ``blur_px`` and a rim contrast of
    at least three noise standard deviations.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        a = rng.uniform(*size_mm)
        b = a * rng.uniform(*aspect)
        c = rng.uniform(*z_scale) * (a + b) / 2
        bg = rng.uniform(0.25, 0.4)
        contrast = rng.uniform(0.25, 0.4)
        kw = dict(
            shape=shape,
            semi_axes_mm=(a, b, c),
            exponent=rng.uniform(3.5, 5.0) if shape == "superellipsoid" else 2.0,
            rotation_deg=rng.uniform(0, 180),
            background_intensity=bg,
            lesion_intensity=bg + contrast,
            noise_std=contrast * (1 - falloff) / rng.uniform(3.0, 4.0),
            falloff=falloff,
            blur_px=blur_px,
            dims=tuple(dims),
            center_offset_mm=tuple(rng.uniform(-3, 3, size=3)),
            seed=int(rng.integers(2**31)),
            lesion_id=f"L{i:03d}",
            patient_id=f"P{i // 2:03d}",
        )
        kw.update(overrides)
        specs.append(PhantomSpec(**kw))
    return specs


# --------------------------------------------------------------------------
# folds


def kfold_split(lesions: Sequence, k: int, seed: int = 0) -> list[int]:
    """Patient-level fold assignment, one fold index per lesion.

    ``lesions`` may hold anything exposing ``patient_id`` directly or through
    an ``annotation``; patients are shuffled with ``seed`` and dealt
    round-robin, so fold sizes differ by at most one patient.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    pids = [_patient_of(x) for x in lesions]
    patients = sorted(set(pids))
    if len(patients) < k:
        raise DataError(f"{len(patients)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    fold_of = {patients[j]: pos % k for pos, j in enumerate(order)}
    return [fold_of[p] for p in pids]


def _patient_of(x) -> str:
    if isinstance(x, str):
        return x
    if hasattr(x, "patient_id"):
        return x.patient_id
    return x.annotation.patient_id


# --------------------------------------------------------------------------
# experiments

EXPERIMENTS = ("trimap-modes", "offset", "volume-change")

# phantom families per experiment; any key can be overridden from the config
PHANTOM_DEFAULTS = {
    "trimap-modes": dict(shape="ellipsoid"),
    "offset": dict(shape="superellipsoid", dims=(80, 80, 24), spacing_mm=(1.0, 1.0, 3.0), z_scale=(1.2, 1.6)),
    "volume-change": dict(shape="blob", dims=(96, 96, 40), size_mm=(8.0, 14.0)),
}
N_DEFAULTS = {"trimap-modes": 50, "offset": 20, "volume-change": 12}


@dataclass
class ExperimentConfig:
    name: str
    n: int | None = None
    seed: int = 0
    k: int = 2
    max_offset: int = 6
    threads: int | None = None
    phantom: dict = field(default_factory=dict)
    methods: list | None = None
    data: str | None = None
    gamma: float = 50.0
    gmm_k: int = 5
    iters: int = 5
    conn: int = 8

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.n is None:
            self.n = N_DEFAULTS[self.name]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def grabcut_params(self):
        from .grabcut import GrabCutParams
        return GrabCutParams(k_components=self.gmm_k, gamma=self.gamma, connectivity=self.conn,
                             max_iters=self.iters, seed=self.seed)

    def phantom_specs(self, n: int | None = None, seed: int | None = None) -> list[PhantomSpec]:
        kw = {**PHANTOM_DEFAULTS[self.name], **self.phantom}
        for key in ("dims", "spacing_mm", "size_mm", "z_scale", "aspect", "semi_axes_mm"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return random_phantom_specs(self.n if n is None else n, self.seed if seed is None else seed, **kw)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _write_csv(path, rows: list[dict]):
    import csv
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _write_json(path, obj):
    import json

    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, float)):
            return round(float(o), 6)
        if isinstance(o, np.integer):
            return int(o)
        return o

    path.write_text(json.dumps(clean(obj), indent=1, sort_keys=True) + "\n")


def _mean_std(vals) -> tuple[float, float]:
    v = np.asarray(vals, float)
    return (float(v.mean()), float(v.std())) if len(v) else (float("nan"), float("nan"))


def _load_lesions(cfg: ExperimentConfig) -> list[Lesion]:
    if cfg.data:
        from .volume_io import read_lesion_list
        recs = read_lesion_list(cfg.data)
        lesions = [r.load() for r in recs]
        if any(les.mask is None for les in lesions):
            raise DataError("experiments need a ground-truth mask for every lesion")
        return lesions
    return [phantom_lesion(s) for s in cfg.phantom_specs()]


def _pmap(fn, items, threads):
    from .selfpaced import _map
    return _map(fn, list(items), threads)


def run_experiment(config: ExperimentConfig | dict, out_dir) -> dict:
    """Run a named experiment and write its CSV / JSON / PNG report into ``out_dir``.

    Returns the summary that was written to ``<name>.json``.
    """
    from pathlib import Path
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = {"trimap-modes": _exp_trimap_modes, "offset": _exp_offset, "volume-change": _exp_volume_change}
    return runner[cfg.name](cfg, out)


def _exp_trimap_modes(cfg: ExperimentConfig, out) -> dict:
    from . import grabcut, metrics, plotting
    from .trimap import TrimapMode, trimap_from_bbox
    from .volume_io import crop_and_window, to_roi

    modes = [TrimapMode(m) for m in (cfg.methods or [m.value for m in TrimapMode])]
    params = cfg.grabcut_params()
    lesions = _load_lesions(cfg)

    def one(les: Lesion):
        roi = crop_and_window(les.volume, les.annotation, box="recist")
        rec = to_roi(les.annotation, roi, les.volume)
        img = roi.slice(rec.slice_index)
        x0 = roi.origin[0] - les.volume.origin[0]
        y0 = roi.origin[1] - les.volume.origin[1]
        h, w = img.shape
        gt = les.mask.data[rec.slice_index, y0:y0 + h, x0:x0 + w]
        rows = []
        for mode in modes:
            tm = trimap_from_bbox(rec, (w, h), mode)
            if mode is TrimapMode.RecistDilateOnly:
                pred = tm.fg  # the dilated marks themselves are the label
            else:
                pred, _ = grabcut.run(img, tm, params)
            p, r = metrics.precision_recall(pred, gt)
            rows.append({"lesion_id": les.lesion_id, "mode": mode.value, "dice": metrics.dice(pred, gt),
                         "precision": p, "recall": r, "vs": metrics.volumetric_similarity(pred, gt)})
        return rows

    per = [r for rows in _pmap(one, lesions, cfg.threads) for r in rows]
    summary = []
    for mode in modes:
        sel = [r for r in per if r["mode"] == mode.value]
        row = {"mode": mode.value, "n": len(sel)}
        for key in ("dice", "precision", "recall", "vs"):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std([r[key] for r in sel])
        summary.append(row)
    _write_csv(out / "trimap-modes_per_lesion.csv", per)
    _write_csv(out / "trimap-modes_summary.csv", summary)
    plotting.trimap_modes(summary, out / "trimap-modes.png")
    result = {"experiment": "trimap-modes", "n_lesions": len(lesions), "seed": cfg.seed, "modes": summary}
    _write_json(out / "trimap-modes.json", result)
    return result


def offset_dice(lesion: Lesion, mask, max_offset: int) -> dict[int, float]:
    """Per-slice DICE against the lesion's ground truth for offsets within the volume."""
    from .metrics import dice
    r = lesion.annotation.slice_index
    nz = lesion.volume.dims[2]
    data = mask.data if hasattr(mask, "data") else mask
    return {t: dice(data[r + t], lesion.mask.data[r + t]) for t in range(-max_offset, max_offset + 1)
            if 0 <= r + t < nz}


def _exp_offset(cfg: ExperimentConfig, out) -> dict:
    from . import plotting, selfpaced

    methods = cfg.methods or ["grabcut-3de", "round-0", "self-paced"]
    lesions = _load_lesions(cfg)
    sp_cfg = selfpaced.SelfPacedConfig(k=cfg.k, grabcut=cfg.grabcut_params(), seed=cfg.seed, threads=cfg.threads)
    models = None
    if any(m in ("round-0", "self-paced", "self-paced-no-gc") for m in methods):
        models, hlog = selfpaced.run(lesions, sp_cfg)
        (out / "offset_harvest.csv").write_text(hlog.to_csv())

    def segment(method, les):
        if method == "grabcut-3de":
            return selfpaced.grabcut_3de(les, sp_cfg)
        if method == "round-0":
            return selfpaced.segment_volume(les, models[0], sp_cfg)
        if method == "self-paced":
            return selfpaced.segment_volume(les, models[-1], sp_cfg)
        if method == "self-paced-no-gc":
            return selfpaced.segment_volume(les, models[-1], sp_cfg, use_gc=False)
        raise ValueError(f"unknown offset method {method!r}")

    per, series = [], {}
    for method in methods:
        for les in lesions:
            for t, d in offset_dice(les, segment(method, les), cfg.max_offset).items():
                per.append({"lesion_id": les.lesion_id, "method": method, "tau": t, "dice": d})
    rows = []
    for method in methods:
        series[method] = {}
        for t in range(-cfg.max_offset, cfg.max_offset + 1):
            vals = [r["dice"] for r in per if r["method"] == method and r["tau"] == t]
            if not vals:
                continue
            m, s = _mean_std(vals)
            series[method][t] = m
            rows.append({"method": method, "tau": t, "n": len(vals), "dice_mean": m, "dice_std": s})
    _write_csv(out / "offset_per_lesion.csv", per)
    _write_csv(out / "offset_summary.csv", rows)
    plotting.offset_curves(series, out / "offset.png")
    result = {"experiment": "offset", "n_lesions": len(lesions), "seed": cfg.seed, "k": cfg.k,
              "dice_by_offset": {m: {str(t): v for t, v in s.items()} for m, s in series.items()}}
    if models is not None:
        result["loss_curves"] = [m.meta["loss_curve"] for m in models]
    _write_json(out / "offset.json", result)
    return result


def followup_spec(spec: PhantomSpec, rng: np.random.Generator, xy_growth=(0.8, 1.25),
                  z_growth=(0.6, 1.6)) -> PhantomSpec:
    """The same lesion at a later time point: in-plane and through-plane growth drawn independently."""
    from dataclasses import replace
    a, b, c = spec.semi_axes_mm
    gxy = rng.uniform(*xy_growth)
    gz = rng.uniform(*z_growth)
    return replace(spec, semi_axes_mm=(a * gxy, b * gxy, c * gz), seed=int(rng.integers(2**31)),
                   lesion_id=spec.lesion_id + "-fu")


def _exp_volume_change(cfg: ExperimentConfig, out) -> dict:
    from . import metrics, plotting, selfpaced

    methods = cfg.methods or ["recist", "grabcut-3de"]
    if cfg.data:
        raise DataError("volume-change runs on phantom pairs only")
    base = cfg.phantom_specs()
    rng = np.random.default_rng(cfg.seed + 7919)
    pairs = [(phantom_lesion(s), phantom_lesion(followup_spec(s, rng))) for s in base]
    sp_cfg = selfpaced.SelfPacedConfig(k=cfg.k, grabcut=cfg.grabcut_params(), seed=cfg.seed, threads=cfg.threads)
    model = None
    if "self-paced" in methods:
        models, _ = selfpaced.run([les for pr in pairs for les in pr], sp_cfg)
        model = models[-1]

    def measure(method, les: Lesion):
        if method == "recist":
            return metrics.ellipsoid_volume(les.annotation, spacing=les.volume.spacing_mm)
        if method == "grabcut-3de":
            return metrics.mask_volume(selfpaced.grabcut_3de(les, sp_cfg))
        if method == "self-paced":
            return metrics.mask_volume(selfpaced.segment_volume(les, model, sp_cfg))
        raise ValueError(f"unknown volume method {method!r}")

    ref = np.array([metrics.mask_volume(f.mask) - metrics.mask_volume(b.mask) for b, f in pairs])
    per = [{"pair": i, "lesion_id": b.lesion_id, "method": "truth", "baseline_mm3": metrics.mask_volume(b.mask),
            "followup_mm3": metrics.mask_volume(f.mask), "delta_mm3": float(ref[i])} for i, (b, f) in enumerate(pairs)]
    fits, plotted = {}, {}
    for method in methods:
        deltas = []
        for i, (b, f) in enumerate(pairs):
            vb, vf = measure(method, b), measure(method, f)
            deltas.append(vf - vb)
            per.append({"pair": i, "lesion_id": b.lesion_id, "method": method, "baseline_mm3": vb,
                        "followup_mm3": vf, "delta_mm3": vf - vb})
        slope, icpt, r2 = metrics.fit_line(ref, deltas)
        fits[method] = {"slope": slope, "intercept_mm3": icpt, "r2": r2}
        plotted[method] = (np.array(deltas), slope, icpt)
    _write_csv(out / "volume-change_per_pair.csv", per)
    _write_csv(out / "volume-change_summary.csv", [{"method": m, **v} for m, v in fits.items()])
    plotting.volume_change(ref, plotted, out / "volume-change.png")
    result = {"experiment": "volume-change", "n_pairs": len(pairs), "seed": cfg.seed, "fits": fits}
    _write_json(out / "volume-change.json", result)
    return result
