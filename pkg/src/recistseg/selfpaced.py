"""Self-paced harvesting of slice labels, from the RECIST slice outwards.

Round 0 trains the appearance model on GrabCut masks of the RECIST slices.
Round k predicts every slice within k of the RECIST slice, turns the
prediction and the projected RECIST into a trimap, runs GrabCut on it and
retrains (warm-started) on the harvested labels.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import appearance, grabcut
from .errors import DataError, FallbackRequired
from .recist3d import Recist3D, estimate
from .trimap import (MIN_FG_PX, P_BG, Trimap, binarize_to_cover, fallback_labels, rasterize_recist,
                     trimap_from_model, trimap_from_recist)
from .volume_io import Lesion, LesionRecord, Mask, RecistAnnotation, Volume, crop_and_window, to_roi

log = logging.getLogger(__name__)

BEYOND_EXTENT = ("skip", "model-only")


@dataclass(frozen=True)
class SelfPacedConfig:
    k: int = 2
    features: appearance.FeatureConfig = field(default_factory=appearance.FeatureConfig)
    lr: float = 1e-2
    epochs: int = 30
    batch: int = 4096
    balance: bool = True
    grabcut: grabcut.GrabCutParams = field(default_factory=grabcut.GrabCutParams)
    min_fg_px: int = MIN_FG_PX
    p_bg: float = P_BG
    beyond_extent: str = "skip"
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.beyond_extent not in BEYOND_EXTENT:
            raise ValueError(f"beyond_extent must be one of {BEYOND_EXTENT}")

    def train_kwargs(self, round_: int) -> dict:
        return dict(lr=self.lr, epochs=self.epochs, batch=self.batch, balance=self.balance,
                    seed=self.seed + 1000 * round_)


@dataclass
class HarvestEntry:
    lesion_id: str
    round: int
    tau: int
    slice_index: int
    source: str  # recist | model | fallback
    energy: float | None
    fg_px: int
    bg_px: int
    ignore_px: int


@dataclass
class HarvestLog:
    entries: list[HarvestEntry] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def for_round(self, k: int) -> list[HarvestEntry]:
        return [e for e in self.entries if e.round == k]

    def to_json(self) -> str:
        return json.dumps({"entries": [asdict(e) for e in self.entries], "skipped": self.skipped},
                          indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(HarvestEntry.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for e in self.entries:
            w.writerow(asdict(e))
        return buf.getvalue()


# --------------------------------------------------------------------------
# per-lesion preparation


@dataclass(frozen=True, eq=False)
class PreparedLesion:
    """Windowed ROI of all slices, the RECIST in ROI pixels and its projections."""

    lesion_id: str
    roi: Volume
    recist: RecistAnnotation
    r3: Recist3D

    @property
    def r(self) -> int:
        return self.recist.slice_index

    def image(self, tau: int) -> np.ndarray:
        return self.roi.slice(self.r + tau)

    def offsets(self) -> list[int]:
        return self.r3.offsets


def prepare(lesion: Lesion | LesionRecord) -> PreparedLesion:
    if isinstance(lesion, LesionRecord):
        lesion = lesion.load()
    vol, ann = lesion.volume, lesion.annotation
    ann.validate(vol.dims)
    roi = crop_and_window(vol, ann, box="recist")
    rec = to_roi(ann, roi, vol)
    nz = vol.dims[2]
    r3 = estimate(rec, vol.spacing_mm, range(-rec.slice_index, nz - rec.slice_index))
    return PreparedLesion(ann.lesion_id, roi, rec, r3)


def _predict(model, image) -> np.ndarray:
    if isinstance(model, appearance.AppearanceModel):
        return appearance.predict_map(model, image)
    return np.asarray(model(image), dtype=float)


def _grabcut(image, tm: Trimap, params: grabcut.GrabCutParams):
    lab, hist = grabcut.run(image, tm, params)
    return lab, (hist[-1].total if hist else None)


# --------------------------------------------------------------------------
# label harvesting


@dataclass(frozen=True, eq=False)
class SliceLabel:
    tau: int
    image: np.ndarray
    labels: np.ndarray  # 0/1
    ignore: np.ndarray
    source: str
    energy: float | None


def recist_slice_label(p: PreparedLesion, params: grabcut.GrabCutParams) -> SliceLabel:
    """GrabCut on the RECIST trimap of the RECIST slice."""
    img = p.image(0)
    tm = trimap_from_recist(p.recist, (img.shape[1], img.shape[0]))
    lab, e = _grabcut(img, tm, params)
    return SliceLabel(0, img, lab, np.zeros(lab.shape, bool), "recist", e)


def harvest_slice(p: PreparedLesion, tau: int, model, config: SelfPacedConfig) -> SliceLabel:
    """Model-driven label for slice ``tau``; falls back to model-plus-RECIST labels."""
    img = p.image(tau)
    est = p.r3[tau]
    prob = _predict(model, img)
    try:
        tm = trimap_from_model(prob, est, p.recist if tau == 0 else None, config.p_bg)
        lab, e = _grabcut(img, tm, config.grabcut)
        if int(lab.sum()) < config.min_fg_px:
            raise FallbackRequired(f"GrabCut kept only {int(lab.sum())} foreground pixels")
        return SliceLabel(tau, img, lab, np.zeros(lab.shape, bool), "model", e)
    except FallbackRequired as exc:
        log.debug("%s tau=%d fallback: %s", p.lesion_id, tau, exc)
        fb = fallback_labels(prob, est, config.p_bg)
        return SliceLabel(tau, img, fb.fg.astype(np.uint8), fb.ignore, "fallback", None)


def _log_entry(p: PreparedLesion, k: int, s: SliceLabel) -> HarvestEntry:
    keep = ~s.ignore
    return HarvestEntry(p.lesion_id, k, s.tau, p.r + s.tau, s.source, s.energy,
                        int((s.labels.astype(bool) & keep).sum()), int((~s.labels.astype(bool) & keep).sum()),
                        int(s.ignore.sum()))


def _taus(p: PreparedLesion, k: int) -> list[int]:
    return [t for t in range(-k, k + 1) if t in p.r3 and p.r3.within_extent(t)]


def _map(fn: Callable, items: Sequence, threads: int | None):
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def run(lesions: Sequence, config: SelfPacedConfig | None = None):
    """Self-paced training; returns (model per round, harvest log).

    The training set of each round holds that round's harvested slices of
    every lesion plus the round-0 RECIST-slice labels, which are always kept.
    Lesions that fail to load or prepare are logged and skipped.
    """
    config = config or SelfPacedConfig()
    if not lesions:
        raise DataError("no lesions to train on")
    hlog = HarvestLog()
    prepared: list[PreparedLesion] = []
    for les in lesions:
        try:
            prepared.append(prepare(les))
        except (DataError, OSError) as exc:
            lid = getattr(getattr(les, "annotation", None), "lesion_id", "?")
            log.warning("skipping lesion %s: %s", lid, exc)
            hlog.skipped.append({"lesion_id": lid, "error": str(exc)})
    if not prepared:
        raise DataError("every lesion failed to load")

    anchors = _map(lambda p: recist_slice_label(p, config.grabcut), prepared, config.threads)
    train_set = appearance.TrainSet()
    for p, s in zip(prepared, anchors):
        hlog.entries.append(_log_entry(p, 0, s))
        train_set.add(s.image, s.labels, s.ignore)
    model = appearance.train(train_set, config.features, **config.train_kwargs(0))
    models = [model]

    for k in range(1, config.k + 1):
        jobs = [(p, t) for p in prepared for t in _taus(p, k)]
        prev = model
        labels = _map(lambda job: harvest_slice(job[0], job[1], prev, config), jobs, config.threads)
        train_set = appearance.TrainSet()
        for p, s in zip(prepared, anchors):
            train_set.add(s.image, s.labels, s.ignore)
        for (p, _), s in zip(jobs, labels):
            hlog.entries.append(_log_entry(p, k, s))
            train_set.add(s.image, s.labels, s.ignore)
        model = appearance.train(train_set, init=prev, **config.train_kwargs(k))
        models.append(model)
    return models, hlog


# --------------------------------------------------------------------------
# volume inference


def _components_touching(mask: np.ndarray, seed: np.ndarray) -> np.ndarray:
    comps, _ = ndimage.label(mask, structure=np.ones((3, 3), bool))
    hit = np.unique(comps[seed & mask])
    return np.isin(comps, hit[hit > 0])


def _model_only(prob: np.ndarray, est: RecistAnnotation) -> np.ndarray:
    """Model mask (p >= 0.5) restricted to components touching the projected RECIST."""
    seed = rasterize_recist(est, (prob.shape[1], prob.shape[0]))
    return _components_touching(prob >= 0.5, seed)


def segment_slice(p: PreparedLesion, tau: int, model, config: SelfPacedConfig, use_gc: bool = True) -> np.ndarray:
    img = p.image(tau)
    est = p.r3[tau]
    prob = _predict(model, img)
    if not use_gc:
        return _model_only(prob, est)
    try:
        tm = trimap_from_model(prob, est, p.recist if tau == 0 else None, config.p_bg)
        lab, _ = _grabcut(img, tm, config.grabcut)
        if int(lab.sum()) >= config.min_fg_px:
            return lab.astype(bool)
    except FallbackRequired:
        pass
    # fallback: whatever the model itself puts on the projected RECIST, possibly nothing
    try:
        mask, _ = binarize_to_cover(prob, est)
    except FallbackRequired:
        return np.zeros(img.shape, bool)
    return _components_touching(mask, rasterize_recist(est, (img.shape[1], img.shape[0])))


def _paste(p: PreparedLesion, lesion_volume: Volume, slices: dict[int, np.ndarray]) -> Mask:
    nx, ny, nz = lesion_volume.dims
    out = np.zeros((nz, ny, nx), np.uint8)
    x0 = p.roi.origin[0] - lesion_volume.origin[0]
    y0 = p.roi.origin[1] - lesion_volume.origin[1]
    for tau, m in slices.items():
        h, w = m.shape
        out[p.r + tau, y0:y0 + h, x0:x0 + w] = m
    return Mask(out, lesion_volume.spacing_mm, lesion_volume.origin)


def segment_volume(lesion: Lesion, model, config: SelfPacedConfig | None = None, use_gc: bool = True) -> Mask:
    """3D mask: per-slice prediction, model trimap and GrabCut within the RECIST extent.

    With ``beyond_extent="model-only"`` slices past the extent are filled
    from thresholded model output connected to the projected RECIST centre,
    stopping at the first empty slice in each direction.
    """
    config = config or SelfPacedConfig()
    p = prepare(lesion)
    inside = [t for t in p.offsets() if p.r3.within_extent(t)]
    masks = dict(zip(inside, _map(lambda t: segment_slice(p, t, model, config, use_gc), inside, config.threads)))
    if config.beyond_extent == "model-only":
        for step in (1, -1):
            t = (max(inside) if step > 0 else min(inside)) + step
            while t in p.r3:
                m = _model_only(_predict(model, p.image(t)), p.r3[t])
                if not m.any():
                    break
                masks[t] = m
                t += step
    return _paste(p, lesion.volume, masks)


def grabcut_3de_slice(lesion: Lesion, est: RecistAnnotation, params: grabcut.GrabCutParams) -> tuple[np.ndarray, tuple]:
    """GrabCut on the RECIST trimap of a projected annotation; returns (mask, (x0, y0))."""
    roi = crop_and_window(lesion.volume, est, box="recist")
    img = roi.slice(est.slice_index)
    rec = to_roi(est, roi, lesion.volume)
    tm = trimap_from_recist(rec, (img.shape[1], img.shape[0]))
    lab, _ = grabcut.run(img, tm, params)
    return lab.astype(bool), (roi.origin[0] - lesion.volume.origin[0], roi.origin[1] - lesion.volume.origin[1])


def grabcut_3de(lesion: Lesion, config: SelfPacedConfig | None = None) -> Mask:
    """Non-learning baseline: per-slice GrabCut from projected RECIST trimaps only."""
    config = config or SelfPacedConfig()
    vol, ann = lesion.volume, lesion.annotation
    nz = vol.dims[2]
    r3 = estimate(ann, vol.spacing_mm, range(-ann.slice_index, nz - ann.slice_index))
    taus = [t for t in r3.offsets if r3.within_extent(t)]
    results = _map(lambda t: grabcut_3de_slice(lesion, r3[t], config.grabcut), taus, config.threads)
    nx, ny, _ = vol.dims
    out = np.zeros((nz, ny, nx), np.uint8)
    for t, (m, (x0, y0)) in zip(taus, results):
        h, w = m.shape
        out[ann.slice_index + t, y0:y0 + h, x0:x0 + w] = m
    return Mask(out, vol.spacing_mm, vol.origin)
