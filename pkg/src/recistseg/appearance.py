"""Pixel-wise foreground-probability model: logistic regression on local features.

The objective is the per-image mean binary cross-entropy averaged over
images, with ignored pixels dropped from both the sum and the normaliser.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .errors import DataError

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass(frozen=True)
class FeatureConfig:
    radii: tuple[int, ...] = (1, 2, 4)
    include_raw: bool = True
    use_stack: bool = False  # expand single-channel input to (original, denoised, enhanced)
    relative: bool = True  # measure intensities from the image median

    def __post_init__(self):
        radii = tuple(int(r) for r in self.radii)
        if any(r < 1 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError(f"radii must be >= 1 and strictly increasing, got {radii}")
        object.__setattr__(self, "radii", radii)

    def dim(self, channels: int) -> int:
        return channels * (int(self.include_raw) + 2 * len(self.radii))

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "include_raw": self.include_raw, "use_stack": self.use_stack,
                "relative": self.relative}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(tuple(d.get("radii", (1, 2, 4))), bool(d.get("include_raw", True)),
                   bool(d.get("use_stack", False)), bool(d.get("relative", True)))


def _channels(image, config: FeatureConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        if config.use_stack:
            from .enhance import classical_enhance
            return classical_enhance(img).as_array()
        return img[..., None]
    if img.ndim != 3:
        raise DataError(f"expected a 2D image or (H, W, C) stack, got shape {img.shape}")
    return img


def extract_features(image, config: FeatureConfig | None = None) -> np.ndarray:
    """(H, W, D) features: raw value plus box mean and std per radius, per channel.

    Borders replicate the edge pixel. With ``config.relative`` every channel
    is first shifted by its median, which on a lesion-centred crop is a
    background level, so the model sees contrast rather than absolute
    intensity.
    """
    config = config or FeatureConfig()
    img = _channels(image, config)
    if config.relative:
        img = img - np.median(img, axis=(0, 1))
    feats = []
    for c in range(img.shape[2]):
        x = img[..., c]
        if config.include_raw:
            feats.append(x)
        for r in config.radii:
            size = 2 * r + 1
            m = ndimage.uniform_filter(x, size=size, mode="nearest")
            var = ndimage.uniform_filter(x * x, size=size, mode="nearest") - m * m
            var[var < 1e-14] = 0.0  # cancellation noise on flat patches
            feats += [m, np.sqrt(var)]
    return np.stack(feats, axis=-1)


@dataclass(frozen=True, eq=False)
class AppearanceModel:
    """Logistic model over standardised features; ``theta`` = weights then bias."""

    config: FeatureConfig
    theta: np.ndarray
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "feat_mean", np.asarray(self.feat_mean, dtype=np.float64).ravel())
        object.__setattr__(self, "feat_scale", np.asarray(self.feat_scale, dtype=np.float64).ravel())
        if len(theta) != len(self.feat_mean) + 1 or len(self.feat_scale) != len(self.feat_mean):
            raise DataError("parameter vector does not match the feature dimension")
        if not np.isfinite(theta).all():
            raise DataError("non-finite model parameters")

    @property
    def n_features(self) -> int:
        return len(self.feat_mean)

    @classmethod
    def zeros(cls, config: FeatureConfig, n_features: int, mean=None, scale=None) -> "AppearanceModel":
        mean = np.zeros(n_features) if mean is None else mean
        scale = np.ones(n_features) if scale is None else scale
        return cls(config, np.zeros(n_features + 1), mean, scale)

    def with_theta(self, theta, **meta) -> "AppearanceModel":
        return AppearanceModel(self.config, theta, self.feat_mean, self.feat_scale, {**self.meta, **meta})

    def standardise(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[-1] != self.n_features:
            raise DataError(f"feature dimension {feats.shape[-1]} != model dimension {self.n_features}")
        return (feats - self.feat_mean) / self.feat_scale

    def to_dict(self) -> dict:
        return {
            "features": self.config.to_dict(),
            "theta": self.theta.tolist(),
            "feat_mean": self.feat_mean.tolist(),
            "feat_scale": self.feat_scale.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppearanceModel":
        try:
            return cls(FeatureConfig.from_dict(d["features"]), d["theta"], d["feat_mean"], d["feat_scale"],
                       dict(d.get("meta", {})))
        except KeyError as e:
            raise DataError(f"model file lacks field {e}") from None

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "AppearanceModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read model {path}: {e}") from None


@dataclass(frozen=True, eq=False)
class TrainItem:
    image: np.ndarray
    labels: np.ndarray
    ignore: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        ignore = np.zeros(labels.shape, bool) if self.ignore is None else np.asarray(self.ignore, bool)
        image = np.asarray(self.image, dtype=np.float64)
        if image.shape[:2] != labels.shape or ignore.shape != labels.shape:
            raise DataError(f"item shapes differ: image {image.shape}, labels {labels.shape}, ignore {ignore.shape}")
        if not np.isin(labels[~ignore], (0, 1)).all():
            raise DataError("labels must be 0/1 outside ignored pixels")
        if ignore.all():
            raise DataError("training item has every pixel ignored")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "labels", np.where(ignore, 0, labels).astype(np.uint8))
        object.__setattr__(self, "ignore", ignore)


class TrainSet:
    """The set of (image, label, ignore) pairs a model is fitted to."""

    def __init__(self, items: Sequence = ()):
        self.items: list[TrainItem] = []
        for it in items:
            self.add(*it) if not isinstance(it, TrainItem) else self.items.append(it)

    def add(self, image, labels, ignore=None):
        self.items.append(TrainItem(image, labels, ignore))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def n_pixels(self) -> int:
        return int(sum((~it.ignore).sum() for it in self.items))


@dataclass
class _Design:
    """Flattened non-ignored pixels of a train set with per-pixel weights 1/(N |Y_i|)."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray


def _design(model_or_config, trainset: TrainSet, standardise: AppearanceModel | None = None) -> tuple[_Design, int]:
    if len(trainset) == 0:
        raise DataError("empty training set")
    config = model_or_config.config if isinstance(model_or_config, AppearanceModel) else model_or_config
    xs, ys, ws = [], [], []
    n = len(trainset)
    for it in trainset:
        keep = ~it.ignore
        f = extract_features(it.image, config)[keep]
        xs.append(f)
        ys.append(it.labels[keep].astype(np.float64))
        ws.append(np.full(len(f), 1.0 / (n * len(f))))
    x = np.concatenate(xs)
    if standardise is not None:
        x = standardise.standardise(x)
    return _Design(x, np.concatenate(ys), np.concatenate(ws)), n


def _loss_grad(theta: np.ndarray, d: _Design, with_grad: bool = True):
    z = d.x @ theta[:-1] + theta[-1]
    p = expit(z)
    pc = np.clip(p, EPS, 1 - EPS)
    h = -(d.y * np.log(pc) + (1 - d.y) * np.log(1 - pc))
    val = float(d.w @ h)
    if not with_grad:
        return val, None
    r = d.w * (p - d.y)
    return val, np.concatenate([r @ d.x, [r.sum()]])


def cross_entropy(prob_maps: Sequence[np.ndarray], trainset: TrainSet) -> float:
    """The training objective evaluated on given per-item probability maps."""
    if len(prob_maps) != len(trainset) or len(trainset) == 0:
        raise DataError("need one probability map per training item")
    total = 0.0
    for p, it in zip(prob_maps, trainset):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != it.labels.shape:
            raise DataError(f"probability map {p.shape} does not match labels {it.labels.shape}")
        keep = ~it.ignore
        pk = p[keep]
        y = it.labels[keep].astype(bool)
        # only the log of the probability given to the true class is floored
        q = np.where(y, pk, 1.0 - pk)
        total += float(np.mean(-np.log(np.maximum(q, EPS))))
    return total / len(trainset)


def loss(model: AppearanceModel, trainset: TrainSet) -> float:
    """Mean over items of the mean cross-entropy over each item's non-ignored pixels."""
    d, _ = _design(model, trainset, model)
    return _loss_grad(model.theta, d, with_grad=False)[0]


def grad(model: AppearanceModel, trainset: TrainSet) -> np.ndarray:
    """Analytic gradient of :func:`loss` with respect to ``model.theta``.

    Probability clipping is ignored, so this is exact wherever predictions
    stay inside [1e-12, 1 - 1e-12].
    """
    d, _ = _design(model, trainset, model)
    return _loss_grad(model.theta, d)[1]


def _fit_scaler(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def train(trainset: TrainSet, config: FeatureConfig | None = None, lr: float = 1e-2, epochs: int = 30,
          batch: int = 4096, seed: int = 0, momentum: float = 0.9, balance: bool = True,
          init: AppearanceModel | None = None, full_batch: bool = False) -> AppearanceModel:
    """Fit the model by SGD with momentum.

    With ``balance`` each mini-batch draws equal numbers of foreground and
    background pixels; otherwise pixels are drawn with probability
    proportional to their weight in the objective, so batch gradients are
    unbiased. ``init`` warm-starts from an earlier model (its feature
    standardisation is kept). ``full_batch`` runs exact gradient descent, one
    step per epoch.
    """
    if init is not None:
        config = init.config
    config = config or FeatureConfig()
    raw, _ = _design(config, trainset)
    if init is not None:
        model = init
    else:
        mean, scale = _fit_scaler(raw.x)
        model = AppearanceModel.zeros(config, raw.x.shape[1], mean, scale)
    d = _Design(model.standardise(raw.x), raw.y, raw.w)

    rng = np.random.default_rng(seed)
    theta = model.theta.copy()
    vel = np.zeros_like(theta)
    curve = [_loss_grad(theta, d, with_grad=False)[0]]
    n = len(d.y)
    pools = []
    if balance and not full_batch:
        for cls in (1.0, 0.0):
            idx = np.nonzero(d.y == cls)[0]
            if len(idx):
                pools.append((idx, d.w[idx] / d.w[idx].sum()))
    if not pools:
        pools = [(np.arange(n), d.w / d.w.sum())]
    steps = 1 if full_batch else max(1, int(np.ceil(n / batch)))
    per_pool = max(1, batch // len(pools))

    for ep in range(epochs):
        for _ in range(steps):
            if full_batch:
                _, g = _loss_grad(theta, d)
            else:
                sel = np.concatenate([rng.choice(idx, size=per_pool, p=p) for idx, p in pools])
                xb, yb = d.x[sel], d.y[sel]
                r = (expit(xb @ theta[:-1] + theta[-1]) - yb) / len(sel)
                g = np.concatenate([r @ xb, [r.sum()]])
            vel = momentum * vel - lr * g
            theta = theta + vel
        val = _loss_grad(theta, d, with_grad=False)[0]
        if not np.isfinite(val) or not np.isfinite(theta).all():
            raise RuntimeError(f"training diverged at epoch {ep}: loss {val}, lr {lr}")
        curve.append(val)
        log.debug("epoch %d loss %.6f", ep, val)

    meta = {
        "epochs": int(epochs) + int(model.meta.get("epochs", 0)),
        "loss_curve": [float(v) for v in curve],
        "seed": int(seed),
        "lr": lr,
        "batch": int(batch),
        "balance": bool(balance),
        "warm_start": init is not None,
        "rounds": int(model.meta.get("rounds", 0)) + 1 if init is not None else 1,
    }
    return model.with_theta(theta, **meta)


def predict_map(model: AppearanceModel, image) -> np.ndarray:
    """Per-pixel foreground probability, strictly inside (0, 1)."""
    f = model.standardise(extract_features(image, model.config))
    p = expit(f @ model.theta[:-1] + model.theta[-1])
    return np.clip(p, EPS, 1 - EPS)
