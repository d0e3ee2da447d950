"""GrabCut on a four-region trimap: GMM colour models + contrast-sensitive min-cut."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gmm as gmm_mod
from .errors import DataError
from .graphcut import INF, build_grid, max_flow, neighbour_offsets
from .trimap import Label, Trimap


@dataclass(frozen=True)
class GrabCutParams:
    k_components: int = 5
    gamma: float = 50.0
    connectivity: int = 8
    max_iters: int = 5
    convergence: float = 1e-3
    seed: int = 0
    em_iters: int = 10

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.k_components < 1 or self.max_iters < 1:
            raise ValueError("k_components and max_iters must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class EnergyBreakdown:
    data_term: float
    smoothness_term: float

    @property
    def total(self) -> float:
        return self.data_term + self.smoothness_term


def _pixels(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataError(f"expected an (H, W) or (H, W, 1|3) image, got {np.shape(image)}")
    return img


def _shifted_pairs(img: np.ndarray, dy: int, dx: int):
    h, w = img.shape[:2]
    a = img[: h - dy, max(0, -dx): w - max(0, dx)]
    b = img[dy:, max(0, -dx) + dx: w - max(0, dx) + dx]
    return a, b


def pairwise_weights(image, gamma: float, connectivity: int = 8):
    """Per-offset contrast weights gamma * exp(-beta |dz|^2) / dist, and beta.

    beta = 1 / (2 <|dz|^2>) averaged over every neighbour pair in the image;
    a constant image gets beta = 0.
    """
    img = _pixels(image)
    h, w = img.shape[:2]
    diffs = {}
    total, count = 0.0, 0
    for dy, dx in neighbour_offsets(connectivity):
        a, b = _shifted_pairs(img, dy, dx)
        d2 = ((a - b) ** 2).sum(axis=2)
        diffs[(dy, dx)] = d2
        total += d2.sum()
        count += d2.size
    mean = total / count if count else 0.0
    beta = 1.0 / (2.0 * mean) if mean > 0 else 0.0
    weights = {}
    for (dy, dx), d2 in diffs.items():
        full = np.zeros((h, w))
        full[: h - dy, max(0, -dx): w - max(0, dx)] = gamma * np.exp(-beta * d2) / np.hypot(dy, dx)
        weights[(dy, dx)] = full
    return weights, beta


def unaries(image, fg_gmm, bg_gmm) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel costs of labelling foreground / background."""
    img = _pixels(image)
    h, w, c = img.shape
    x = img.reshape(-1, c)
    return fg_gmm.neg_log_density(x).reshape(h, w), bg_gmm.neg_log_density(x).reshape(h, w)


def _smoothness(labeling: np.ndarray, weights) -> float:
    lab = labeling.astype(bool)[..., None]
    s = 0.0
    for (dy, dx), wmap in weights.items():
        a, b = _shifted_pairs(lab, dy, dx)
        wa, _ = _shifted_pairs(wmap[..., None], dy, dx)
        s += float(wa[a != b].sum())
    return s


def energy(image, labeling, fg_gmm, bg_gmm, params: GrabCutParams, weights=None) -> EnergyBreakdown:
    """Objective minimised by the cut at fixed mixtures."""
    lab = np.asarray(labeling).astype(bool)
    d_fg, d_bg = unaries(image, fg_gmm, bg_gmm)
    data = float(d_fg[lab].sum() + d_bg[~lab].sum())
    if weights is None:
        weights, _ = pairwise_weights(image, params.gamma, params.connectivity)
    return EnergyBreakdown(data, _smoothness(lab, weights))


def cut_step(image, trimap: Trimap, fg_gmm, bg_gmm, params: GrabCutParams, weights=None) -> np.ndarray:
    """Optimal labelling for fixed mixtures; clamped pixels keep their label."""
    img = _pixels(image)
    h, w = img.shape[:2]
    d_fg, d_bg = unaries(img, fg_gmm, bg_gmm)
    if weights is None:
        weights, _ = pairwise_weights(img, params.gamma, params.connectivity)
    base = np.minimum(d_fg, d_bg)
    to_source = d_bg - base
    to_sink = d_fg - base
    fg, bg = trimap.fg, trimap.bg
    to_source[fg], to_sink[fg] = INF, 0.0
    to_source[bg], to_sink[bg] = 0.0, INF
    net = build_grid((w, h), to_source, to_sink, weights, params.connectivity)
    _, side = max_flow(net)
    return side.reshape(h, w).astype(np.uint8)


def run(image, trimap: Trimap, params: GrabCutParams | None = None, return_models: bool = False):
    """Iterated GrabCut; returns (mask, energy history).

    Each iteration refits both mixtures by EM warm-started from the previous
    iteration (soft responsibilities stand in for hard component assignment),
    then takes the optimal cut. Both steps can only lower the joint energy, so
    the history is non-increasing.
    """
    params = params or GrabCutParams()
    img = _pixels(image)
    if img.shape[:2] != trimap.labels.shape:
        raise DataError(f"image {img.shape[:2]} and trimap {trimap.labels.shape} differ in size")
    if not np.isin(trimap.labels, (Label.FG, Label.PFG)).any() or not trimap.bg.any():
        raise DataError("GrabCut needs an initial foreground (FG or PFG) and a non-empty BG")
    h, w, c = img.shape
    x = img.reshape(-1, c)
    weights, _ = pairwise_weights(img, params.gamma, params.connectivity)
    lab = np.isin(trimap.labels, (Label.FG, Label.PFG)).astype(np.uint8)

    fg_gmm = bg_gmm = None
    history: list[EnergyBreakdown] = []
    for it in range(params.max_iters):
        sel = lab.ravel().astype(bool)
        if fg_gmm is None:
            fg_gmm = gmm_mod.fit(x[sel], params.k_components, params.em_iters, seed=params.seed)
            bg_gmm = gmm_mod.fit(x[~sel], params.k_components, params.em_iters, seed=params.seed + 1)
        else:
            # an emptied side keeps its mixture; it then contributes no data term
            if sel.any():
                fg_gmm = gmm_mod.fit(x[sel], params.k_components, params.em_iters, init=fg_gmm)
            bg_gmm = gmm_mod.fit(x[~sel], params.k_components, params.em_iters, init=bg_gmm)
        new = cut_step(img, trimap, fg_gmm, bg_gmm, params, weights)
        history.append(energy(img, new, fg_gmm, bg_gmm, params, weights))
        changed = float(np.mean(new != lab))
        lab = new
        if changed < params.convergence:
            break
    if return_models:
        return lab, history, (fg_gmm, bg_gmm)
    return lab, history
