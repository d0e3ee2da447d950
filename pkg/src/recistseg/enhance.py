"""Synthetic degradation pairs and a classical denoise + enhance front end.

Images are 2D float arrays in [0, 1]. The enhancer produces a three-channel
(original, denoised, enhanced) stack that the appearance model can consume.
"""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .errors import DataError

DENOISE_CROP = 32
ENHANCE_CROP = 128


@dataclass(frozen=True)
class DegradeParams:
    """``noise_sigma`` is a standard deviation on the 0-255 scale."""

    noise_sigma: float = 10.0
    scale: float = 2.0
    blur_sigma: float = 1.0
    contrast_kappa: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.noise_sigma <= 50:
            raise ValueError("noise_sigma must lie in (0, 50]")
        if not 1 <= self.scale <= 4:
            raise ValueError("scale must lie in [1, 4]")
        if not 0 < self.blur_sigma <= 3:
            raise ValueError("blur_sigma must lie in (0, 3]")
        if not 1 <= self.contrast_kappa <= 3:
            raise ValueError("contrast_kappa must lie in [1, 3]")

    @classmethod
    def sample(cls, seed: int) -> "DegradeParams":
        """Parameters drawn uniformly over their admissible ranges."""
        rng = np.random.default_rng(seed)
        return cls(
            noise_sigma=float(rng.uniform(1e-3, 50)),
            scale=float(rng.uniform(1, 4)),
            blur_sigma=float(rng.uniform(1e-3, 3)),
            contrast_kappa=float(rng.uniform(1, 3)),
            seed=int(rng.integers(2**31)),
        )


@dataclass(frozen=True, eq=False)
class EnhanceStack:
    original: np.ndarray
    denoised: np.ndarray
    enhanced: np.ndarray

    def __post_init__(self):
        if not self.original.shape == self.denoised.shape == self.enhanced.shape:
            raise DataError("stack channels differ in shape")

    def as_array(self) -> np.ndarray:
        """(H, W, 3) array in channel order original, denoised, enhanced."""
        return np.stack([self.original, self.denoised, self.enhanced], axis=-1)


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a 2D image, got shape {img.shape}")
    return img


def _random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    if h < size or w < size:
        raise DataError(f"image {w}x{h} is smaller than the {size}x{size} crop")
    y = int(rng.integers(h - size + 1))
    x = int(rng.integers(w - size + 1))
    return img[y:y + size, x:x + size].copy()


def make_denoise_pair(image, params: DegradeParams) -> tuple[np.ndarray, np.ndarray]:
    """(noisy, clean) 32x32 crops; the noise is white Gaussian at ``noise_sigma``/255."""
    rng = np.random.default_rng(params.seed)
    clean = _random_crop(_as_image(image), DENOISE_CROP, rng)
    noisy = clean + rng.normal(0.0, params.noise_sigma / 255.0, clean.shape)
    return np.clip(noisy, 0.0, 1.0), clean


def compress_contrast(x: np.ndarray, kappa: float) -> np.ndarray:
    """Linear compression towards mid-grey: 0.5 + (x - 0.5) / kappa."""
    return 0.5 + (np.asarray(x, dtype=np.float64) - 0.5) / kappa


def make_enhance_pair(image, params: DegradeParams) -> tuple[np.ndarray, np.ndarray]:
    """(degraded, clean) 128x128 crops.

    The crop is area-downsampled by ``scale``, blurred, contrast-compressed and
    brought back to full size with bicubic interpolation.
    """
    rng = np.random.default_rng(params.seed)
    clean = _random_crop(_as_image(image), ENHANCE_CROP, rng)
    small = max(1, int(round(ENHANCE_CROP / params.scale)))
    low = cv2.resize(clean, (small, small), interpolation=cv2.INTER_AREA)
    low = ndimage.gaussian_filter(low, params.blur_sigma, mode="nearest")
    low = compress_contrast(low, params.contrast_kappa)
    up = cv2.resize(low, (ENHANCE_CROP, ENHANCE_CROP), interpolation=cv2.INTER_CUBIC)
    return np.clip(up, 0.0, 1.0), clean


def _stretch(x: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    lo, hi = np.percentile(x, [lo_pct, hi_pct])
    if hi - lo < 1e-12:
        return np.clip(x, 0.0, 1.0)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def classical_enhance(image, sigma_space: float = 1.5, sigma_range: float = 0.05,
                      amount: float = 0.8, radius: float = 1.5) -> EnhanceStack:
    """Bilateral denoising, then unsharp masking and a 1-99 percentile stretch."""
    img = np.clip(_as_image(image), 0.0, 1.0)
    den = cv2.bilateralFilter(img.astype(np.float32), d=-1, sigmaColor=sigma_range,
                              sigmaSpace=sigma_space, borderType=cv2.BORDER_REPLICATE).astype(np.float64)
    den = np.clip(den, 0.0, 1.0)
    sharp = den + amount * (den - ndimage.gaussian_filter(den, radius, mode="nearest"))
    return EnhanceStack(img, den, _stretch(sharp))


def noise_std_estimate(noisy: np.ndarray, clean: np.ndarray) -> float:
    """Noise level of a pair on the 0-255 scale."""
    return float(np.std(np.asarray(noisy) - np.asarray(clean)) * 255.0)


def autocorrelation_width(image: np.ndarray) -> float:
    """Second-moment width (px) of the normalised autocorrelation's central peak.

    Larger for smoother images; used to check that blur strength is
    reflected in the degraded output.
    """
    x = np.asarray(image, dtype=np.float64)
    x = x - x.mean()
    f = np.fft.fft2(x)
    ac = np.fft.fftshift(np.real(np.fft.ifft2(f * np.conj(f))))
    if ac.max() <= 0:
        return 0.0
    ac = ac / ac.max()
    cy, cx = np.array(ac.shape) // 2
    yy, xx = np.mgrid[: ac.shape[0], : ac.shape[1]]
    win = ac * (ac > 0.05) * ((yy - cy) ** 2 + (xx - cx) ** 2 <= 36)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return float(np.sqrt((win * r2).sum() / win.sum()))
