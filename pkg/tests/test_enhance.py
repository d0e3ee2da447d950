import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recistseg.enhance import (DegradeParams, EnhanceStack, autocorrelation_width, classical_enhance,
                               compress_contrast, make_denoise_pair, make_enhance_pair, noise_std_estimate)
from recistseg.errors import DataError


def smooth_image(seed=0, size=160):
    """Mid-grey image with soft structure, far from the clip limits."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    return 0.5 + 0.2 * np.sin(6 * xx + 2 * rng.random()) * np.cos(4 * yy + 2 * rng.random())


def test_params_ranges():
    DegradeParams(50, 4, 3, 3)
    for bad in (dict(noise_sigma=0), dict(noise_sigma=51), dict(scale=0.5), dict(scale=4.5),
                dict(blur_sigma=0), dict(blur_sigma=3.1), dict(contrast_kappa=0.9), dict(contrast_kappa=3.2)):
        with pytest.raises(ValueError):
            DegradeParams(**bad)
    for s in range(50):
        p = DegradeParams.sample(s)
        assert 0 < p.noise_sigma <= 50 and 1 <= p.scale <= 4


def test_vanishing_noise():
    noisy, clean = make_denoise_pair(smooth_image(), DegradeParams(noise_sigma=0.01))
    assert noisy.shape == clean.shape == (32, 32)
    assert np.abs(noisy - clean).max() < 3 / 255


def test_noise_std_recovered():
    img = smooth_image(1)
    for sigma in (5.0, 20.0, 40.0):
        diffs = []
        for seed in range(10):  # 10 x 1024 pixels
            noisy, clean = make_denoise_pair(img, DegradeParams(noise_sigma=sigma, seed=seed))
            diffs.append(noisy - clean)
        est = noise_std_estimate(np.concatenate(diffs), 0.0)
        assert abs(est - sigma) <= 0.1 * sigma


def test_pairs_are_seeded():
    img = smooth_image(2)
    a = make_denoise_pair(img, DegradeParams(seed=4))
    b = make_denoise_pair(img, DegradeParams(seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = make_enhance_pair(img, DegradeParams(seed=4))
    d = make_enhance_pair(img, DegradeParams(seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(c, d))


def test_identity_degradation():
    deg, clean = make_enhance_pair(smooth_image(3), DegradeParams(scale=1, blur_sigma=1e-9, contrast_kappa=1))
    assert deg.shape == (128, 128)
    assert np.abs(deg - clean).max() < 1e-6


def test_checkerboard_compression():
    board = (np.indices((8, 8)).sum(0) % 2).astype(float)
    out = compress_contrast(board, 2.0)
    assert set(np.unique(out)) == {0.25, 0.75}


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 50), st.floats(1, 4), st.floats(0.01, 3), st.floats(1, 3), st.integers(0, 1000))
def test_degraded_range(sigma, scale, blur, kappa, seed):
    img = np.random.default_rng(seed).random((130, 140))
    p = DegradeParams(sigma, scale, blur, kappa, seed)
    for fn in (make_denoise_pair, make_enhance_pair):
        x, y = fn(img, p)
        assert x.min() >= 0 and x.max() <= 1 and x.shape == y.shape


def test_too_small():
    with pytest.raises(DataError):
        make_denoise_pair(np.zeros((31, 40)), DegradeParams())
    with pytest.raises(DataError):
        make_enhance_pair(np.zeros((100, 200)), DegradeParams())


def test_blur_monotone_in_autocorrelation_width():
    rng = np.random.default_rng(5)
    img = np.clip(0.5 + 0.2 * rng.standard_normal((160, 160)), 0, 1)
    widths = [autocorrelation_width(make_enhance_pair(img, DegradeParams(scale=1, blur_sigma=b, contrast_kappa=1))[0])
              for b in (0.8, 1.5, 2.5)]
    assert all(b > a for a, b in zip(widths, widths[1:]))


def test_enhance_constant_image():
    s = classical_enhance(np.full((20, 24), 0.4))
    for ch in (s.original, s.denoised, s.enhanced):
        assert ch.shape == (20, 24)
        assert np.ptp(ch) < 1e-6
    assert s.as_array().shape == (20, 24, 3)


def _step(seed):
    rng = np.random.default_rng(seed)
    img = np.where(np.arange(64) < 32, 0.35, 0.65)[None].repeat(64, 0)
    return np.clip(img + rng.normal(0, 0.03, img.shape), 0, 1)


def test_enhance_sharpens_edge_and_denoises():
    img = _step(6)
    s = classical_enhance(img)
    grad = lambda x: np.abs(x[:, 32] - x[:, 31]).mean()  # noqa: E731
    assert grad(s.enhanced) > grad(s.original)
    flat = np.s_[8:56, 4:24]
    assert s.denoised[flat].std() < s.original[flat].std()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(8, 40), st.integers(8, 40))
def test_enhance_shape_and_range(seed, h, w):
    img = np.random.default_rng(seed).random((h, w))
    arr = classical_enhance(img).as_array()
    assert arr.shape == (h, w, 3) and arr.min() >= 0 and arr.max() <= 1


def test_stack_shape_check():
    with pytest.raises(DataError):
        EnhanceStack(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(DataError):
        classical_enhance(np.zeros((2, 2, 2)))
