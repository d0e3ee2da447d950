import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from recistseg.errors import AnnotationError, DataError, FallbackRequired
from recistseg.trimap import (IGNORE, Label, Trimap, TrimapMode, binarize_to_cover, fallback_labels,
                              rasterize_recist, recist_bbox, trimap_from_bbox, trimap_from_model,
                              trimap_from_recist)
from recistseg.volume_io import RecistAnnotation


def ann(long_axis, short_axis, z=0):
    return RecistAnnotation(z, long_axis, short_axis)


@st.composite
def roi_and_recist(draw):
    """A RECIST cross and its 2w x 2h ROI (sides >= 32), cross centred."""
    half_long = draw(st.floats(8.0, 22.0))
    half_short = draw(st.floats(4.0, half_long))
    th = draw(st.floats(0, math.pi))
    u = np.array([math.cos(th), math.sin(th)])
    v = np.array([-u[1], u[0]])
    pts = np.array([half_long * u, -half_long * u, half_short * v, -half_short * v])
    span = pts.max(0) - pts.min(0)
    w, h = (max(32, int(round(2 * s))) for s in span)
    c = np.array([w / 2, h / 2]) + draw(st.tuples(st.floats(-2, 2), st.floats(-2, 2)))
    a = ann((tuple(c + pts[0]), tuple(c + pts[1])), (tuple(c + pts[2]), tuple(c + pts[3])))
    return a, (w, h)


def test_rasterize_horizontal_line():
    r = rasterize_recist(ann(((0, 5), (9, 5)), ((4, 5), (4, 5))), (10, 10))
    assert r.sum() == 10 and r[5].all()


def test_rasterize_degenerate_and_union():
    assert rasterize_recist(ann(((3, 3), (3, 3)), ((3, 3), (3, 3))), (6, 6)).sum() == 1
    r = rasterize_recist(ann(((0, 4), (8, 4)), ((4, 0), (4, 8))), (9, 9))
    assert r.sum() == 9 + 9 - 1
    with pytest.raises(AnnotationError):
        rasterize_recist(ann(((0, 4), (12, 4)), ((4, 0), (4, 8))), (9, 9))


def test_rasterize_diagonal_is_connected():
    r = rasterize_recist(ann(((1.2, 2.7), (17.6, 11.4)), ((9, 7), (9, 7))), (20, 20))
    _, n = ndimage.label(r, structure=np.ones((3, 3)))
    assert n == 1
    # Bresenham visits one pixel per step along the major direction
    assert r.sum() == 18 - 1 + 1


def test_recist_trimap_area_fractions():
    a = ann(((30, 40), (50, 40)), ((40, 33), (40, 47)))
    tm = trimap_from_recist(a, (80, 80))
    c = tm.counts()
    assert abs(c["BG"] - 3200) <= 0.02 * 3200
    ring = 4 * (math.sqrt(640) + 2) * 2
    assert 640 <= c["FG"] <= 640 + ring
    assert tm.labels[0, 0] == Label.BG
    assert sum(c.values()) == 6400
    # pixel touching FG, well inside the central box
    ys, xs = np.nonzero(tm.fg)
    y = ys.min() - 1
    assert tm.labels[y, xs[ys == ys.min()][0]] == Label.PFG


def test_recist_trimap_too_small():
    with pytest.raises(DataError):
        trimap_from_recist(ann(((0, 1), (2, 1)), ((1, 0), (1, 2))), (3, 3))


@settings(max_examples=60, deadline=None)
@given(roi_and_recist())
def test_recist_trimap_properties(case):
    a, (w, h) = case
    tm = trimap_from_recist(a, (w, h))
    n = w * h
    assert tm.labels.shape == (h, w)
    assert sum(tm.counts().values()) == n
    r = rasterize_recist(a, (w, h))
    assert tm.fg[r].all()
    bg_frac = tm.counts()["BG"] / n
    fg_frac = tm.counts()["FG"] / n
    assert 0.48 <= bg_frac <= 0.52
    assert 0.10 <= fg_frac <= 0.13
    assert np.array_equal(trimap_from_recist(a, (w, h)).labels, tm.labels)


def test_bbox_plain_counts():
    # tight extent 40 px grows by 25% to a 50x50 box
    a = ann(((20, 40), (59, 40)), ((40, 20), (40, 59)))
    assert recist_bbox(a, (80, 80)) == (15, 65, 15, 65)
    tm = trimap_from_bbox(a, (80, 80), TrimapMode.BboxPlain)
    assert tm.counts()["BG"] == 6400 - 2500
    assert tm.counts()["PFG"] == 2500 and tm.counts()["FG"] == 0


def test_bbox_inner_central_box():
    a = ann(((20, 40), (59, 40)), ((40, 20), (40, 59)))
    tm = trimap_from_bbox(a, (80, 80), "bbox-inner")
    fg = tm.counts()["FG"]
    assert abs(fg - 0.2 * 2500) <= 4 * math.sqrt(500) + 4
    ys, xs = np.nonzero(tm.fg)
    assert (ys.min() + ys.max()) / 2 == pytest.approx(39.5, abs=0.5)
    assert (xs.min() + xs.max()) / 2 == pytest.approx(39.5, abs=0.5)


def test_dilate_only_disjoint_and_ignored():
    a = ann(((25, 40), (55, 40)), ((40, 32), (40, 48)))
    tm = trimap_from_bbox(a, (80, 80), TrimapMode.RecistDilateOnly)
    assert not (tm.fg & tm.bg).any()
    assert np.array_equal(tm.ignore, ~(tm.fg | tm.bg))
    raster = tm.to_raster()
    assert set(np.unique(raster)) <= {0, 1, IGNORE}
    with pytest.raises(ValueError):
        trimap_from_bbox(a, (80, 80), "nope")


def test_binarize_threshold_enumeration():
    a = ann(((0, 0), (3, 0)), ((0, 0), (0, 0)))
    prob = np.zeros((2, 4))
    prob[0] = [0.9, 0.2, 0.8, 0.1]
    mask, t = binarize_to_cover(prob, a)
    # candidates sorted descending 0.9, 0.8, 0.2, 0.1; ceil(4/2) = 2 -> 0.8
    assert t == 0.8
    assert mask[0].tolist() == [True, False, True, False]
    mask, t = binarize_to_cover(np.ones((2, 4)), a)
    assert t == 1.0 and mask.all()
    with pytest.raises(FallbackRequired):
        binarize_to_cover(np.zeros((2, 4)), a)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binarize_coverage_property(seed):
    rng = np.random.default_rng(seed)
    prob = rng.random((24, 24))
    a = ann(((4, 12), (20, 12)), ((12, 6), (12, 18)))
    r = rasterize_recist(a, (24, 24))
    mask, t = binarize_to_cover(prob, a)
    assert (mask & r).sum() >= math.ceil(r.sum() / 2)
    assert ((prob >= t + 1e-9) & r).sum() < math.ceil(r.sum() / 2)


def _disk(n, cx, cy, rad):
    yy, xx = np.mgrid[:n, :n]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= rad**2


def test_model_trimap_disk():
    a = ann(((22, 30), (38, 30)), ((30, 24), (30, 36)))
    disk = _disk(60, 30, 30, 10)
    tm = trimap_from_model(disk.astype(float), a)
    assert tm.fg[disk].all()
    assert tm.bg[0, 0] and tm.bg[-1, -1]
    assert not tm.bg[disk].any()


def test_model_trimap_uniform_and_disjoint_component():
    a = ann(((22, 30), (38, 30)), ((30, 24), (30, 36)))
    r = rasterize_recist(a, (60, 60))
    prob = np.full((60, 60), 0.5)
    prob[:8, :8] = 0.0
    assert trimap_from_model(prob, a).fg[r].all()
    prob = np.where(_disk(60, 30, 30, 9), 0.9, 0.05)
    prob[45:52, 45:52] = 0.9  # bright but nowhere near the marks
    tm = trimap_from_model(prob, a)
    assert not tm.fg[45:52, 45:52].any()
    assert not tm.bg[45:52, 45:52].any()
    with pytest.raises(FallbackRequired):
        trimap_from_model(np.zeros((60, 60)), a)


def test_model_trimap_uses_actual_recist_when_no_estimate():
    a = ann(((22, 30), (38, 30)), ((30, 24), (30, 36)))
    prob = _disk(60, 30, 30, 10).astype(float)
    assert np.array_equal(trimap_from_model(prob, None, a).labels, trimap_from_model(prob, a).labels)


def test_fallback_labels():
    a = ann(((22, 30), (38, 30)), ((30, 24), (30, 36)))
    r = rasterize_recist(a, (60, 60))
    tm = fallback_labels(np.zeros((60, 60)), a)
    assert np.array_equal(tm.fg, r)
    assert tm.bg[0, 0]
    region = _disk(60, 30, 30, 12)
    tm = fallback_labels(np.where(region, 0.95, 0.5), a)
    assert tm.fg[region].all()
    assert tm.ignore[~region].all()


def test_trimap_type_checks():
    with pytest.raises(DataError):
        Trimap(np.full((3, 3), 7))
    t = Trimap(np.zeros((3, 4), np.uint8))
    assert t.dims == (4, 3)
