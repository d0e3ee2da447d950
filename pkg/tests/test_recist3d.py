import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recistseg.errors import AnnotationError
from recistseg.recist3d import estimate, extent, extent_of, semi_axes_mm
from recistseg.volume_io import RecistAnnotation


def centred(a_px, b_px, c=(20.0, 20.0), z=6):
    cx, cy = c
    return RecistAnnotation(z, ((cx - a_px, cy), (cx + a_px, cy)), ((cx, cy - b_px), (cx, cy + b_px)))


def test_identity_at_zero():
    ann = centred(5, 3)
    r3 = estimate(ann, (1, 1, 3), 2)
    assert r3[0] is ann
    assert r3.offsets == [-2, -1, 0, 1, 2]


def test_pythagorean_endpoint():
    r3 = estimate(centred(5, 3), (1.0, 1.0, 3.0), [-1, 0, 1])
    c = np.array([20.0, 20.0])
    for tau in (-1, 1):
        for p in r3[tau].long_axis:
            # sqrt(5^2 - 3^2)
            assert math.dist(p, c) == pytest.approx(4.0, abs=1e-9)
    assert r3[1].slice_index == 7 and r3[-1].slice_index == 5


def test_beyond_extent_and_extent():
    r3 = estimate(centred(5, 3), (1, 1, 3), 3)
    assert r3[2].long_length_px() == 0 and not r3.within_extent(2)
    assert extent(r3) == (-1, 1)
    assert extent_of(centred(5, 3), (1, 1, 3)) == 1
    # a < s_z: nothing off the RECIST slice
    assert extent(estimate(centred(2, 1), (1, 1, 3), 2)) == (0, 0)
    assert extent_of(centred(2, 1), (1, 1, 3)) == 0


def test_off_centre_intersection():
    # endpoints 8 mm and 3 mm from the crossing, 3 mm slices
    ann = RecistAnnotation(4, ((12.0, 10.0), (23.0, 10.0)), ((15.0, 7.0), (15.0, 13.0)))
    assert semi_axes_mm(ann, (1, 1, 3)) == pytest.approx((3.0, 8.0))
    r3 = estimate(ann, (1, 1, 3), 3)
    (p0, p1) = r3[1].long_axis
    c = np.array([15.0, 10.0])
    assert math.dist(p0, c) == pytest.approx(0.0, abs=1e-12)
    assert math.dist(p1, c) == pytest.approx(math.sqrt(64 - 9), abs=1e-9)
    assert math.dist(r3[2].long_axis[1], c) == pytest.approx(math.sqrt(64 - 36), abs=1e-9)
    assert r3[3].long_length_px() == 0
    assert extent(r3) == (-2, 2)


def test_anisotropic_in_plane_spacing():
    ann = centred(5, 3)
    r3 = estimate(ann, (0.5, 0.5, 1.0), 1)
    # 5 px at 0.5 mm = 2.5 mm; one 1 mm slice away: sqrt(6.25 - 1)
    assert r3[1].lengths_mm((0.5, 0.5))[0] == pytest.approx(2 * math.sqrt(6.25 - 1), abs=1e-9)


def test_errors():
    with pytest.raises(AnnotationError):
        estimate(centred(0, 0), (1, 1, 1), 1)
    with pytest.raises(AnnotationError):
        estimate(centred(5, 3), (1, 1, 0), 1)


@st.composite
def annotations(draw):
    cx, cy = draw(st.floats(20, 40)), draw(st.floats(20, 40))
    th = draw(st.floats(0, math.pi))
    u = np.array([math.cos(th), math.sin(th)])
    v = np.array([-u[1], u[0]])
    a0, a1 = draw(st.floats(1, 15)), draw(st.floats(1, 15))
    b0, b1 = draw(st.floats(0.5, 8)), draw(st.floats(0.5, 8))
    c = np.array([cx, cy])
    return RecistAnnotation(10, (tuple(c - a0 * u), tuple(c + a1 * u)), (tuple(c - b0 * v), tuple(c + b1 * v)))


@settings(max_examples=100, deadline=None)
@given(annotations(), st.floats(0.5, 5.0), st.floats(0.3, 1.5))
def test_projection_properties(ann, sz, sxy):
    spacing = (sxy, sxy, sz)
    r3 = estimate(ann, spacing, 6)
    c = ann.intersection()
    lo0, sh0 = ann.lengths_mm(spacing)
    prev = None
    for k in range(7):
        lens = [r3[t].lengths_mm(spacing) for t in (-k, k)]
        assert lens[0][0] == pytest.approx(lens[1][0], abs=1e-9)
        if prev is not None:
            assert lens[0][0] <= prev + 1e-9
        prev = lens[0][0]
        for t in (-k, k):
            lo, sh = r3[t].lengths_mm(spacing)
            if lo > 0:
                assert sh / lo == pytest.approx(sh0 / lo0, abs=1e-9)
            assert np.abs(r3[t].intersection() - c).max() < 1e-9 or lo == 0
    e = extent(r3)[1]
    assert all(r3.within_extent(t) for t in range(-e, e + 1))
    assert e == 6 or not r3.within_extent(e + 1)
