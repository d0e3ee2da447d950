import numpy as np
import pytest

from recistseg.harness import PhantomSpec, phantom_lesion
from recistseg.volume_io import RecistAnnotation


@pytest.fixture(scope="session")
def small_lesion():
    """A single blurred ellipsoid lesion in a 64x64x20 grid."""
    spec = PhantomSpec(semi_axes_mm=(10.0, 7.0, 8.0), falloff=0.3, blur_px=0.8, noise_std=0.04,
                       dims=(64, 64, 20), spacing_mm=(1.0, 1.0, 2.0), seed=11, lesion_id="F0", patient_id="PF")
    return phantom_lesion(spec)


@pytest.fixture
def cross():
    """Axis-aligned cross: long 20 px horizontal, short 10 px vertical, centred at (30, 30)."""
    return RecistAnnotation(5, ((20.0, 30.0), (40.0, 30.0)), ((30.0, 25.0), (30.0, 35.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def record(key: str, ok: bool, detail: str):
        _ACCEPTANCE[key] = f"criterion {key:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[key])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
            terminalreporter.write_line(_ACCEPTANCE[key])
