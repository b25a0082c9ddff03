import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from repeatdenoise.phantom import PhantomSpec, generate_clean
from repeatdenoise.volume import Volume3D

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("repo")

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    """48 x 48 x 16 layered phantom with isotropic-ish spacing, for quick registration tests."""
    return generate_clean(PhantomSpec(dims=(48, 48, 16), spacing=(1.0, 1.0, 2.0), vessel_count=8, seed=3))


def smooth_random_volume(shape, sigma, seed, spacing=(1.0, 1.0, 1.0)):
    from scipy import ndimage

    a = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal(shape), sigma)
    a = (a - a.min()) / (a.max() - a.min())
    return Volume3D(a, spacing)
