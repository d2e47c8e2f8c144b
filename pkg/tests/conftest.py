"""Shared fixtures and helpers."""
import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_random_field(rng, dims, sigma=2.0, max_mag=2.0):
    """Gaussian-smoothed random vectors scaled to a given peak magnitude."""
    from scipy.ndimage import gaussian_filter

    raw = rng.standard_normal(tuple(dims) + (3,))
    sm = np.stack([gaussian_filter(raw[..., k], sigma) for k in range(3)], axis=-1)
    peak = np.sqrt((sm ** 2).sum(-1)).max()
    return sm * (max_mag / peak)


def ball(dims, center, radius):
    g = np.indices(dims).astype(float)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    return ((g - c) ** 2).sum(0) <= radius ** 2


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
