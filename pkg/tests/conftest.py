import numpy as np
import pytest

from gradreg import DisplacementField, Volume3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_volume(rng, dims, sigma=1.0):
    from scipy import ndimage

    return Volume3(ndimage.gaussian_filter(rng.standard_normal(dims), sigma))


def random_field(rng, dims, scale=0.7):
    # offsets keep samples away from integer voxel positions, where trilinear
    # interpolation has kinks that break finite differences
    u = rng.uniform(-scale, scale, tuple(dims) + (3,))
    u = np.round(u * 4) / 4 + 0.137
    return DisplacementField(u.astype(np.float64))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
