import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from deformable import data as D


def smooth_images(rng, n, h=28, w=28, sigma=2.0, channels=1):
    """Gaussian-smoothed blobs in [0, 1] with a dark border, digit-like enough for gradient checks."""
    raw = rng.random((n, channels, h, w))
    out = gaussian_filter(raw, sigma=(0, 0, sigma, sigma))
    out -= out.min(axis=(2, 3), keepdims=True)
    out /= out.max(axis=(2, 3), keepdims=True)
    yy, xx = np.mgrid[:h, :w]
    window = np.exp(-(((yy - h / 2) / (h / 3)) ** 2 + ((xx - w / 2) / (w / 3)) ** 2))
    return (out * window).astype(np.float64)


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture(scope="session")
def mnist():
    return D.load_mlxtend_mnist()


@pytest.fixture(scope="session")
def blurred_digits(mnist):
    return gaussian_filter(mnist.images[:64].astype(np.float64), sigma=(0, 0, 1.0, 1.0))


# acceptance verdicts, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
