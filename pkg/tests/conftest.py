import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("estn", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("estn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(h, w, phase=0.0):
    """Deterministic colourful test image in [0, 1], shape [3, h, w]."""
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    return np.stack([0.5 + 0.4 * np.sin(6 * x + 3 * y + phase),
                     0.5 + 0.4 * np.cos(5 * y - phase),
                     0.5 + 0.3 * np.sin(12 * x * y + phase)]).astype(np.float32)
