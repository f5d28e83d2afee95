import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def textured(rng):
    """64x64 cover: flat left half, noisy right half."""
    img = np.full((64, 64), 120.0)
    img[:, 32:] += rng.normal(0, 25, (64, 32))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
