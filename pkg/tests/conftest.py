import numpy as np
import pytest

from magrev.signals import ArrayGeometry, CoilParams, NoiseProfile


def tone(freq_hz: float, fs: float, n: int, amp: float = 1.0, phase: float = 0.0):
    t = np.arange(n) / fs
    return amp * np.sin(2.0 * np.pi * freq_hz * t + phase)


@pytest.fixture
def quad_geometry():
    """Four sensors on a line, the arrangement used throughout the docs."""
    return ArrayGeometry(
        sensor_positions_cm=[(-12.0, 0.0), (-4.0, 0.0), (4.0, 0.0), (12.0, 0.0)]
    )


@pytest.fixture
def silence():
    return NoiseProfile(mains_components=(), broadband_sigma=0.0, shared_fraction=0.0)


@pytest.fixture
def coil():
    return CoilParams()
