"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Property tests run numerics (eigendecompositions, golden-section searches),
# so wall-clock deadlines only produce flaky timeouts on loaded machines.
settings.register_profile(
    "numeric",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("numeric")


def random_psd(n: int, rng: np.random.Generator, rank: int = None) -> np.ndarray:
    """Random symmetric PSD matrix with controllable rank."""
    r = rank or n
    B = rng.standard_normal((n, r))
    A = B @ B.T / r
    return (A + A.T) / 2.0


def make_groups(n: int, rng: np.random.Generator, p1: int = 2, p2: int = 2,
                scale: float = 1.0) -> dict:
    return {
        "z1": scale * rng.standard_normal((n, p1)),
        "z2": scale * rng.standard_normal((n, p2)),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20250817)
