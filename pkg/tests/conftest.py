"""Shared fixtures for the kinlayer test suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kinlayer.geometry import ConvexBoundary

settings.register_profile(
    "suite",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def disk():
    return ConvexBoundary(cosine_coefficients=(1.0,))


@pytest.fixture(scope="session")
def perturbed():
    return ConvexBoundary(cosine_coefficients=(1.0, 0.0, 0.1))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260815)
