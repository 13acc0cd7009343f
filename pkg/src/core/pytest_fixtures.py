"""
Pytest Fixtures for recollide

Seeded generators, stream and event factories, small gas configurations and output directories.
"""

from pathlib import Path
from typing import Callable
import logging

import numpy as np
import pytest

from .geom3 import E1, unit
from .lorentz import GasConfig
from .sampling import RngStream, sample_unit_sphere
from .two_scatterer import RecollisionEvent

logger = logging.getLogger(__name__)

TEST_SEED = 20240601


@pytest.fixture
def rng() -> np.random.Generator:
    """Fresh seeded generator per test."""
    return RngStream(seed=TEST_SEED).generator()


@pytest.fixture
def stream_factory() -> Callable[..., RngStream]:
    """
    Factory of independent streams.

    Returns:
        make(index=0, seed=TEST_SEED) -> RngStream
    """

    def make(index: int = 0, seed: int = TEST_SEED) -> RngStream:
        return RngStream(seed=seed).substream(index)

    return make


@pytest.fixture
def make_event() -> Callable[..., RecollisionEvent]:
    """Factory for events from plain sequences; vectors are normalized."""

    def make(u, xi, v, r=1.0) -> RecollisionEvent:
        return RecollisionEvent(u=unit(u), xi=float(xi), v=unit(v), r=float(r))

    return make


@pytest.fixture
def head_on_event() -> RecollisionEvent:
    """u = -e and v = e: the tracer bounces along the x axis between two obstacles."""
    return RecollisionEvent(u=-E1, xi=10.0, v=E1, r=1.0)


@pytest.fixture
def random_events(rng) -> Callable[[int], list]:
    """Factory of random events at r = 1 with xi in [1, 30]."""

    def make(count: int, r: float = 1.0) -> list:
        u = sample_unit_sphere(rng, count)
        v = sample_unit_sphere(rng, count)
        xi = rng.uniform(1.0, 30.0, count)
        return [RecollisionEvent(u=u[i], xi=float(xi[i]), v=v[i], r=r) for i in range(count)]

    return make


@pytest.fixture
def small_gas_config() -> GasConfig:
    """Short-horizon gas configuration for fast tests."""
    return GasConfig(eps=0.1, horizon=30.0, seed=11, n_paths=8)


@pytest.fixture
def plain_gas_config() -> GasConfig:
    """Gas configuration with thinning, mechanics and classifiers disabled."""
    return GasConfig(eps=0.05, horizon=30.0, seed=5, n_paths=6, thinning=False, mechanics=False, classifiers=False)


@pytest.fixture
def output_dir(tmp_path) -> Path:
    """Per-test directory for written artifacts."""
    path = tmp_path / "results"
    path.mkdir()
    return path
