"""Shared fixtures: small grids, synthetic sample sets, and random fields."""

import numpy as np
import pytest

from pglode.grid import GridSpec, RainField, ThresholdMap
from pglode.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def spec16() -> GridSpec:
    return GridSpec(height=16, width=16)


@pytest.fixture(scope="session")
def spec32() -> GridSpec:
    return GridSpec(height=32, width=32)


@pytest.fixture(scope="session")
def small_set(spec32):
    """60 days of 32x32 synthetic data; enough for thresholds and training."""
    return generate(SynthConfig(spec=spec32, n_days=60, seed=7))


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_rain(spec: GridSpec, rng: np.random.Generator, day: int = 0) -> RainField:
    return RainField(
        spec=spec,
        values=rng.gamma(2.0, 3.0, size=spec.shape).astype(np.float32),
        day_index=day,
    )


def make_thresholds(spec: GridSpec, value: float = 10.0) -> ThresholdMap:
    return ThresholdMap(
        spec=spec, p95=np.full(spec.shape, value), source_day_count=40
    )
