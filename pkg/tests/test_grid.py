"""Grid types, transforms, percentile thresholds, tiling, normalization."""

import math

import numpy as np
import pytest

from pglode.grid import (
    CHANNEL_NAMES,
    GridSpec,
    NormStats,
    PredictorStack,
    RainField,
    ThresholdMap,
    compute_norm_stats,
    compute_threshold_map,
    dropped_pixel_count,
    inv_log1p,
    log1p_transform,
    normalize_predictors,
    tile_max,
    tile_partition,
    tile_view,
)

from conftest import make_rain


def sort_percentile_oracle(series: np.ndarray, q: float) -> float:
    """Rank-and-interpolate percentile, written independently of numpy's.

    Rule under test: one-based fractional rank h = 1 + (n-1) * q/100, then
    v_lo + (h - floor(h)) * (v_hi - v_lo) between bracketing order statistics.
    """
    x = sorted(float(v) for v in series)
    n = len(x)
    h = 1.0 + (n - 1) * (q / 100.0)
    lo = int(math.floor(h))
    if lo >= n:
        return x[-1]
    frac = h - lo
    return x[lo - 1] + frac * (x[lo] - x[lo - 1])


# ---------------------------------------------------------------------------
# basic types


def test_grid_spec_rejects_degenerate_sizes():
    with pytest.raises(ValueError):
        GridSpec(height=0, width=4)
    with pytest.raises(ValueError):
        GridSpec(height=4, width=4, cell_deg=0.0)


def test_rain_field_validation(spec16, rng):
    ok = make_rain(spec16, rng)
    assert ok.values.shape == spec16.shape
    with pytest.raises(ValueError):
        RainField(spec=spec16, values=-np.ones(spec16.shape), day_index=0)
    with pytest.raises(ValueError):
        RainField(spec=spec16, values=np.full(spec16.shape, np.nan), day_index=0)
    with pytest.raises(ValueError):
        RainField(spec=spec16, values=np.ones((4, 4)), day_index=0)


def test_predictor_stack_validation(spec16, rng):
    good = rng.standard_normal((6, 16, 16)) + 10.0
    PredictorStack(spec=spec16, channels=good, day_index=0)
    bad_cape = good.copy()
    bad_cape[CHANNEL_NAMES.index("cape")] = -1.0
    with pytest.raises(ValueError):
        PredictorStack(spec=spec16, channels=bad_cape, day_index=0)
    # normalized stacks may carry negative cape values
    PredictorStack(spec=spec16, channels=bad_cape, day_index=0, normalized=True)
    with pytest.raises(ValueError):
        PredictorStack(spec=spec16, channels=good[:5], day_index=0)


def test_threshold_map_needs_enough_days(spec16):
    with pytest.raises(ValueError):
        ThresholdMap(spec=spec16, p95=np.ones(spec16.shape), source_day_count=5)


# ---------------------------------------------------------------------------
# transforms


def test_log1p_round_trip(rng):
    y = rng.gamma(2.0, 5.0, size=(8, 8))
    back = inv_log1p(log1p_transform(y))
    assert np.allclose(back, y, rtol=1e-12, atol=1e-12)


def test_log1p_maps_zero_to_zero():
    assert log1p_transform(np.zeros((3, 3))).sum() == 0.0


def test_log1p_rejects_negative_and_nonfinite():
    with pytest.raises(ValueError):
        log1p_transform(np.array([-0.5]))
    with pytest.raises(ValueError):
        log1p_transform(np.array([np.inf]))
    with pytest.raises(ValueError):
        inv_log1p(np.array([np.nan]))


# ---------------------------------------------------------------------------
# thresholds


def test_threshold_map_matches_sort_oracle(spec16, rng):
    days = [make_rain(spec16, rng, day=d) for d in range(50)]
    thr = compute_threshold_map(days)
    stack = np.stack([f.values for f in days]).astype(float)
    for _ in range(50):
        i = rng.integers(0, spec16.height)
        j = rng.integers(0, spec16.width)
        assert thr.p95[i, j] == sort_percentile_oracle(stack[:, i, j], 95.0)


def test_threshold_known_series_value():
    spec = GridSpec(height=1, width=1)
    days = [
        RainField(spec=spec, values=np.array([[float(v)]]), day_index=v - 1)
        for v in range(1, 101)
    ]
    thr = compute_threshold_map(days)
    assert thr.p95[0, 0] == pytest.approx(95.05, abs=1e-12)
    assert thr.source_day_count == 100


def test_threshold_rejects_short_or_mixed_input(spec16, spec32, rng):
    days16 = [make_rain(spec16, rng, day=d) for d in range(19)]
    with pytest.raises(ValueError):
        compute_threshold_map(days16)
    mixed = [make_rain(spec16, rng, day=d) for d in range(20)]
    mixed[7] = make_rain(spec32, rng, day=7)
    with pytest.raises(ValueError):
        compute_threshold_map(mixed)


# ---------------------------------------------------------------------------
# tiling


def test_tile_partition_covers_grid_disjointly():
    spec = GridSpec(height=64, width=96)
    tiles = tile_partition(spec, 32)
    assert len(tiles) == 2 * 3
    seen = np.zeros(spec.shape, dtype=int)
    for t in tiles:
        seen[t.row0:t.row0 + t.rows, t.col0:t.col0 + t.cols] += 1
    assert np.all(seen == 1)


def test_tile_partition_drops_remainder():
    spec = GridSpec(height=70, width=64)
    tiles = tile_partition(spec, 32)
    assert len(tiles) == 2 * 2
    assert dropped_pixel_count(spec, 32) == 70 * 64 - 4 * 32 * 32


def test_tile_partition_rejects_too_small_grid():
    with pytest.raises(ValueError):
        tile_partition(GridSpec(height=16, width=16), 32)


def test_tile_max_and_view(rng):
    arr = rng.standard_normal((8, 8))
    tiles = tile_partition(GridSpec(height=8, width=8), 4)
    for t in tiles:
        block = arr[t.row0:t.row0 + 4, t.col0:t.col0 + 4]
        assert tile_max(arr, t) == block.max()
        assert np.array_equal(tile_view(arr, t), block)


# ---------------------------------------------------------------------------
# normalization


def test_norm_stats_and_normalize(small_set):
    stats = compute_norm_stats(small_set.predictors)
    normed = normalize_predictors(small_set.predictors, stats)
    data = np.stack([s.channels for s in normed])
    assert np.allclose(data.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    assert np.allclose(data.std(axis=(0, 2, 3)), 1.0, atol=1e-9)
    assert all(s.normalized for s in normed)


def test_norm_stats_rejects_constant_channel(spec16):
    stacks = [
        PredictorStack(
            spec=spec16, channels=np.ones((6, 16, 16)) * (d + 1), day_index=d
        )
        for d in range(5)
    ]
    # every channel constant across space but varying across days is fine
    compute_norm_stats(stacks)
    same = [
        PredictorStack(spec=spec16, channels=np.ones((6, 16, 16)), day_index=d)
        for d in range(5)
    ]
    with pytest.raises(ValueError, match="zero stddev"):
        compute_norm_stats(same)


def test_norm_stats_shape_validation():
    with pytest.raises(ValueError):
        NormStats(mean=np.zeros(5), std=np.ones(5))
    with pytest.raises(ValueError):
        NormStats(mean=np.zeros(6), std=np.zeros(6))
