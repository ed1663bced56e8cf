"""Grid data types, target transforms, climatological thresholds, and tiling.

Everything downstream (data generation, models, verification) shares the
types in this module. Fields are plain numpy arrays wrapped in frozen
dataclasses; all operations are pure functions.

Units: rainfall is mm/day everywhere except inside the loss, which works on
log1p-transformed values. Thresholds are computed and compared in raw mm/day.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

#: Fixed physical-channel order for every predictor stack in the project.
CHANNEL_NAMES = ("tcwv", "cape", "omega500", "u850", "v850", "sp")
CH_TCWV, CH_CAPE, CH_OMEGA, CH_U850, CH_V850, CH_SP = range(6)
N_CHANNELS = len(CHANNEL_NAMES)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the rectangular forecast domain.

    ``lat0``, ``lon0`` and ``cell_deg`` are carried as metadata only; no
    computation in this package uses real geography.
    """

    height: int
    width: int
    lat0: float = 0.0
    lon0: float = 0.0
    cell_deg: float = 0.25

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if not (np.isfinite(self.cell_deg) and self.cell_deg > 0):
            raise ValueError(f"cell_deg must be positive and finite, got {self.cell_deg}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width


def _check_field_array(values: np.ndarray, spec: GridSpec, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape != spec.shape:
        raise ValueError(f"{what} shape {arr.shape} does not match grid {spec.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class RainField:
    """One day of rainfall on a grid, mm/day, all values >= 0 and finite."""

    spec: GridSpec
    values: np.ndarray
    day_index: int

    def __post_init__(self) -> None:
        arr = _check_field_array(self.values, self.spec, "rainfall")
        if np.any(arr < 0):
            raise ValueError("rainfall values must be non-negative")


@dataclass(frozen=True)
class PredictorStack:
    """Six physical predictor channels for one day, shape (6, H, W).

    Channel order is fixed: TCWV, CAPE, omega500, u850, v850, SP.
    Raw stacks require CAPE >= 0 (J/kg semantics); stacks that have been
    z-scored carry ``normalized=True``, which waives that bound.
    """

    spec: GridSpec
    channels: np.ndarray
    day_index: int
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.channels)
        expected = (N_CHANNELS,) + self.spec.shape
        if arr.shape != expected:
            raise ValueError(f"predictor stack shape {arr.shape}, expected {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("predictor stack contains non-finite values")
        if not self.normalized and np.any(arr[CH_CAPE] < 0):
            raise ValueError("CAPE channel must be non-negative in a raw stack")

    def channel(self, name: str) -> np.ndarray:
        return self.channels[CHANNEL_NAMES.index(name)]

    @property
    def cape(self) -> np.ndarray:
        return self.channels[CH_CAPE]

    @property
    def omega500(self) -> np.ndarray:
        return self.channels[CH_OMEGA]


@dataclass(frozen=True)
class ThresholdMap:
    """Per-pixel 95th-percentile rainfall threshold, mm/day."""

    spec: GridSpec
    p95: np.ndarray
    source_day_count: int

    def __post_init__(self) -> None:
        arr = _check_field_array(self.p95, self.spec, "threshold map")
        if np.any(arr < 0):
            raise ValueError("thresholds must be non-negative")
        if self.source_day_count < 20:
            raise ValueError(
                f"need at least 20 source days for a stable percentile, "
                f"got {self.source_day_count}"
            )


@dataclass(frozen=True)
class TileIndex:
    """One tile of a partition: pixel offsets plus extent."""

    row0: int
    col0: int
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.row0 < 0 or self.col0 < 0 or self.rows < 1 or self.cols < 1:
            raise ValueError(f"degenerate tile {self}")


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/stddev computed from the training split only."""

    mean: np.ndarray  # shape (6,)
    std: np.ndarray   # shape (6,), all > 0

    def __post_init__(self) -> None:
        m, s = np.asarray(self.mean, float), np.asarray(self.std, float)
        if m.shape != (N_CHANNELS,) or s.shape != (N_CHANNELS,):
            raise ValueError("norm stats must have one entry per channel")
        if np.any(s <= 0) or not np.all(np.isfinite(m)) or not np.all(np.isfinite(s)):
            raise ValueError("channel stddev must be positive and finite")


# ---------------------------------------------------------------------------
# target transforms


def log1p_transform(field: "RainField | np.ndarray") -> np.ndarray:
    """ln(1 + y) of a rainfall field; monotone, maps 0 to 0.

    Accepts a RainField or a bare array of non-negative finite values.
    """
    values = field.values if isinstance(field, RainField) else np.asarray(field, float)
    if not np.all(np.isfinite(values)):
        raise ValueError("log1p_transform: non-finite input")
    if np.any(values < 0):
        raise ValueError("log1p_transform: negative rainfall")
    return np.log1p(values.astype(float))


def inv_log1p(transformed: np.ndarray) -> np.ndarray:
    """Inverse of :func:`log1p_transform`: exp(x) - 1."""
    arr = np.asarray(transformed, float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("inv_log1p: non-finite input")
    return np.expm1(arr)


# ---------------------------------------------------------------------------
# climatological thresholds


def compute_threshold_map(training_rain: Sequence[RainField]) -> ThresholdMap:
    """Per-pixel 95th percentile over the given training days.

    Percentile rule: sort the n values per pixel, take the fractional rank
    h = 1 + (n-1)*0.95 (one-based), and interpolate linearly between the two
    bracketing order statistics as v_lo + (h - floor(h)) * (v_hi - v_lo).
    The formula is applied literally so results are bit-identical to a
    per-pixel scalar oracle (library percentile routines rearrange the
    interpolation and can differ in the last ulp).
    """
    fields = list(training_rain)
    if len(fields) < 20:
        raise ValueError(f"need >= 20 training days for thresholds, got {len(fields)}")
    spec = fields[0].spec
    for f in fields[1:]:
        if f.spec != spec:
            raise ValueError(f"mixed grid specs in training data: {f.spec} vs {spec}")
    stack = np.stack([f.values for f in fields]).astype(float)
    stack.sort(axis=0)
    rank = (len(fields) - 1) * 0.95
    lo = int(np.floor(rank))
    hi = min(lo + 1, len(fields) - 1)
    frac = rank - lo
    p95 = stack[lo] + frac * (stack[hi] - stack[lo])
    return ThresholdMap(spec=spec, p95=p95, source_day_count=len(fields))


# ---------------------------------------------------------------------------
# tiling


def tile_partition(spec: GridSpec, tile_size: int) -> list[TileIndex]:
    """Row-major list of disjoint tile_size x tile_size tiles.

    Trailing rows/columns that do not fill a whole tile are dropped (padding
    would fabricate zero-rainfall tile maxima); the dropped-pixel count is
    logged as a warning when nonzero.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    if spec.height < tile_size or spec.width < tile_size:
        raise ValueError(
            f"grid {spec.height}x{spec.width} smaller than one {tile_size}px tile"
        )
    n_rows = spec.height // tile_size
    n_cols = spec.width // tile_size
    dropped = spec.n_pixels - n_rows * n_cols * tile_size * tile_size
    if dropped:
        log.warning(
            "tile_partition: grid %dx%d not divisible by %d, dropping %d pixels",
            spec.height, spec.width, tile_size, dropped,
        )
    return [
        TileIndex(row0=r * tile_size, col0=c * tile_size, rows=tile_size, cols=tile_size)
        for r in range(n_rows)
        for c in range(n_cols)
    ]


def dropped_pixel_count(spec: GridSpec, tile_size: int) -> int:
    n_rows = spec.height // tile_size
    n_cols = spec.width // tile_size
    return spec.n_pixels - n_rows * n_cols * tile_size * tile_size


def tile_max(values: np.ndarray, tile: TileIndex) -> float:
    """Maximum of ``values`` over one tile."""
    arr = np.asarray(values)
    if tile.row0 + tile.rows > arr.shape[0] or tile.col0 + tile.cols > arr.shape[1]:
        raise ValueError(f"tile {tile} out of bounds for array {arr.shape}")
    return float(arr[tile.row0:tile.row0 + tile.rows, tile.col0:tile.col0 + tile.cols].max())


def tile_view(values: np.ndarray, tile: TileIndex) -> np.ndarray:
    """Read-only view of one tile's pixels. Bounds are the caller's problem."""
    return values[tile.row0:tile.row0 + tile.rows, tile.col0:tile.col0 + tile.cols]


# ---------------------------------------------------------------------------
# predictor normalization


def compute_norm_stats(stacks: Iterable[PredictorStack]) -> NormStats:
    """Channel-wise mean/stddev over a set of stacks (training split only).

    Population stddev (ddof=0). A constant channel is a degenerate synthetic
    config and is rejected rather than silently producing zeros.
    """
    data = np.stack([s.channels for s in stacks]).astype(float)  # (n, 6, H, W)
    mean = data.mean(axis=(0, 2, 3))
    std = data.std(axis=(0, 2, 3))
    if np.any(std == 0):
        bad = [CHANNEL_NAMES[i] for i in np.nonzero(std == 0)[0]]
        raise ValueError(f"zero stddev channel(s): {', '.join(bad)}")
    return NormStats(mean=mean, std=std)


def normalize_predictors(
    stacks: Sequence[PredictorStack], stats: NormStats
) -> list[PredictorStack]:
    """z-score every channel with the supplied training statistics."""
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]
    return [
        replace(s, channels=(s.channels.astype(float) - mean) / std, normalized=True)
        for s in stacks
    ]
