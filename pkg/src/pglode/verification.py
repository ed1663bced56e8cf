"""Two-tier categorical verification: pixel-level and tile-level skill.

Pixel tier: deterministic comparison of the intensity head (converted back
to raw mm) against the per-pixel threshold; predicted events use >=, observed
events use strict >. Tile tier: a tile's forecast probability is the maximum
pixel exceedance probability inside it, an observed tile event means some
pixel strictly exceeds its own threshold, and a hit needs probability > 0.5
on an event tile.

Contingency counts are pooled over all evaluation days before scores are
computed; per-day scores of rare events are mostly undefined and averaging
them is misleading. A zero denominator yields an explicit undefined marker
(rendered as an em dash in CSV), never NaN.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import RainField, ThresholdMap, TileIndex, inv_log1p, tile_view
from .models import Forecast

#: Rendered form of an undefined (0/0) score.
UNDEFINED_MARK = "—"

#: Tile forecast probability above this counts as a predicted event.
TILE_PROB_THRESHOLD = 0.5


@dataclass(frozen=True)
class ContingencyCounts:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0

    def __post_init__(self) -> None:
        if min(self.hits, self.misses, self.false_alarms, self.correct_negatives) < 0:
            raise ValueError(f"negative contingency count: {self}")

    def __add__(self, other: "ContingencyCounts") -> "ContingencyCounts":
        return ContingencyCounts(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.correct_negatives + other.correct_negatives,
        )

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives


def pod(c: ContingencyCounts) -> float | None:
    """Probability of detection, H/(H+M); None when no events were observed."""
    denom = c.hits + c.misses
    return c.hits / denom if denom else None


def far(c: ContingencyCounts) -> float | None:
    """False alarm ratio, F/(H+F); None when nothing was predicted."""
    denom = c.hits + c.false_alarms
    return c.false_alarms / denom if denom else None


def csi(c: ContingencyCounts) -> float | None:
    """Critical success index, H/(H+M+F); ignores correct negatives."""
    denom = c.hits + c.misses + c.false_alarms
    return c.hits / denom if denom else None


@dataclass(frozen=True)
class SkillScores:
    pod: float | None
    far: float | None
    csi: float | None

    @classmethod
    def from_counts(cls, c: ContingencyCounts) -> "SkillScores":
        return cls(pod=pod(c), far=far(c), csi=csi(c))


# ---------------------------------------------------------------------------
# contingency builders


def pixel_contingency(
    forecast: Forecast, obs: RainField, thr: ThresholdMap
) -> ContingencyCounts:
    """Per-pixel event classification for one day."""
    if forecast.log_intensity.shape != obs.spec.shape:
        raise ValueError(
            f"forecast shape {forecast.log_intensity.shape} vs grid {obs.spec.shape}"
        )
    if obs.spec.shape != thr.spec.shape:
        raise ValueError(f"grid mismatch: obs {obs.spec.shape} vs thr {thr.spec.shape}")
    with np.errstate(over="ignore"):
        predicted = inv_log1p(forecast.log_intensity) >= thr.p95
    observed = obs.values > thr.p95
    return ContingencyCounts(
        hits=int(np.sum(predicted & observed)),
        misses=int(np.sum(~predicted & observed)),
        false_alarms=int(np.sum(predicted & ~observed)),
        correct_negatives=int(np.sum(~predicted & ~observed)),
    )


def tile_contingency(
    forecast: Forecast,
    obs: RainField,
    thr: ThresholdMap,
    tiles: Sequence[TileIndex],
) -> ContingencyCounts:
    """Tile-level event classification for one day."""
    if obs.spec.shape != thr.spec.shape:
        raise ValueError(f"grid mismatch: obs {obs.spec.shape} vs thr {thr.spec.shape}")
    h, w = obs.spec.shape
    hits = misses = false_alarms = correct_negatives = 0
    exceeded = obs.values > thr.p95
    for tile in tiles:
        if tile.row0 + tile.rows > h or tile.col0 + tile.cols > w:
            raise ValueError(f"tile {tile} out of bounds for grid {obs.spec.shape}")
        prob = tile_view(forecast.exceed_prob, tile).max()
        event = bool(tile_view(exceeded, tile).any())
        predicted = prob > TILE_PROB_THRESHOLD
        if predicted and event:
            hits += 1
        elif predicted:
            false_alarms += 1
        elif event:
            misses += 1
        else:
            correct_negatives += 1
    return ContingencyCounts(hits, misses, false_alarms, correct_negatives)


# ---------------------------------------------------------------------------
# pooled evaluation and report serialization


@dataclass(frozen=True)
class ReportRow:
    model: str
    tier: str  # "pixel" or "tile"
    scores: SkillScores
    counts: ContingencyCounts


def evaluate_model(
    model_name: str,
    forecasts: Sequence[Forecast],
    observations: Sequence[RainField],
    thr: ThresholdMap,
    tiles: Sequence[TileIndex],
) -> list[ReportRow]:
    """Pool per-day counts over the whole eval split, one row per tier."""
    if len(forecasts) == 0:
        raise ValueError("empty eval split")
    if len(forecasts) != len(observations):
        raise ValueError(
            f"{len(forecasts)} forecasts vs {len(observations)} observations"
        )
    pixel = ContingencyCounts()
    tile = ContingencyCounts()
    for fc, obs in zip(forecasts, observations):
        pixel = pixel + pixel_contingency(fc, obs, thr)
        tile = tile + tile_contingency(fc, obs, thr, tiles)
    return [
        ReportRow(model_name, "pixel", SkillScores.from_counts(pixel), pixel),
        ReportRow(model_name, "tile", SkillScores.from_counts(tile), tile),
    ]


def _fmt(score: float | None) -> str:
    return UNDEFINED_MARK if score is None else f"{score:.3f}"


REPORT_HEADER = "model,tier,pod,far,csi,hits,misses,false_alarms,correct_negatives"


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    lines = [REPORT_HEADER]
    for r in rows:
        c = r.counts
        lines.append(
            f"{r.model},{r.tier},{_fmt(r.scores.pod)},{_fmt(r.scores.far)},"
            f"{_fmt(r.scores.csi)},{c.hits},{c.misses},{c.false_alarms},"
            f"{c.correct_negatives}"
        )
    return "\n".join(lines) + "\n"


def write_report_csv(rows: Sequence[ReportRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))


def read_report_csv(path) -> list[ReportRow]:
    """Parse a report written by :func:`write_report_csv`."""

    def score(cell: str) -> float | None:
        return None if cell == UNDEFINED_MARK else float(cell)

    rows: list[ReportRow] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            counts = ContingencyCounts(
                int(rec["hits"]), int(rec["misses"]),
                int(rec["false_alarms"]), int(rec["correct_negatives"]),
            )
            rows.append(ReportRow(
                model=rec["model"], tier=rec["tier"],
                scores=SkillScores(score(rec["pod"]), score(rec["far"]),
                                   score(rec["csi"])),
                counts=counts,
            ))
    return rows
