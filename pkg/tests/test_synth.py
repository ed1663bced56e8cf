"""Generator behaviour, planted-burst oracles, and the PGL1 file format."""

import numpy as np
import pytest

from pglode.grid import CH_CAPE, CH_SP, GridSpec
from pglode.ioutil import (
    BadMagicError,
    DimensionMismatchError,
    FormatVersionError,
    TruncatedPayloadError,
)
from pglode.synth import (
    SampleSet,
    SynthConfig,
    generate,
    read_dataset,
    sample_sets_equal,
    split,
    trigger_mask,
    write_dataset,
)


@pytest.fixture(scope="module")
def long_set():
    """240-day 32x32 series for the statistical (climatology) assertions."""
    spec = GridSpec(height=32, width=32, lat0=0.0, lon0=0.0, cell_deg=0.25)
    return generate(SynthConfig(spec=spec, n_days=240, seed=11))


def test_config_validation(spec32):
    with pytest.raises(ValueError, match="ar1_rain"):
        SynthConfig(spec=spec32, ar1_rain=1.0)
    with pytest.raises(ValueError, match="ar1_cape"):
        SynthConfig(spec=spec32, ar1_cape=-0.1)
    with pytest.raises(ValueError, match="n_days"):
        SynthConfig(spec=spec32, n_days=39)
    with pytest.raises(ValueError, match="burst_radius"):
        SynthConfig(spec=spec32, burst_radius=-1)
    with pytest.raises(ValueError, match="noise_scale"):
        SynthConfig(spec=spec32, noise_scale=-0.5)


def test_same_seed_reproduces_bitwise(spec32, small_set):
    again = generate(SynthConfig(spec=spec32, n_days=60, seed=7))
    assert sample_sets_equal(small_set, again)


def test_different_seed_differs(spec32, small_set):
    other = generate(SynthConfig(spec=spec32, n_days=60, seed=8))
    assert not sample_sets_equal(small_set, other)


def test_day_indices_are_contiguous(small_set):
    assert small_set.day_indices() == list(range(60))


def test_bursts_follow_triggers_exactly(spec32, small_set):
    """extreme_truth on day t+1 must equal the joint trigger mask recomputed
    from the emitted (float32) predictor channels of day t."""
    cfg = SynthConfig(spec=spec32, n_days=60, seed=7)
    assert not small_set.extreme_truth[0].any()  # no day before day 0
    for t in range(small_set.n_days - 1):
        mask = trigger_mask(small_set.predictors[t], cfg)
        assert np.array_equal(small_set.extreme_truth[t + 1], mask)


def test_trigger_count_matches_burst_count(spec32, small_set):
    cfg = SynthConfig(spec=spec32, n_days=60, seed=7)
    triggers = sum(
        int(trigger_mask(p, cfg).sum()) for p in small_set.predictors[:-1]
    )
    bursts = int(small_set.extreme_truth.sum())
    assert triggers > 0  # the configuration must actually exercise the path
    assert bursts == triggers


def test_burst_magnitude_at_least_intensity(spec32, small_set):
    cfg = SynthConfig(spec=spec32, n_days=60, seed=7)
    for t in range(small_set.n_days):
        mask = small_set.extreme_truth[t]
        if mask.any():
            assert (small_set.targets[t].values[mask] >= cfg.burst_intensity).all()


def test_burst_radius_dilates_with_reflection(spec32):
    """radius-1 truth must equal an independent Chebyshev dilation (with
    mirrored edges) of the radius-0 truth from the same seed."""
    base = generate(SynthConfig(spec=spec32, n_days=60, seed=7, burst_radius=0))
    wide = generate(SynthConfig(spec=spec32, n_days=60, seed=7, burst_radius=1))
    for t in range(60):
        m = base.extreme_truth[t]
        p = np.pad(m, 1, mode="symmetric")
        expected = np.zeros_like(m)
        for dr in (0, 1, 2):
            for dc in (0, 1, 2):
                expected |= p[dr:dr + 32, dc:dc + 32]
        assert np.array_equal(wide.extreme_truth[t], expected)


def test_zero_noise_rain_decays_geometrically(spec32):
    """With rain innovations off and triggers unreachable, consecutive
    first differences of any pixel's rainfall shrink by exactly ar1_rain
    (the stationary row offset cancels in the differences)."""
    cfg = SynthConfig(
        spec=spec32, n_days=40, seed=3, noise_scale=0.0,
        cape_trigger=1e9, omega_trigger=-1e9,
    )
    sset = generate(cfg)
    assert not sset.extreme_truth.any()
    v = np.stack([t.values for t in sset.targets]).astype(float)
    for d in range(6):
        num = v[d + 1] - v[d + 2]
        den = v[d] - v[d + 1]
        assert (np.abs(den) > 1e-6).all()
        assert np.allclose(num / den, cfg.ar1_rain, rtol=1e-4)


def test_rain_lag1_autocorrelation_tracks_ar1(long_set):
    series = np.array([float(t.values.mean()) for t in long_set.targets])
    r = np.corrcoef(series[:-1], series[1:])[0, 1]
    assert abs(r - 0.62) <= 0.1  # default ar1_rain


def test_row_banding_in_climatology(long_set):
    """Crest rows (band phase +1, row 8 of each 32-row period) must be
    unstable, high-pressure and wet relative to trough rows (row 24)."""
    crest, trough = 8, 24
    cape = np.stack([p.cape for p in long_set.predictors]).mean(axis=0)
    sp = np.stack([p.channels[CH_SP] for p in long_set.predictors]).mean(axis=0)
    rain = np.stack([t.values for t in long_set.targets]).mean(axis=0)
    assert cape[crest].mean() - cape[trough].mean() > 50.0
    assert sp[crest].mean() - sp[trough].mean() > 500.0
    assert rain[crest].mean() - rain[trough].mean() > 2.0


def test_trough_rows_trigger_less_often(long_set):
    cfg = SynthConfig(spec=long_set.spec, n_days=240, seed=11)
    masks = np.stack([trigger_mask(p, cfg) for p in long_set.predictors])
    by_row = masks.mean(axis=(0, 2))
    assert by_row[4:13].mean() > by_row[20:29].mean()


# ---------------------------------------------------------------------------
# splitting


def test_split_chronological(small_set):
    train, evals = split(small_set, 0.8)
    assert train.n_days == 48 and evals.n_days == 12
    assert train.day_indices() == list(range(48))
    assert evals.day_indices() == list(range(48, 60))
    assert max(train.day_indices()) < min(evals.day_indices())
    assert np.array_equal(
        np.concatenate([train.extreme_truth, evals.extreme_truth]),
        small_set.extreme_truth,
    )


def test_split_rejects_bad_fractions(small_set):
    for frac in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError, match="train_frac"):
            split(small_set, frac)


def test_split_rejects_starved_side(small_set):
    with pytest.raises(ValueError, match="fewer than 10"):
        split(small_set, 0.05)
    with pytest.raises(ValueError, match="fewer than 10"):
        split(small_set, 0.99)


# ---------------------------------------------------------------------------
# PGL1 file format


def test_round_trip_equal_and_byte_identical(tmp_path, small_set):
    p1 = tmp_path / "a.pgl1"
    p2 = tmp_path / "b.pgl1"
    write_dataset(small_set, p1)
    back = read_dataset(p1)
    assert sample_sets_equal(small_set, back)
    write_dataset(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_preserves_float32_exactly(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    back = read_dataset(path)
    for a, b in zip(small_set.predictors, back.predictors):
        assert a.channels.dtype == b.channels.dtype == np.float32
        assert np.array_equal(a.channels, b.channels)


def test_bad_magic(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_dataset(path)


def test_version_mismatch(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatVersionError):
        read_dataset(path)


def test_truncated_payload(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedPayloadError):
        read_dataset(path)


def test_truncated_header(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(TruncatedPayloadError):
        read_dataset(path)


def test_trailing_garbage_rejected(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    with open(path, "ab") as fh:
        fh.write(b"\x00")
    with pytest.raises(DimensionMismatchError):
        read_dataset(path)


def test_wrong_channel_count_rejected(tmp_path, small_set):
    path = tmp_path / "d.pgl1"
    write_dataset(small_set, path)
    raw = bytearray(path.read_bytes())
    # channel count u16 sits after magic(4) version(2) dims(8) geo(24)
    raw[38:40] = (5).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DimensionMismatchError, match="channels"):
        read_dataset(path)


def test_sample_set_alignment_enforced(small_set):
    with pytest.raises(ValueError, match="length mismatch"):
        SampleSet(
            predictors=small_set.predictors[:-1],
            targets=small_set.targets,
            extreme_truth=small_set.extreme_truth,
        )
    with pytest.raises(ValueError, match="extreme_truth shape"):
        SampleSet(
            predictors=small_set.predictors,
            targets=small_set.targets,
            extreme_truth=small_set.extreme_truth[:-1],
        )
