import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcae_lab.pitch import (PitchTrack, compute_speaker_pitch_stats, group_spread, nccf, nccf_lags, pitch_shift_cents,
                             speed_perturb, track_pitch, volume_perturb)
from fdcae_lab.signal import Waveform

SR = 16000


def sawtooth(f0, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * (2 * ((t * f0) % 1.0) - 1), sr)


def tone(f0, seconds=1.0, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(0.5 * np.sin(2 * np.pi * f0 * t), sr)


def test_nccf_sine():
    x = tone(200).samples[:800]
    assert nccf(x, 80) == pytest.approx(1.0, abs=1e-3)
    assert nccf(x, 40) == pytest.approx(-1.0, abs=1e-3)
    assert nccf(np.zeros(100), 10) == 0.0
    with pytest.raises(ValueError):
        nccf(x, 800)


def test_nccf_noise_is_small():
    hits = 0
    for seed in range(100):
        x = np.random.default_rng(seed).normal(size=800)
        hits += abs(nccf(x, 200)) < 0.3
    assert hits >= 99


def test_nccf_table_matches_direct():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(3, 300))
    frames[1] = 0.0
    table = nccf_lags(frames, 120)
    for r in range(3):
        for lag in (0, 1, 17, 80, 120):
            assert table[r, lag] == pytest.approx(nccf(frames[r], lag), abs=1e-9)


@pytest.mark.parametrize("f0", [120, 200, 220, 320])
def test_tracks_sawtooth(f0):
    tr = track_pitch(sawtooth(f0))
    assert tr.voiced_fraction() >= 0.95
    v = tr.f0[tr.voiced]
    assert np.mean(np.abs(v - f0) <= 3) >= 0.95
    assert tr.median_voiced_f0() == pytest.approx(f0, abs=3)


def test_silence_unvoiced_and_short_input():
    tr = track_pitch(Waveform(np.zeros(SR)))
    assert tr.voiced_fraction() == 0.0 and np.all(tr.f0 == 0)
    assert len(track_pitch(Waveform(np.zeros(100)))) == 0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), f0=st.floats(60, 450))
def test_track_range_invariant(seed, f0):
    rng = np.random.default_rng(seed)
    w = Waveform(0.7 * sawtooth(f0, 0.3).samples + rng.normal(0, 0.05, int(0.3 * SR)))
    tr = track_pitch(w)
    assert np.all((tr.f0 == 0) | ((tr.f0 >= 50) & (tr.f0 <= 500)))
    np.testing.assert_array_equal(tr.voiced, tr.f0 > 0)
    assert np.all(np.isfinite(tr.nccf)) and np.all(np.abs(tr.nccf) <= 1)


@pytest.mark.parametrize("cents", [300, 400, 500])
def test_pitch_shift_ratio_and_duration(cents):
    base = sawtooth(200)
    out = pitch_shift_cents(base, cents)
    ratio = track_pitch(out).median_voiced_f0() / track_pitch(base).median_voiced_f0()
    assert ratio == pytest.approx(2 ** (cents / 1200), abs=0.02)
    assert abs(len(out) - len(base)) / len(base) < 0.01


def test_pitch_shift_200hz_plus_300():
    assert track_pitch(pitch_shift_cents(tone(200), 300)).median_voiced_f0() == pytest.approx(237.8, abs=3)


def test_pitch_shift_keeps_timing_of_content():
    # 0.6 s tone in the middle of 1.2 s of silence: the burst must stay in place
    x = np.zeros(int(1.2 * SR))
    x[int(0.3 * SR):int(0.9 * SR)] = sawtooth(180, 0.6).samples
    out = pitch_shift_cents(Waveform(x), 500).samples
    env = np.flatnonzero(np.abs(out) > 0.05)
    assert abs(env[-1] - int(0.9 * SR)) / len(x) < 0.01
    assert abs(env[0] - int(0.3 * SR)) / len(x) < 0.01


def test_zero_cents_and_round_trip():
    base = sawtooth(180)
    same = pitch_shift_cents(base, 0)
    np.testing.assert_array_equal(same.samples, base.samples)
    back = pitch_shift_cents(pitch_shift_cents(base, 300), -300)
    assert track_pitch(back).median_voiced_f0() == pytest.approx(track_pitch(base).median_voiced_f0(), abs=2)
    with pytest.raises(ValueError):
        pitch_shift_cents(base, 1300)


def test_speed_perturb():
    w = sawtooth(200)
    np.testing.assert_array_equal(speed_perturb(w, 1.0).samples, w.samples)
    fast = speed_perturb(w, 1.1)
    assert abs(len(fast) - SR / 1.1) <= 1
    slow = speed_perturb(w, 0.9)
    assert track_pitch(slow).median_voiced_f0() == pytest.approx(180, abs=3)
    there_and_back = speed_perturb(speed_perturb(w, 1.1), 1 / 1.1)
    assert abs(len(there_and_back) - len(w)) <= 2


def test_volume_perturb():
    np.testing.assert_allclose(volume_perturb(Waveform([0.8]), 0.5).samples, [0.4])
    np.testing.assert_allclose(volume_perturb(Waveform([0.9]), 2.0).samples, [1.0])
    w = sawtooth(100, 0.01)
    np.testing.assert_array_equal(volume_perturb(w, 1.0).samples, w.samples)


def constant_track(f0, n):
    return PitchTrack(np.full(n, float(f0)), np.ones(n), np.ones(n, dtype=bool))


def test_speaker_stats():
    stats = compute_speaker_pitch_stats({"a": [constant_track(200, 50)],
                                         "b": [constant_track(150, 30), constant_track(250, 30)],
                                         "mute": [PitchTrack(np.zeros(5), np.zeros(5), np.zeros(5, dtype=bool))]},
                                        {"a": "x", "b": "x"})
    assert "mute" not in stats
    assert stats["a"].mean_f0 == 200
    edges = stats["a"].bin_edges()
    assert stats["a"].histogram[np.searchsorted(edges, 200, side="right") - 1] == 50
    assert stats["a"].histogram.sum() == 50
    assert stats["b"].mean_f0 == 200
    assert group_spread(stats) == {"x": 0.0}


def test_track_array_round_trip():
    tr = track_pitch(sawtooth(150, 0.2))
    back = PitchTrack.from_array(tr.to_array())
    np.testing.assert_array_equal(back.f0, tr.f0)
    np.testing.assert_array_equal(back.voiced, tr.voiced)
