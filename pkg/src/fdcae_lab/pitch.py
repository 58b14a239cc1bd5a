"""NCCF pitch tracking and prosodic augmentation (pitch shift, speed, volume)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import butter, resample_poly, sosfiltfilt

from .signal import Waveform, num_frames

log = logging.getLogger(__name__)

F0_MIN = 50.0
F0_MAX = 500.0
NCCF_EPS = 1e-12
HIST_BIN_HZ = 25.0


@dataclass
class PitchTrack:
    """Per 10 ms frame: f0 in Hz (0 when unvoiced), NCCF value, voicing flag."""

    f0: np.ndarray
    nccf: np.ndarray
    voiced: np.ndarray
    frame_shift_ms: float = 10.0

    def __len__(self):
        return len(self.f0)

    def to_array(self) -> np.ndarray:
        return np.stack([self.f0, self.nccf, self.voiced.astype(np.float64)], axis=1)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "PitchTrack":
        a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
        return cls(a[:, 0].copy(), a[:, 1].copy(), a[:, 2] > 0.5)

    @classmethod
    def empty(cls) -> "PitchTrack":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))

    def median_voiced_f0(self) -> float:
        v = self.f0[self.voiced]
        return float(np.median(v)) if len(v) else 0.0

    def voiced_fraction(self) -> float:
        return float(np.mean(self.voiced)) if len(self) else 0.0


@dataclass
class TrackerConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    min_f0: float = F0_MIN
    max_f0: float = F0_MAX
    voicing_threshold: float = 0.5
    smoothing: float = 5.0  # weight on |log f0(t) - log f0(t-1)|
    lag_weight: float = 0.1  # mild preference for short lags, suppresses octave drops
    peak_floor: float = 0.1
    max_candidates: int = 6
    lowpass_hz: float = 1000.0


def nccf(frame, lag: int) -> float:
    x = np.asarray(frame, dtype=np.float64)
    if not 0 <= lag < len(x):
        raise ValueError(f"lag {lag} outside [0, {len(x)})")
    a, b = x[: len(x) - lag], x[lag:]
    e1, e2 = float(a @ a), float(b @ b)
    if e1 == 0.0 or e2 == 0.0:
        return 0.0
    return float(np.clip((a @ b) / np.sqrt(e1 * e2 + NCCF_EPS), -1.0, 1.0))


def nccf_lags(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """NCCF of every row of ``frames`` at lags 0..max_lag, same definition as :func:`nccf`."""
    frames = np.atleast_2d(frames)
    L = frames.shape[1]
    nfft = 1
    while nfft < 2 * L:
        nfft *= 2
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, nfft, axis=1)[:, : max_lag + 1]
    sq = frames**2
    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    e_head = csum[:, L - lags]  # sum of x[0 .. L-1-lag]^2
    e_tail = csum[:, L:L + 1] - csum[:, lags]  # sum of x[lag .. L-1]^2
    denom = np.sqrt(np.maximum(e_head * e_tail, 0.0) + NCCF_EPS)
    out = np.where((e_head > 0) & (e_tail > 0), acf / denom, 0.0)
    return np.clip(out, -1.0, 1.0)


def _analysis_frames(x: np.ndarray, sr: int, cfg: TrackerConfig):
    window = int(round(sr * cfg.frame_length_ms / 1000))
    shift = int(round(sr * cfg.frame_shift_ms / 1000))
    max_lag = int(np.floor(sr / cfg.min_f0))
    T = num_frames(len(x), window, shift)
    length = window + max_lag
    centers = shift * np.arange(T) + window // 2
    starts = centers - length // 2
    pad = length
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    idx = (starts + pad)[:, None] + np.arange(length)[None, :]
    return xp[idx], max_lag


def _candidates(row: np.ndarray, sr: int, cfg: TrackerConfig):
    """Local NCCF maxima in the search range, refined by parabolic interpolation."""
    lo = int(np.ceil(sr / cfg.max_f0))
    hi = int(np.floor(sr / cfg.min_f0))
    seg = row[lo - 1:hi + 2]
    inner = seg[1:-1]
    peaks = np.flatnonzero((inner >= seg[:-2]) & (inner > seg[2:]) & (inner > cfg.peak_floor))
    out = []
    for p in peaks:
        lag = lo + p
        y0, y1, y2 = row[lag - 1], row[lag], row[lag + 1]
        curv = y0 - 2 * y1 + y2
        delta = 0.5 * (y0 - y2) / curv if curv < 0 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
        peak = min(1.0, y1 - 0.25 * (y0 - y2) * delta)
        f0 = sr / (lag + delta)
        if cfg.min_f0 <= f0 <= cfg.max_f0:
            out.append((f0, peak, lag + delta))
    max_lag = hi
    out.sort(key=lambda c: (1 - c[1]) + cfg.lag_weight * c[2] / max_lag)
    return out[: cfg.max_candidates], max_lag


def track_pitch(w: Waveform, cfg: TrackerConfig | None = None) -> PitchTrack:
    cfg = cfg or TrackerConfig()
    sr = w.sample_rate
    window = int(round(sr * cfg.frame_length_ms / 1000))
    if len(w) < window:
        return PitchTrack.empty()
    x = w.samples
    if cfg.lowpass_hz and cfg.lowpass_hz < sr / 2:
        x = sosfiltfilt(butter(4, cfg.lowpass_hz, fs=sr, output="sos"), x)
    frames, max_lag = _analysis_frames(x, sr, cfg)
    table = nccf_lags(frames, max_lag + 1)
    T = len(frames)
    K = cfg.max_candidates
    f0s = np.full((T, K), np.nan)
    vals = np.zeros((T, K))
    cost = np.full((T, K), np.inf)
    best_nccf = np.zeros(T)
    lo = int(np.ceil(sr / cfg.max_f0))
    for t in range(T):
        best_nccf[t] = table[t, lo:max_lag + 1].max()
        cands, hi = _candidates(table[t], sr, cfg)
        if not cands:
            cost[t, 0] = 1.0
            vals[t, 0] = best_nccf[t]
            continue
        for k, (f0, val, lag) in enumerate(cands):
            f0s[t, k] = f0
            vals[t, k] = val
            cost[t, k] = (1.0 - val) + cfg.lag_weight * lag / hi
    gate = vals >= cfg.voicing_threshold
    logf = np.log(np.where(np.isnan(f0s), 1.0, f0s))
    # Viterbi over candidates; the continuity term only links two voiced candidates.
    acc = cost[0].copy()
    back = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        trans = cfg.smoothing * np.abs(logf[t - 1][:, None] - logf[t][None, :])
        trans = np.where(gate[t - 1][:, None] & gate[t][None, :], trans, 0.0)
        total = acc[:, None] + trans
        back[t] = np.argmin(total, axis=0)
        acc = total[back[t], np.arange(K)] + cost[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmin(acc))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    rows = np.arange(T)
    chosen_f0 = f0s[rows, path]
    chosen_val = vals[rows, path]
    voiced = (chosen_val >= cfg.voicing_threshold) & ~np.isnan(chosen_f0)
    f0 = np.where(voiced, chosen_f0, 0.0)
    nccf_out = np.where(np.isnan(chosen_f0), best_nccf, chosen_val)
    return PitchTrack(f0, np.clip(nccf_out, -1.0, 1.0), voiced, cfg.frame_shift_ms)


def _rational(x: float, max_den: int = 400) -> Fraction:
    return Fraction(x).limit_denominator(max_den)


def resample_ratio(x: np.ndarray, factor: float) -> np.ndarray:
    """Play ``x`` ``factor`` times faster: length / factor, all frequencies * factor."""
    q = _rational(factor)
    return resample_poly(x, q.denominator, q.numerator)


def wsola(x: np.ndarray, stretch: float, sr: int, segment_ms: float = 20.0,
          tolerance_ms: float = 5.0) -> np.ndarray:
    """Time-stretch by ``stretch`` (output length ~ stretch * input) without changing pitch."""
    n = int(round(sr * segment_ms / 1000))
    hop = n // 2
    tol = int(round(sr * tolerance_ms / 1000))
    out_len = int(round(len(x) * stretch))
    if out_len == 0 or len(x) == 0:
        return np.zeros(out_len)
    win = np.hanning(n + 1)[:n]
    pad = n + tol
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + n + int(np.ceil(hop / stretch)) + 1)])
    n_frames = out_len // hop + 2
    y = np.zeros(n_frames * hop + n)
    wsum = np.zeros_like(y)
    prev = None
    for k in range(n_frames):
        nominal = pad + int(round(k * hop / stretch)) - n // 2
        if prev is None:
            pos = nominal
        else:
            template = xp[prev + hop:prev + hop + n]
            lo = max(nominal - tol, 0)
            hi = min(nominal + tol, len(xp) - n)
            region = xp[lo:hi + n]
            scores = np.correlate(region, template, mode="valid")
            pos = lo + int(np.argmax(scores)) if np.any(scores) else nominal
        y[k * hop:k * hop + n] += xp[pos:pos + n] * win
        wsum[k * hop:k * hop + n] += win
        prev = pos
    y = y / np.maximum(wsum, 1e-3)
    start = n // 2
    return y[start:start + out_len]


def pitch_shift_cents(w: Waveform, cents: int) -> Waveform:
    if not -1200 <= cents <= 1200:
        raise ValueError(f"cents must lie in [-1200, 1200], got {cents}")
    if cents == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = 2.0 ** (cents / 1200.0)
    raised = resample_ratio(w.samples, ratio)
    stretched = wsola(raised, len(w) / max(len(raised), 1), w.sample_rate)
    out = np.zeros(len(w))
    out[: min(len(w), len(stretched))] = stretched[: len(w)]
    return Waveform(np.clip(out, -1.0, 1.0), w.sample_rate)


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(np.clip(resample_ratio(w.samples, factor), -1.0, 1.0), w.sample_rate)


def volume_perturb(w: Waveform, gain: float) -> Waveform:
    return Waveform(np.clip(w.samples * gain, -1.0, 1.0), w.sample_rate)


@dataclass
class SpeakerPitchStats:
    speaker: str
    mean_f0: float
    histogram: np.ndarray  # voiced-frame counts per 25 Hz bin
    num_voiced: int
    group: str = ""

    @staticmethod
    def bin_edges() -> np.ndarray:
        return np.arange(F0_MIN, F0_MAX + HIST_BIN_HZ, HIST_BIN_HZ)

    def support_width(self) -> float:
        nz = np.flatnonzero(self.histogram)
        if not len(nz):
            return 0.0
        return float((nz[-1] - nz[0] + 1) * HIST_BIN_HZ)


def compute_speaker_pitch_stats(tracks: dict, groups: dict | None = None) -> dict:
    """``tracks`` maps speaker id to a list of PitchTrack; returns speaker -> SpeakerPitchStats."""
    edges = SpeakerPitchStats.bin_edges()
    out = {}
    for spk in sorted(tracks):
        voiced = [t.f0[t.voiced] for t in tracks[spk]]
        f0 = np.concatenate(voiced) if voiced else np.zeros(0)
        if not len(f0):
            log.warning("speaker %s has no voiced frames; excluded from pitch stats", spk)
            continue
        hist, _ = np.histogram(f0, bins=edges)
        out[spk] = SpeakerPitchStats(spk, float(f0.mean()), hist, len(f0),
                                     (groups or {}).get(spk, ""))
    return out


def group_spread(stats: dict) -> dict:
    """Range (max - min) of per-speaker mean f0 within each group."""
    by_group: dict = {}
    for s in stats.values():
        by_group.setdefault(s.group, []).append(s.mean_f0)
    return {g: float(max(v) - min(v)) for g, v in sorted(by_group.items())}


def group_support_width(stats: dict, min_fraction: float = 0.01) -> dict:
    """Width in Hz of each group's pooled f0 histogram, counting only bins holding at least
    ``min_fraction`` of the group's voiced frames (isolated octave errors would otherwise
    stretch every group to the full search range)."""
    pooled: dict = {}
    for s in stats.values():
        pooled[s.group] = pooled.get(s.group, 0) + s.histogram
    out = {}
    for g, h in sorted(pooled.items()):
        nz = np.flatnonzero(h >= min_fraction * max(h.sum(), 1))
        out[g] = float((nz[-1] - nz[0] + 1) * HIST_BIN_HZ) if len(nz) else 0.0
    return out
