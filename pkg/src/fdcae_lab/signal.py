"""Waveform I/O and MFCC extraction."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCM_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Malformed RIFF/WAVE data."""


class UnsupportedAudioError(ValueError):
    """Valid WAV file in an encoding this package does not read."""


class EmptyFeatureError(ValueError):
    """Waveform too short to produce a single frame."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_mel_bins: int = 40
    num_ceps: int = 40
    preemph: float = 0.97
    low_freq: float = 20.0
    high_freq: float = 0.0  # <= 0 means offset from Nyquist
    log_floor: float = 1e-10

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        n = 1
        while n < self.window_samples:
            n *= 2
        return n


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    feature_kind: str = "mfcc"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedAudioError(f"{path}: {msg}") from exc
        raise AudioFormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise UnsupportedAudioError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedAudioError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, rate)


def write_wav(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def num_frames(num_samples: int, window: int, shift: int) -> int:
    if num_samples < window:
        return 0
    return (num_samples - window) // shift + 1


def frame_signal(x: np.ndarray, window: int, shift: int) -> np.ndarray:
    n = num_frames(len(x), window, shift)
    idx = np.arange(window)[None, :] + shift * np.arange(n)[:, None]
    return x[idx]


def hamming(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1))


def power_spectrum(frames: np.ndarray, nfft: int) -> np.ndarray:
    """|rFFT|^2 of each row, zero-padded to ``nfft``."""
    spec = np.fft.rfft(frames, n=nfft, axis=-1)
    return spec.real**2 + spec.imag**2


def mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters on the mel scale, shape (num_mel_bins, nfft//2 + 1)."""
    nyquist = cfg.sample_rate / 2.0
    high = cfg.high_freq if cfg.high_freq > 0 else nyquist + cfg.high_freq
    lo_mel, hi_mel = mel(cfg.low_freq), mel(high)
    edges = np.linspace(lo_mel, hi_mel, cfg.num_mel_bins + 2)
    bin_mel = mel(np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT as a matrix acting on column vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def log_mel_energies(w: Waveform, cfg: MfccConfig | None = None) -> np.ndarray:
    cfg = cfg or MfccConfig(sample_rate=w.sample_rate)
    x = w.samples
    if len(x) < cfg.window_samples:
        raise EmptyFeatureError(
            f"{len(x)} samples is shorter than one {cfg.window_samples}-sample window"
        )
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - cfg.preemph * x[:-1]
    frames = frame_signal(emph, cfg.window_samples, cfg.shift_samples) * hamming(cfg.window_samples)
    energies = power_spectrum(frames, cfg.fft_size) @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def extract_mfcc(w: Waveform, cfg: MfccConfig | None = None) -> FeatureMatrix:
    cfg = cfg or MfccConfig(sample_rate=w.sample_rate)
    if cfg.sample_rate != w.sample_rate:
        raise ValueError(f"config expects {cfg.sample_rate} Hz, waveform is {w.sample_rate} Hz")
    logmel = log_mel_energies(w, cfg)
    ceps = logmel @ dct_matrix(cfg.num_mel_bins)[: cfg.num_ceps].T
    return FeatureMatrix(ceps, cfg.frame_shift_ms, cfg.frame_length_ms)


def splice_context(f, left: int = 3, right: int = 3):
    """Stack frames t-left..t+right, replicating the first/last frame at the edges.

    Accepts a FeatureMatrix (returns one) or a bare T x D array (returns an array).
    """
    x = f.frames if isinstance(f, FeatureMatrix) else np.asarray(f)
    T = x.shape[0]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-left, right + 1)[None, :], 0, T - 1)
    out = x[idx].reshape(T, -1)
    if isinstance(f, FeatureMatrix):
        return FeatureMatrix(out, f.frame_shift_ms, f.frame_length_ms, f.feature_kind, dict(f.meta))
    return out
