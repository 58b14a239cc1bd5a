"""Deterministic source-filter speech corpus with adult and child speaker populations.

The generator stands in for the adult/child training and test corpora: children get
higher and more widely spread f0 plus upscaled formants, and an optional second child
population carries a vowel-dependent F2 offset that plays the role of a foreign accent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .pitch import speed_perturb, volume_perturb
from .signal import Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

SILENCE = "sil"
VOWELS = ("aa", "iy", "uw", "eh", "ao")
CONSONANTS = ("s", "sh", "f", "m", "n", "t")
DEFAULT_PHONES = (SILENCE,) + VOWELS + CONSONANTS

# (F1, F2) in Hz for voiced phones.
FORMANTS = {
    "aa": (730.0, 1090.0),
    "iy": (270.0, 2290.0),
    "uw": (300.0, 870.0),
    "eh": (530.0, 1840.0),
    "ao": (570.0, 840.0),
    "m": (250.0, 1100.0),
    "n": (250.0, 1650.0),
}
FORMANT_BANDWIDTHS = (90.0, 130.0)
F3 = 2600.0
# (center Hz, bandwidth Hz, level) of the noise band for unvoiced phones.
NOISE_BANDS = {
    "s": (5500.0, 2500.0, 0.30),
    "sh": (3000.0, 1400.0, 0.35),
    "f": (4000.0, 5000.0, 0.12),
    "t": (3500.0, 3000.0, 0.40),
}
VOICED_LEVEL = {"m": 0.35, "n": 0.35}
ACCENT_F2_SHIFT = {"aa": 0.12, "iy": -0.12, "uw": 0.12, "eh": -0.12, "ao": 0.12}

GROUP_F0 = {"adult_male": (90.0, 140.0), "adult_female": (160.0, 230.0), "child": (200.0, 350.0)}
GROUP_VTL = {"adult_male": (0.85, 0.92), "adult_female": (0.92, 1.0), "child": (1.05, 1.3)}
GROUP_TAG = {"adult_male": "m", "adult_female": "f", "child": "c"}

SPEED_FACTORS = (0.9, 1.0, 1.1)
SPEED_PREFIX = {0.9: "sp0.9-", 1.1: "sp1.1-"}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PhoneInventory:
    phones: tuple = DEFAULT_PHONES

    def __post_init__(self):
        if len(set(self.phones)) != len(self.phones):
            raise CorpusError("phone symbols must be unique")
        if not self.phones or self.phones[0] != SILENCE:
            raise CorpusError("silence must be phone 0")

    def __len__(self):
        return len(self.phones)

    def index(self, phone: str) -> int:
        try:
            return self.phones.index(phone)
        except ValueError:
            raise CorpusError(f"unknown phone {phone!r}") from None

    def validate(self, transcript) -> None:
        for p in transcript:
            self.index(p)


@dataclass
class SpeakerProfile:
    id: str
    group: str
    base_f0: float
    f0_jitter: float
    vtl_scale: float
    accent_shift: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhoneSpan:
    phone: str
    start: int  # sample index, inclusive
    end: int  # exclusive


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    group: str
    wav_path: str
    transcript: tuple
    duration: float

    def __post_init__(self):
        self.transcript = tuple(self.transcript)
        if not self.transcript:
            raise CorpusError(f"{self.utt_id}: empty transcript")
        if self.transcript[0] != SILENCE or self.transcript[-1] != SILENCE:
            raise CorpusError(f"{self.utt_id}: transcript must start and end with sil")


@dataclass
class Manifest:
    records: list
    split: str = "train"
    corpus: str = ""
    augmented: bool = False
    root: Path | None = None  # directory relative wav paths resolve against

    def __post_init__(self):
        if self.split not in ("train", "test", "adapt"):
            raise CorpusError(f"unknown split {self.split!r}")
        ids = [r.utt_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate utt_id in manifest")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def speakers(self) -> set:
        return {r.speaker_id for r in self.records}

    def total_duration(self) -> float:
        return float(sum(r.duration for r in self.records))

    def wav(self, rec: UtteranceRecord) -> Path:
        p = Path(rec.wav_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# corpus={self.corpus} split={self.split} augmented={int(self.augmented)}"]
        for r in self.records:
            lines.append("\t".join([r.utt_id, r.speaker_id, r.group, r.wav_path,
                                    " ".join(r.transcript), f"{r.duration:.4f}"]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        meta = {"corpus": "", "split": "train", "augmented": "0"}
        records = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
                continue
            f = line.split("\t")
            if len(f) != 6:
                raise CorpusError(f"{path}: expected 6 tab-separated fields, got {len(f)}")
            records.append(UtteranceRecord(f[0], f[1], f[2], f[3], tuple(f[4].split()), float(f[5])))
        return cls(records, meta["split"], meta["corpus"], meta["augmented"] == "1", path.parent)


def make_population(seed: int, counts: dict, prefix: str = "", accent: bool = False) -> list:
    """Speakers per group, f0 uniform over the group range, formant scale tied to group."""
    rng = np.random.default_rng(seed)
    out = []
    for group in ("adult_male", "adult_female", "child"):
        n = int(counts.get(group, 0))
        if group in counts and n < 1:
            raise CorpusError(f"count for {group} must be >= 1")
        lo, hi = GROUP_F0[group]
        vlo, vhi = GROUP_VTL[group]
        for i in range(n):
            f0 = float(rng.uniform(lo, hi))
            vtl = float(rng.uniform(vlo, vhi))
            jitter = float(rng.uniform(0.01, 0.02))
            shift = {}
            if accent:
                shift = {v: ACCENT_F2_SHIFT[v] * FORMANTS[v][1] for v in VOWELS}
            out.append(SpeakerProfile(f"{prefix}{GROUP_TAG[group]}{i:03d}", group, f0, jitter, vtl, shift))
    return out


def _resonator(freq: float, bw: float, sr: int):
    """Klatt two-pole resonator with unity gain at DC."""
    r = np.exp(-np.pi * bw / sr)
    c = -(r**2)
    b = 2 * r * np.cos(2 * np.pi * freq / sr)
    a = 1.0 - b - c
    return np.array([a]), np.array([1.0, -b, -c])


def _bandpass(freq: float, bw: float, sr: int):
    r = np.exp(-np.pi * bw / sr)
    return np.array([1.0 - r, 0.0, -(1.0 - r)]), np.array([1.0, -2 * r * np.cos(2 * np.pi * freq / sr), r**2])


def _smooth_noise(rng, n: int, step: int) -> np.ndarray:
    knots = rng.standard_normal(n // step + 2)
    return np.interp(np.arange(n) / step, np.arange(len(knots)), knots)


def _filter_blocks(x: np.ndarray, blocks, sr: int) -> np.ndarray:
    """Run ``x`` through a cascade whose coefficients change per block; state carries over."""
    y = np.zeros_like(x)
    states = None
    for (start, end), filters in blocks:
        seg = x[start:end]
        if states is None or len(states) != len(filters):
            states = [np.zeros(2) for _ in filters]
        for k, (b, a) in enumerate(filters):
            zi = states[k][: max(len(a), len(b)) - 1]
            seg, zf = lfilter(b, a, seg, zi=zi)
            states[k] = zf
        y[start:end] = seg
    return y


def synth_with_timing(sp: SpeakerProfile, transcript, seed: int, sample_rate: int = 16000,
                      inventory: PhoneInventory | None = None):
    """Synthesize ``transcript`` for speaker ``sp``; returns (Waveform, list of PhoneSpan)."""
    inv = inventory or PhoneInventory()
    transcript = tuple(transcript)
    inv.validate(transcript)
    if not transcript:
        raise CorpusError("empty transcript")
    sr = sample_rate
    rng = np.random.default_rng(seed)
    durs = rng.uniform(0.08, 0.16, size=len(transcript))
    bounds = np.concatenate([[0], np.cumsum(np.round(durs * sr).astype(int))])
    n = int(bounds[-1])
    spans = [PhoneSpan(p, int(bounds[i]), int(bounds[i + 1])) for i, p in enumerate(transcript)]

    f0 = sp.base_f0 * (1.0 + sp.f0_jitter * _smooth_noise(rng, n, sr // 100))
    f0 *= 1.0 + 0.04 * np.linspace(1.0, -1.0, n)  # mild declination
    phase = np.cumsum(f0 / sr)
    source = 2.0 * (phase % 1.0) - 1.0
    noise = rng.standard_normal(n)

    voiced_gain = np.zeros(n)
    noise_gain = np.zeros(n)
    v_blocks, n_blocks = [], []
    for sp_ in spans:
        s, e, p = sp_.start, sp_.end, sp_.phone
        if p in FORMANTS:
            f1, f2 = FORMANTS[p]
            f2 = f2 + sp.accent_shift.get(p, 0.0)
            filt = [_resonator(f1 * sp.vtl_scale, FORMANT_BANDWIDTHS[0], sr),
                    _resonator(f2 * sp.vtl_scale, FORMANT_BANDWIDTHS[1], sr),
                    _resonator(F3 * sp.vtl_scale, 200.0, sr)]
            voiced_gain[s:e] = VOICED_LEVEL.get(p, 1.0)
            v_blocks.append(((s, e), filt))
            n_blocks.append(((s, e), [_bandpass(3000.0, 2000.0, sr)]))
        elif p in NOISE_BANDS:
            fc, bw, level = NOISE_BANDS[p]
            v_blocks.append(((s, e), [_resonator(500.0, 100.0, sr)] * 3))
            n_blocks.append(((s, e), [_bandpass(min(fc * sp.vtl_scale, 0.45 * sr), bw, sr)]))
            gain = np.full(e - s, level)
            if p == "t":
                gain[: (e - s) // 2] = 0.0
            noise_gain[s:e] = gain
        else:
            v_blocks.append(((s, e), [_resonator(500.0, 100.0, sr)] * 3))
            n_blocks.append(((s, e), [_bandpass(3000.0, 2000.0, sr)]))
    ramp = max(1, int(0.01 * sr))
    kernel = np.ones(ramp) / ramp
    voiced_gain = np.convolve(voiced_gain, kernel, mode="same")
    noise_gain = np.convolve(noise_gain, kernel, mode="same")

    voiced = _filter_blocks(source, v_blocks, sr)
    unvoiced = _filter_blocks(noise, n_blocks, sr)
    voiced /= np.sqrt(np.mean(voiced**2)) + 1e-12
    unvoiced /= np.sqrt(np.mean(unvoiced**2)) + 1e-12
    x = voiced_gain * voiced + noise_gain * unvoiced + 0.003 * noise
    x *= 0.7 / np.max(np.abs(x))
    return Waveform(x, sr), spans


def synth_utterance(sp: SpeakerProfile, transcript, seed: int, sample_rate: int = 16000) -> Waveform:
    return synth_with_timing(sp, transcript, seed, sample_rate)[0]


def random_transcript(rng, min_len: int, max_len: int) -> tuple:
    """sil (C V C V ...) sil, alternating consonant/vowel classes."""
    n = int(rng.integers(min_len, max_len + 1))
    vowel = bool(rng.integers(2))
    body = []
    for _ in range(n):
        pool = VOWELS if vowel else CONSONANTS
        body.append(pool[int(rng.integers(len(pool)))])
        vowel = not vowel
    return (SILENCE, *body, SILENCE)


@dataclass
class CorpusConfig:
    seed: int = 1234
    sample_rate: int = 16000
    min_phones: int = 4
    max_phones: int = 8
    adult_train_speakers: int = 24  # split evenly male/female
    adult_train_utts: int = 8
    adult_test_speakers: int = 8
    adult_test_utts: int = 4
    child_train_speakers: int = 5
    child_train_utts: int = 4
    child_test_speakers: int = 8
    child_test_utts: int = 4
    accent_train_speakers: int = 6
    accent_train_utts: int = 4
    accent_test_speakers: int = 6
    accent_test_utts: int = 4


# name -> (population seed offset, groups, split, corpus tag, accent)
CORPORA = {
    "adult_train": (11, ("adult_male", "adult_female"), "train", "adult", False),
    "adult_test": (12, ("adult_male", "adult_female"), "test", "adult", False),
    "child_train": (21, ("child",), "train", "child", False),
    "child_test": (22, ("child",), "test", "child", False),
    "accent_train": (31, ("child",), "adapt", "accent", True),
    "accent_test": (32, ("child",), "test", "accent", True),
}


def _counts(groups, total: int) -> dict:
    if len(groups) == 1:
        return {groups[0]: total}
    half = total // 2
    return {groups[0]: total - half, groups[1]: half}


def write_timing(path, timings: dict) -> None:
    lines = []
    for utt in sorted(timings):
        spans = " ".join(f"{s.phone}:{s.start}:{s.end}" for s in timings[utt])
        lines.append(f"{utt}\t{spans}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_timing(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt, spans = line.split("\t")
        out[utt] = [PhoneSpan(p, int(a), int(b)) for p, a, b in (t.split(":") for t in spans.split())]
    return out


def build_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Write WAVs, manifests (``<name>.tsv``) and phone timings for every corpus split."""
    out_dir = Path(out_dir)
    manifests = {}
    for name, (offset, groups, split, tag, accent) in CORPORA.items():
        n_spk = getattr(cfg, f"{name}_speakers")
        n_utt = getattr(cfg, f"{name}_utts")
        pop = make_population(cfg.seed * 100 + offset, _counts(groups, n_spk),
                              prefix=f"{name.split('_')[0][:2]}{split[:2]}-", accent=accent)
        rng = np.random.default_rng(cfg.seed * 100 + offset + 50)
        records, timings = [], {}
        for sp in pop:
            for j in range(n_utt):
                utt_id = f"{sp.id}-{j:03d}"
                transcript = random_transcript(rng, cfg.min_phones, cfg.max_phones)
                useed = int(rng.integers(2**31))
                w, spans = synth_with_timing(sp, transcript, useed, cfg.sample_rate)
                rel = Path(name) / f"{utt_id}.wav"
                write_wav(w, out_dir / rel)
                records.append(UtteranceRecord(utt_id, sp.id, sp.group, rel.as_posix(), transcript,
                                               round(w.duration, 4)))
                timings[utt_id] = spans
        m = Manifest(records, split, tag, root=out_dir)
        m.write(out_dir / f"{name}.tsv")
        write_timing(out_dir / f"{name}.timing", timings)
        manifests[name] = m
        log.info("corpus %s: %d utterances, %.1f s", name, len(m), m.total_duration())
    return manifests


def triple_with_perturbation(m: Manifest, out_dir, seed: int = 0, name: str = "") -> Manifest:
    """Original plus speed 0.9 and 1.1 copies, each with a random volume gain in [0.8, 1.25]."""
    if m.augmented or any(r.utt_id.startswith(tuple(SPEED_PREFIX.values())) for r in m.records):
        raise CorpusError("manifest is already speed-perturbed")
    if m.split == "test":
        raise CorpusError("only training/adaptation manifests are perturbed")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    sub = name or f"{m.corpus}_{m.split}_sp"
    records = []
    for factor in SPEED_FACTORS:
        prefix = SPEED_PREFIX.get(factor, "")
        for r in m.records:
            gain = float(rng.uniform(0.8, 1.25))
            w = volume_perturb(speed_perturb(read_wav(m.wav(r)), factor), gain)
            utt_id = prefix + r.utt_id
            rel = Path(sub) / f"{utt_id}.wav"
            write_wav(w, out_dir / rel)
            records.append(replace(r, utt_id=utt_id, wav_path=rel.as_posix(), duration=round(w.duration, 4)))
    return Manifest(records, m.split, m.corpus, augmented=True, root=out_dir)


def frame_labels(spans, num_frames: int, inventory: PhoneInventory | None = None,
                 shift: int = 160, window: int = 400) -> np.ndarray:
    """Phone index of the span containing each frame's center sample."""
    inv = inventory or PhoneInventory()
    centers = shift * np.arange(num_frames) + window // 2
    ends = np.array([s.end for s in spans])
    idx = np.minimum(np.searchsorted(ends, centers, side="right"), len(spans) - 1)
    return np.array([inv.index(spans[i].phone) for i in idx], dtype=np.int64)
