"""Data preparation stages shared by the CLI and the experiment matrix.

Everything lives under one work directory:

    corpus/         WAVs, manifests (<set>.tsv) and phone timings
    features/       <set>.npz  utt_id -> MFCC frames (T x 40)
    pitch/          <set>.npz  utt_id -> pitch track (T x 3: f0, nccf, voiced)
    models/         gmm.npz, speaker_embedder.npz, pvector_norm.npz, phone_lm.txt, den.txt
    alignments/     <set>.ali

Stages skip work whose output already exists, so a rerun resumes where it stopped.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig
from ..corpus import Manifest, PhoneInventory, build_corpus, triple_with_perturbation
from ..embed import (PvectorNormalizer, SpeakerEmbedder, compute_pvector, concat_aux, expand_aux, raw_pvector,
                     train_speaker_embedder)
from ..fdcae import TrainUtterance
from ..graph import PhoneLM, build_denominator_graph
from ..hmm import (GmmHmmModel, HmmTopology, align_all, flat_start, read_alignments, viterbi_train,
                   write_alignments)
from ..pitch import PitchTrack, pitch_shift_cents, track_pitch
from ..signal import extract_mfcc, read_wav, write_wav

log = logging.getLogger(__name__)

BASE_SETS = ("adult_train", "adult_test", "child_train", "child_test", "accent_train", "accent_test")
PERTURBED_SETS = ("adult_train", "child_train", "accent_train")


def shifted_name(base: str, cents: int) -> str:
    return f"{base}+{cents}"


class Workspace:
    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.topology = HmmTopology(PhoneInventory())
        self._cache = {}

    # -------- paths
    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    def manifest_path(self, name) -> Path:
        return self.corpus_dir / f"{name}.tsv"

    def features_path(self, name) -> Path:
        return self.root / "features" / f"{name}.npz"

    def pitch_path(self, name) -> Path:
        return self.root / "pitch" / f"{name}.npz"

    def alignment_path(self, name) -> Path:
        return self.root / "alignments" / f"{name}.ali"

    def model_path(self, name) -> Path:
        return self.root / "models" / name

    # -------- set names
    def train_sets(self) -> list:
        return [self.training_name(n) for n in ("adult_train", "child_train")]

    def training_name(self, base: str) -> str:
        return f"{base}_sp" if self.cfg.features.augment and base in PERTURBED_SETS else base

    def shifted_sets(self) -> list:
        return [shifted_name("adult_test", c) for c in self.cfg.features.shifts]

    def test_sets(self) -> list:
        return ["child_test", "adult_test", *self.shifted_sets(), "accent_test"]

    def all_sets(self) -> list:
        names = list(BASE_SETS) + self.shifted_sets()
        if self.cfg.features.augment:
            names += [f"{n}_sp" for n in PERTURBED_SETS]
        return names

    # -------- loaders
    def manifest(self, name) -> Manifest:
        key = ("manifest", name)
        if key not in self._cache:
            self._cache[key] = Manifest.read(self.manifest_path(name))
        return self._cache[key]

    def features(self, name) -> dict:
        key = ("features", name)
        if key not in self._cache:
            with np.load(self.features_path(name)) as z:
                self._cache[key] = {k: z[k] for k in z.files}
        return self._cache[key]

    def tracks(self, name) -> dict:
        key = ("pitch", name)
        if key not in self._cache:
            with np.load(self.pitch_path(name)) as z:
                self._cache[key] = {k: PitchTrack.from_array(z[k]) for k in z.files}
        return self._cache[key]

    def alignments(self, name) -> dict:
        key = ("ali", name)
        if key not in self._cache:
            self._cache[key] = read_alignments(self.alignment_path(name))
        return self._cache[key]

    def embedder(self) -> SpeakerEmbedder:
        if "embedder" not in self._cache:
            self._cache["embedder"] = SpeakerEmbedder.load(self.model_path("speaker_embedder.npz"))
        return self._cache["embedder"]

    def pvector_norm(self) -> PvectorNormalizer:
        if "pvnorm" not in self._cache:
            self._cache["pvnorm"] = PvectorNormalizer.load(self.model_path("pvector_norm.npz"))
        return self._cache["pvnorm"]

    def phone_lm(self) -> PhoneLM:
        if "lm" not in self._cache:
            self._cache["lm"] = PhoneLM.from_text(self.model_path("phone_lm.txt").read_text(encoding="utf-8"))
        return self._cache["lm"]

    def den_graph(self):
        if "den" not in self._cache:
            self._cache["den"] = build_denominator_graph(self.phone_lm(), self.topology)
        return self._cache["den"]

    def aux(self, name: str, mode: str) -> dict:
        """utt_id -> per-frame auxiliary matrix for the given aux mode (None for 'none')."""
        if mode == "none":
            return {u: None for u in self.features(name)}
        key = ("aux", name, mode)
        if key not in self._cache:
            feats, tracks = self.features(name), self.tracks(name)
            out = {}
            for u, x in feats.items():
                ivec = self.embedder().extract(x) if "i" in mode.split("+") else None
                pvec = compute_pvector(tracks[u], self.pvector_norm()) if "p" in mode.split("+") else None
                chunks = concat_aux(ivec, pvec)
                out[u] = expand_aux(chunks, len(x))
            self._cache[key] = out
        return self._cache[key]

    def train_utterances(self, names, mode: str) -> list:
        utts = []
        for name in names:
            feats, ali, aux = self.features(name), self.alignments(name), self.aux(name, mode)
            for r in self.manifest(name):
                if r.utt_id in ali:
                    utts.append(TrainUtterance(r.utt_id, feats[r.utt_id], ali[r.utt_id].states, aux[r.utt_id]))
        return utts


# ---------------------------------------------------------------- stages


def synth_corpus(ws: Workspace) -> dict:
    if all(ws.manifest_path(n).exists() for n in BASE_SETS):
        return {n: ws.manifest(n) for n in BASE_SETS}
    return build_corpus(ws.cfg.corpus, ws.corpus_dir)


def augment(ws: Workspace) -> dict:
    out = {}
    if not ws.cfg.features.augment:
        return out
    for i, base in enumerate(PERTURBED_SETS):
        name = f"{base}_sp"
        if not ws.manifest_path(name).exists():
            m = triple_with_perturbation(ws.manifest(base), ws.corpus_dir, seed=ws.cfg.corpus.seed + i, name=name)
            m.write(ws.manifest_path(name))
        out[name] = ws.manifest(name)
    return out


def make_shifted_testset(test_manifest: Manifest, cents_list, out_dir, base_name: str = "adult_test") -> dict:
    """Pitch-shift every utterance by each cents value; returns name -> Manifest (not yet written)."""
    out_dir = Path(out_dir)
    out = {}
    for cents in cents_list:
        name = shifted_name(base_name, cents)
        records = []
        for r in test_manifest:
            w = pitch_shift_cents(read_wav(test_manifest.wav(r)), int(cents))
            rel = Path(name) / f"{r.utt_id}.wav"
            write_wav(w, out_dir / rel)
            records.append(replace(r, utt_id=f"{r.utt_id}+{cents}", wav_path=rel.as_posix(),
                                   duration=round(w.duration, 4)))
        out[name] = Manifest(records, "test", f"{test_manifest.corpus}+{cents}", root=out_dir)
    return out


def shift_testsets(ws: Workspace) -> dict:
    missing = [c for c in ws.cfg.features.shifts if not ws.manifest_path(shifted_name("adult_test", c)).exists()]
    if missing:
        for name, m in make_shifted_testset(ws.manifest("adult_test"), missing, ws.corpus_dir).items():
            m.write(ws.manifest_path(name))
    return {n: ws.manifest(n) for n in ws.shifted_sets()}


def extract_features(ws: Workspace, names=None) -> None:
    for name in names or ws.all_sets():
        path = ws.features_path(name)
        if path.exists():
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        m = ws.manifest(name)
        np.savez(path, **{r.utt_id: extract_mfcc(read_wav(m.wav(r))).frames for r in m})


def track_sets(ws: Workspace, names=None) -> None:
    for name in names or ws.all_sets():
        path = ws.pitch_path(name)
        if path.exists():
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        m = ws.manifest(name)
        feats = ws.features(name)
        arrays = {}
        for r in m:
            arr = track_pitch(read_wav(m.wav(r))).to_array()
            T = len(feats[r.utt_id])
            if len(arr) < T:  # pad with unvoiced frames
                arr = np.vstack([arr, np.zeros((T - len(arr), 3))])
            arrays[r.utt_id] = arr[:T]
        np.savez(path, **arrays)


def train_spkembed(ws: Workspace) -> None:
    path = ws.model_path("speaker_embedder.npz")
    if path.exists():
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    feats = [x for n in ws.train_sets() for x in ws.features(n).values()]
    emb = train_speaker_embedder(feats, dim=ws.cfg.features.ivector_dim,
                                 num_components=ws.cfg.features.ubm_components, seed=ws.cfg.corpus.seed)
    emb.save(path)


def fit_pvectors(ws: Workspace) -> None:
    """Pitch tracks for every set, then the p-vector normalizer from the training sets."""
    track_sets(ws)
    path = ws.model_path("pvector_norm.npz")
    if path.exists():
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.concatenate([raw_pvector(t) for n in ws.train_sets() for t in ws.tracks(n).values()])
    PvectorNormalizer.fit(raw).save(path)


def train_embedders(ws: Workspace) -> None:
    train_spkembed(ws)
    fit_pvectors(ws)


def train_gmm(ws: Workspace, history: list | None = None) -> GmmHmmModel:
    path = ws.model_path("gmm.npz")
    if path.exists():
        return GmmHmmModel.load(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [r for n in ws.train_sets() for r in ws.manifest(n)]
    feats = {u: x for n in ws.train_sets() for u, x in ws.features(n).items()}
    pooled = Manifest(records, "train", "pooled", root=ws.corpus_dir)
    model = flat_start(pooled, feats, ws.topology, ws.cfg.features.gmm_components)
    model = viterbi_train(model, pooled, feats, iters=ws.cfg.features.gmm_iters, history=history)
    model.save(path)
    return model


def align_sets(ws: Workspace, names=None) -> None:
    model = None
    for name in names or (ws.train_sets() + [ws.training_name("accent_train")]):
        path = ws.alignment_path(name)
        if path.exists():
            continue
        model = model or GmmHmmModel.load(ws.model_path("gmm.npz"))
        write_alignments(path, align_all(model, ws.manifest(name), ws.features(name)))


def build_graphs(ws: Workspace) -> None:
    lm_path = ws.model_path("phone_lm.txt")
    if not lm_path.exists():
        lm_path.parent.mkdir(parents=True, exist_ok=True)
        transcripts = [r.transcript for n in ws.train_sets() for r in ws.manifest(n)]
        lm = PhoneLM.estimate(transcripts, ws.topology.inventory.phones)
        lm_path.write_text(lm.to_text(), encoding="utf-8")
    den_path = ws.model_path("den.txt")
    if not den_path.exists():
        build_denominator_graph(ws.phone_lm(), ws.topology).save(den_path)


def prepare_all(ws: Workspace) -> Workspace:
    """Run every data stage in order (each one resumes if its outputs exist)."""
    synth_corpus(ws)
    augment(ws)
    shift_testsets(ws)
    extract_features(ws)
    track_sets(ws)
    train_embedders(ws)
    train_gmm(ws)
    align_sets(ws)
    build_graphs(ws)
    return ws
