"""Auxiliary inducer vectors: 3-dim p-vectors and a UBM/PCA speaker embedding."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .pitch import PitchTrack
from .signal import FeatureMatrix, splice_context

log = logging.getLogger(__name__)

MODEL_VERSION = 1
CHUNK = 10
VAR_FLOOR = 1e-4


class EmbeddingError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray
    projection: np.ndarray  # (out_dim, in_dim), orthonormal rows
    eigenvalues: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.projection.T

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) @ self.projection + self.mean


def fit_pca(data: np.ndarray, out_dim: int, rank_tol: float = 1e-10) -> PcaModel:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] <= out_dim:
        raise EmbeddingError(f"need more than {out_dim} rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = int(np.sum(vals > rank_tol * max(vals[0], 1e-300)))
    if rank < out_dim:
        raise EmbeddingError(f"covariance rank {rank} < requested out_dim {out_dim}; "
                             f"achievable rank is {rank}")
    proj = vecs[:, :out_dim].T.copy()
    for row in proj:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return PcaModel(mean, proj, vals[:out_dim].copy())


@dataclass
class DiagUbm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)

    @property
    def num_components(self) -> int:
        return len(self.weights)

    def component_loglikes(self, x: np.ndarray) -> np.ndarray:
        """log w_k + log N(x | mu_k, diag var_k), shape (N, K)."""
        x = np.atleast_2d(x)
        inv = 1.0 / self.variances
        const = -0.5 * (x.shape[1] * np.log(2 * np.pi) + np.log(self.variances).sum(axis=1))
        quad = (x**2) @ inv.T - 2 * x @ (self.means * inv).T + (self.means**2 * inv).sum(axis=1)
        return np.log(self.weights) + const - 0.5 * quad

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        ll = self.component_loglikes(x)
        return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))

    def total_loglike(self, x: np.ndarray) -> float:
        return float(logsumexp(self.component_loglikes(x), axis=1).sum())


def _kmeans_pp(x: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def train_diag_ubm(features: np.ndarray, K: int, seed: int = 0, iters: int = 10,
                   min_rows_per_component: int = 50, history: list | None = None) -> DiagUbm:
    """EM from a k-means++ start. Appends the per-iteration total log-likelihood to ``history``."""
    x = np.asarray(features, dtype=np.float64)
    if len(x) < min_rows_per_component * K:
        raise EmbeddingError(f"{len(x)} rows is fewer than {min_rows_per_component} x {K}")
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(x, K, rng)
    dist = (means**2).sum(axis=1)[None, :] - 2 * x @ means.T
    assign = np.argmin(dist, axis=1)
    gvar = np.maximum(x.var(axis=0), VAR_FLOOR)
    variances = np.tile(gvar, (K, 1))
    weights = np.full(K, 1.0 / K)
    for k in range(K):
        sel = x[assign == k]
        if len(sel) > 1:
            variances[k] = np.maximum(sel.var(axis=0), VAR_FLOOR)
            weights[k] = len(sel) / len(x)
    weights = np.maximum(weights, 1e-8)
    weights /= weights.sum()
    ubm = DiagUbm(weights, means, variances)
    for _ in range(iters):
        ll = ubm.component_loglikes(x)
        norm = logsumexp(ll, axis=1, keepdims=True)
        if history is not None:
            history.append(float(norm.sum()))
        post = np.exp(ll - norm)
        occ = post.sum(axis=0)
        first = post.T @ x
        second = post.T @ (x**2)
        new_means = ubm.means.copy()
        new_vars = ubm.variances.copy()
        ok = occ > 1e-6
        new_means[ok] = first[ok] / occ[ok, None]
        new_vars[ok] = np.maximum(second[ok] / occ[ok, None] - new_means[ok] ** 2, VAR_FLOOR)
        for k in np.flatnonzero(~ok):
            donor = int(np.argmax(occ))
            log.warning("UBM component %d empty; re-seeding from component %d", k, donor)
            new_means[k] = new_means[donor] + 0.01 * np.sqrt(new_vars[donor]) * rng.standard_normal(x.shape[1])
            new_vars[k] = new_vars[donor]
            occ[k] = occ[donor] * 0.5
            occ[donor] *= 0.5
        weights = occ / occ.sum()
        ubm = DiagUbm(weights, new_means, new_vars)
    if history is not None:
        history.append(ubm.total_loglike(x))
    return ubm


def supervector_offsets(x: np.ndarray, ubm: DiagUbm, tau: float = 10.0,
                        posteriors: np.ndarray | None = None) -> np.ndarray:
    """Cumulative relevance-MAP mean offsets (F_k - N_k mu_k) / (N_k + tau), one row per frame.

    Row t summarizes frames 0..t; shape (T, K * D).
    """
    post = ubm.posteriors(x) if posteriors is None else posteriors
    n = np.cumsum(post, axis=0)  # (T, K)
    f = np.cumsum(post[:, :, None] * x[:, None, :], axis=0)  # (T, K, D)
    off = (f - n[:, :, None] * ubm.means[None]) / (n[:, :, None] + tau)
    return off.reshape(len(x), -1)


@dataclass
class SpeakerEmbedder:
    """Splice -> PCA (to the UBM input dim) -> UBM stats -> supervector PCA -> whitening."""

    feat_pca: PcaModel
    ubm: DiagUbm
    sv_pca: PcaModel
    scale: np.ndarray  # per-dim 1/std of training-set embeddings
    tau: float = 10.0
    context: int = 3

    @property
    def dim(self) -> int:
        return self.sv_pca.out_dim

    def reduce(self, feats) -> np.ndarray:
        return self.feat_pca.transform(splice_context(_frames(feats), self.context, self.context))

    def chunk_supervectors(self, feats, chunk: int = CHUNK) -> np.ndarray:
        return self._chunk_offsets(self.reduce(feats), chunk)

    def _chunk_offsets(self, x: np.ndarray, chunk: int) -> np.ndarray:
        off = supervector_offsets(x, self.ubm, self.tau)
        return off[_chunk_ends(len(x), chunk)]

    def extract_reduced(self, x: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
        """Embeddings from features already in the UBM's (spliced, PCA-reduced) space."""
        return self.sv_pca.transform(self._chunk_offsets(x, chunk)) * self.scale

    def extract(self, feats, chunk: int = CHUNK) -> np.ndarray:
        return self.extract_reduced(self.reduce(feats), chunk)

    def save(self, path) -> None:
        np.savez(path, version=MODEL_VERSION, kind="speaker_embedder", tau=self.tau, context=self.context,
                 fp_mean=self.feat_pca.mean, fp_proj=self.feat_pca.projection, fp_eig=self.feat_pca.eigenvalues,
                 ubm_w=self.ubm.weights, ubm_m=self.ubm.means, ubm_v=self.ubm.variances,
                 sp_mean=self.sv_pca.mean, sp_proj=self.sv_pca.projection, sp_eig=self.sv_pca.eigenvalues,
                 scale=self.scale)

    @classmethod
    def load(cls, path) -> "SpeakerEmbedder":
        z = np.load(path)
        _check_version(z, "speaker_embedder")
        return cls(PcaModel(z["fp_mean"], z["fp_proj"], z["fp_eig"]),
                   DiagUbm(z["ubm_w"], z["ubm_m"], z["ubm_v"]),
                   PcaModel(z["sp_mean"], z["sp_proj"], z["sp_eig"]),
                   z["scale"], float(z["tau"]), int(z["context"]))


def _frames(f) -> np.ndarray:
    return f.frames if isinstance(f, FeatureMatrix) else np.asarray(f)


def _chunk_ends(T: int, chunk: int) -> np.ndarray:
    """Index of the last frame of each chunk (the final chunk may be partial)."""
    return np.minimum(np.arange(chunk - 1, T + chunk - 1, chunk), T - 1)


def _check_version(z, kind: str) -> None:
    if int(z["version"]) != MODEL_VERSION or str(z["kind"]) != kind:
        raise EmbeddingError(f"expected {kind} v{MODEL_VERSION}, found {z['kind']} v{z['version']}")


def train_speaker_embedder(feature_list, dim: int = 16, num_components: int = 64,
                           reduced_dim: int = 40, seed: int = 0, tau: float = 10.0,
                           ubm_fraction: float = 0.25, history: list | None = None) -> SpeakerEmbedder:
    """Fit the full embedding pipeline on a list of per-utterance feature matrices."""
    feats = [_frames(f) for f in feature_list]
    spliced = np.concatenate([splice_context(f) for f in feats])
    feat_pca = fit_pca(spliced, reduced_dim)
    rng = np.random.default_rng(seed)
    n_ubm = max(int(len(feats) * ubm_fraction), 1)
    subset = sorted(rng.choice(len(feats), size=n_ubm, replace=False))
    ubm_rows = np.concatenate([feat_pca.transform(splice_context(feats[i])) for i in subset])
    if len(ubm_rows) < 50 * num_components:
        # A quarter of a desk-scale corpus can be too small for K components.
        ubm_rows = feat_pca.transform(spliced)
    ubm = train_diag_ubm(ubm_rows, num_components, seed, history=history)
    partial = SpeakerEmbedder(feat_pca, ubm, None, None, tau)
    finals = np.array([supervector_offsets(partial.reduce(f), ubm, tau)[-1] for f in feats])
    sv_pca = fit_pca(finals, dim)
    # Offsets are already relative to the UBM; keep zero offset at the origin.
    sv_pca.mean = np.zeros_like(sv_pca.mean)
    chunks = np.concatenate([sv_pca.transform(partial.chunk_supervectors(f)) for f in feats])
    scale = 1.0 / np.maximum(chunks.std(axis=0), 1e-8)
    return SpeakerEmbedder(feat_pca, ubm, sv_pca, scale, tau)


def extract_speaker_embedding(f, embedder: SpeakerEmbedder, chunk: int = CHUNK) -> np.ndarray:
    return embedder.extract(f, chunk)


def raw_pvector(track: PitchTrack, chunk: int = CHUNK) -> np.ndarray:
    """Per chunk: mean log-f0 (voiced frames), mean delta log-f0 (voiced pairs), mean NCCF."""
    T = len(track)
    if T == 0:
        return np.zeros((0, 3))
    logf = np.where(track.voiced, np.log(np.maximum(track.f0, 1e-12)), 0.0)
    pair = np.zeros(T, dtype=bool)
    pair[1:] = track.voiced[1:] & track.voiced[:-1]
    delta = np.zeros(T)
    delta[1:] = logf[1:] - logf[:-1]
    out = []
    for s in range(0, T, chunk):
        e = min(s + chunk, T)
        v = track.voiced[s:e]
        p = pair[s:e]
        out.append((logf[s:e][v].mean() if v.any() else 0.0,
                    delta[s:e][p].mean() if p.any() else 0.0,
                    track.nccf[s:e].mean()))
    return np.array(out)


@dataclass
class PvectorNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray) -> "PvectorNormalizer":
        raw = np.atleast_2d(raw)
        return cls(raw.mean(axis=0), np.maximum(raw.std(axis=0), 1e-8))

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(raw) - self.mean) / self.std

    def save(self, path) -> None:
        np.savez(path, version=MODEL_VERSION, kind="pvector_norm", mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path) -> "PvectorNormalizer":
        z = np.load(path)
        _check_version(z, "pvector_norm")
        return cls(z["mean"], z["std"])


def compute_pvector(track: PitchTrack, normalizer: PvectorNormalizer | None = None,
                    chunk: int = CHUNK) -> np.ndarray:
    raw = raw_pvector(track, chunk)
    return normalizer(raw) if normalizer is not None else raw


def concat_aux(ivec: np.ndarray | None = None, pvec: np.ndarray | None = None) -> np.ndarray:
    """Speaker part first, pitch part second; one row per 10-frame chunk."""
    parts = [np.atleast_2d(a) for a in (ivec, pvec) if a is not None]
    if not parts:
        raise EmbeddingError("no auxiliary vector given; use the no-aux model instead")
    n = min(len(p) for p in parts)
    if any(len(p) != n for p in parts):
        raise EmbeddingError(f"chunk counts differ: {[len(p) for p in parts]}")
    return np.concatenate(parts, axis=1)


def expand_aux(aux: np.ndarray, num_frames: int, chunk: int = CHUNK) -> np.ndarray:
    """Repeat each chunk-level row over its frames, shape (num_frames, dim)."""
    idx = np.minimum(np.arange(num_frames) // chunk, len(aux) - 1)
    return aux[idx]

