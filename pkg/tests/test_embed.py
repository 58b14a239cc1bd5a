import numpy as np
import pytest

from fdcae_lab.embed import (DiagUbm, EmbeddingError, PvectorNormalizer, SpeakerEmbedder, compute_pvector,
                             concat_aux, expand_aux, fit_pca, raw_pvector, supervector_offsets, train_diag_ubm)
from fdcae_lab.pitch import PitchTrack


def test_pca_line():
    t = np.linspace(-1, 1, 50)
    x = np.stack([t, 2 * t], axis=1) + 3
    with pytest.raises(EmbeddingError, match="rank 1"):
        fit_pca(x, 2)
    p = fit_pca(x, 1)
    np.testing.assert_allclose(p.projection[0], np.array([1, 2]) / np.sqrt(5), atol=1e-12)
    noisy = x + np.random.default_rng(0).normal(0, 1e-3, x.shape)
    p2 = fit_pca(noisy, 2)
    assert p2.eigenvalues[1] < 1e-5 * p2.eigenvalues[0]


def test_pca_properties():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    p = fit_pca(x, 6)
    np.testing.assert_allclose(p.projection @ p.projection.T, np.eye(6), atol=1e-8)
    y = p.transform(x)
    cov = np.cov(y.T)
    assert np.max(np.abs(cov - np.diag(np.diag(cov)))) < 1e-6
    np.testing.assert_allclose(p.inverse(y), x, atol=1e-8)
    d = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
    np.testing.assert_allclose(d(y[:20]), d(x[:20]), atol=1e-8)
    for row in p.projection:
        assert row[np.flatnonzero(np.abs(row) > 1e-12)[0]] > 0
    with pytest.raises(EmbeddingError):
        fit_pca(x[:5], 6)


def test_ubm_single_component_is_mle():
    x = np.random.default_rng(2).normal(1.0, 2.0, size=(200, 3))
    ubm = train_diag_ubm(x, 1, iters=3)
    np.testing.assert_allclose(ubm.means[0], x.mean(0), atol=1e-8)
    np.testing.assert_allclose(ubm.variances[0], x.var(0), atol=1e-8)
    assert ubm.weights.sum() == pytest.approx(1.0, abs=1e-8)


def test_ubm_two_clusters_and_monotone():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-5, 0.5, (300, 2)), rng.normal(5, 0.5, (300, 2))])
    hist = []
    ubm = train_diag_ubm(x, 2, seed=1, history=hist)
    centers = sorted(ubm.means[:, 0])
    assert centers[0] == pytest.approx(-5, abs=0.1) and centers[1] == pytest.approx(5, abs=0.1)
    assert np.all(np.diff(hist) >= -1e-6)
    with pytest.raises(EmbeddingError):
        train_diag_ubm(x[:50], 2)


def test_offsets_zero_at_means_and_translation_covariant():
    rng = np.random.default_rng(4)
    # well-separated components, so frames at a mean have one-hot posteriors
    ubm = DiagUbm(np.array([0.5, 0.5]), 20 * rng.normal(size=(2, 3)), np.ones((2, 3)))
    at_means = np.repeat(ubm.means, 5, axis=0)
    assert np.max(np.abs(supervector_offsets(at_means, ubm))) < 1e-6
    x = rng.normal(size=(20, 3))
    delta = np.array([0.3, -1.0, 2.0])
    post = ubm.posteriors(x)
    a = supervector_offsets(x, ubm, tau=0.0, posteriors=post)
    b = supervector_offsets(x + delta, ubm, tau=0.0, posteriors=post)
    np.testing.assert_allclose((b - a).reshape(20, 2, 3), np.broadcast_to(delta, (20, 2, 3)), atol=1e-8)


def test_embedder_on_corpus(small_ws, tmp_path):
    emb = small_ws.embedder()
    feats = small_ws.features("adult_train")
    m = small_ws.manifest("adult_train")
    e = emb.extract(feats[m.records[0].utt_id])
    T = len(feats[m.records[0].utt_id])
    assert e.shape == ((T + 9) // 10, emb.dim) and np.all(np.isfinite(e))
    # duplicated audio: chunks clear of the splice context at the join are unchanged
    x = feats[m.records[0].utt_id]
    n = (T - 3) // 10
    np.testing.assert_allclose(emb.extract(np.concatenate([x, x]))[:n], e[:n], atol=1e-12)
    assert emb.extract(x[:4]).shape == (1, emb.dim)
    emb.save(tmp_path / "e.npz")
    np.testing.assert_array_equal(SpeakerEmbedder.load(tmp_path / "e.npz").extract(x), e)
    train = np.concatenate([emb.extract(f) for n in small_ws.train_sets() for f in small_ws.features(n).values()])
    np.testing.assert_allclose(train.std(0), 1.0, atol=0.2)


def test_same_speaker_closer(small_ws):
    emb = small_ws.embedder()
    m, feats = small_ws.manifest("adult_train"), small_ws.features("adult_train")
    final = {r.utt_id: emb.extract(feats[r.utt_id])[-1] for r in m}
    by_spk = {}
    for r in m:
        by_spk.setdefault((r.speaker_id, r.group), []).append(r.utt_id)
    cos = lambda a, b: a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    rng = np.random.default_rng(0)
    keys = sorted(by_spk)
    wins = trials = 0
    for _ in range(200):
        spk = keys[rng.integers(len(keys))]
        a, b = rng.choice(by_spk[spk], 2, replace=False)
        others = [k for k in keys if k[1] != spk[1]]
        other = others[rng.integers(len(others))]
        c = by_spk[other][rng.integers(len(by_spk[other]))]
        wins += cos(final[a], final[b]) > cos(final[a], final[c])
        trials += 1
    assert wins / trials >= 0.8


def track(f0, voiced=None, nccf=0.9):
    f0 = np.asarray(f0, dtype=float)
    voiced = f0 > 0 if voiced is None else voiced
    return PitchTrack(f0, np.broadcast_to(nccf, f0.shape).astype(float), voiced)


def test_pvector_conventions():
    flat = raw_pvector(track(np.full(10, 200.0)))
    np.testing.assert_allclose(flat, [[np.log(200.0), 0.0, 0.9]])
    unv = raw_pvector(track(np.zeros(10), nccf=0.2))
    np.testing.assert_allclose(unv, [[0.0, 0.0, 0.2]])
    rise = raw_pvector(track(np.linspace(150, 250, 10)))
    assert rise[0, 1] > 0
    assert raw_pvector(track(np.full(25, 120.0))).shape == (3, 3)


def test_pvector_standardization():
    rng = np.random.default_rng(5)
    tracks = [track(rng.uniform(100, 300, 40), nccf=rng.uniform(0.3, 1.0, 40)) for _ in range(30)]
    norm = PvectorNormalizer.fit(np.concatenate([raw_pvector(t) for t in tracks]))
    z = np.concatenate([compute_pvector(t, norm) for t in tracks])
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-6)
    np.testing.assert_allclose(z.std(0), 1.0, atol=1e-6)


def test_concat_and_expand():
    i = np.ones((4, 16))
    p = np.zeros((4, 3))
    assert concat_aux(i, p).shape == (4, 19)
    assert concat_aux(np.ones((2, 100)), np.ones((2, 3))).shape == (2, 103)
    assert concat_aux(pvec=p).shape == (4, 3)
    np.testing.assert_array_equal(concat_aux(i, p)[:, :16], i)
    with pytest.raises(EmbeddingError):
        concat_aux()
    with pytest.raises(EmbeddingError):
        concat_aux(i, p[:3])
    aux = np.arange(3)[:, None].astype(float)
    np.testing.assert_array_equal(expand_aux(aux, 25)[:, 0], np.repeat([0, 1, 2], [10, 10, 5]))
