"""Monophone GMM-HMM: flat start, Viterbi training, forced alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .corpus import PhoneInventory

log = logging.getLogger(__name__)

MODEL_VERSION = 1
VAR_FLOOR = 1e-4
NEG_INF = -np.inf


class AlignmentError(ValueError):
    pass


@dataclass
class HmmTopology:
    """Left-to-right phone models; state ids are contiguous per phone, silence first."""

    inventory: PhoneInventory
    states_per_phone: int = 3
    sil_states: int = 5
    self_loop: float = 0.6

    def __post_init__(self):
        self.phone_states = []
        nxt = 0
        for p in self.inventory.phones:
            n = self.sil_states if p == self.inventory.phones[0] else self.states_per_phone
            self.phone_states.append(np.arange(nxt, nxt + n))
            nxt += n
        self.num_states = nxt
        self.state_phone = np.concatenate([np.full(len(s), i) for i, s in enumerate(self.phone_states)])
        self.first_state = np.array([s[0] for s in self.phone_states])
        self.last_state = np.array([s[-1] for s in self.phone_states])
        self.log_self = np.full(self.num_states, np.log(self.self_loop))
        self.log_fwd = np.full(self.num_states, np.log1p(-self.self_loop))

    def transition_probs(self, state: int) -> dict:
        """Outgoing probabilities; the forward arc of a phone's last state leaves the phone."""
        return {"self": float(np.exp(self.log_self[state])), "forward": float(np.exp(self.log_fwd[state]))}

    def composite(self, transcript) -> np.ndarray:
        return np.concatenate([self.phone_states[self.inventory.index(p)] for p in transcript])

    def is_phone_start(self, states: np.ndarray) -> np.ndarray:
        """True at frames that begin a new phone instance in a state sequence."""
        states = np.asarray(states)
        start = np.zeros(len(states), dtype=bool)
        if len(states):
            start[0] = True
            start[1:] = (states[1:] != states[:-1]) & np.isin(states[1:], self.first_state)
        return start

    def phones_of(self, states: np.ndarray) -> list:
        states = np.asarray(states)
        return [int(self.state_phone[s]) for s in states[self.is_phone_start(states)]]


@dataclass
class Alignment:
    utt_id: str
    states: np.ndarray
    score: float = 0.0

    def __len__(self):
        return len(self.states)


@dataclass
class GmmHmmModel:
    topology: HmmTopology
    weights: np.ndarray  # (S, M); 0 for unused components
    means: np.ndarray  # (S, M, D)
    variances: np.ndarray  # (S, M, D)
    max_components: int = 8

    @property
    def num_states(self) -> int:
        return self.topology.num_states

    def num_components(self) -> np.ndarray:
        return (self.weights > 0).sum(axis=1)

    def state_loglikes(self, x: np.ndarray, states=None) -> np.ndarray:
        """log p(x_t | state) for the given states (all by default), shape (T, len(states))."""
        states = np.arange(self.num_states) if states is None else np.asarray(states)
        w, mu, var = self.weights[states], self.means[states], self.variances[states]
        L, M, D = mu.shape
        mu2, var2 = mu.reshape(L * M, D), var.reshape(L * M, D)
        inv = 1.0 / var2
        const = -0.5 * (D * np.log(2 * np.pi) + np.log(var2).sum(axis=1))
        quad = (x**2) @ inv.T - 2 * x @ (mu2 * inv).T + (mu2**2 * inv).sum(axis=1)
        with np.errstate(divide="ignore"):
            lw = np.log(w.reshape(-1))
        comp = (lw + const - 0.5 * quad).reshape(len(x), L, M)
        return logsumexp(comp, axis=2)

    def save(self, path) -> None:
        t = self.topology
        np.savez(path, version=MODEL_VERSION, kind="gmm_hmm", phones=np.array(t.inventory.phones),
                 states_per_phone=t.states_per_phone, sil_states=t.sil_states, self_loop=t.self_loop,
                 weights=self.weights, means=self.means, variances=self.variances,
                 max_components=self.max_components)

    @classmethod
    def load(cls, path) -> "GmmHmmModel":
        z = np.load(path)
        if int(z["version"]) != MODEL_VERSION or str(z["kind"]) != "gmm_hmm":
            raise ValueError(f"{path}: not a v{MODEL_VERSION} GMM-HMM model")
        topo = HmmTopology(PhoneInventory(tuple(str(p) for p in z["phones"])), int(z["states_per_phone"]),
                           int(z["sil_states"]), float(z["self_loop"]))
        return cls(topo, z["weights"], z["means"], z["variances"], int(z["max_components"]))


def viterbi_chain(emit: np.ndarray, log_self: np.ndarray, log_fwd: np.ndarray):
    """Best left-to-right path through a chain of L states over T frames.

    ``emit`` is (T, L). The path starts in state 0 and ends in state L-1; ties prefer
    the forward transition. Returns (state index per frame, score).
    """
    T, L = emit.shape
    if T < L:
        raise AlignmentError(f"{T} frames cannot cover a {L}-state path")
    delta = np.full(L, NEG_INF)
    delta[0] = emit[0, 0]
    moved = np.zeros((T, L), dtype=bool)
    for t in range(1, T):
        stay = delta + log_self
        adv = np.full(L, NEG_INF)
        adv[1:] = delta[:-1] + log_fwd[:-1]
        moved[t] = adv >= stay
        delta = np.where(moved[t], adv, stay) + emit[t]
    if not np.isfinite(delta[-1]):
        raise AlignmentError("no valid path")
    path = np.empty(T, dtype=np.int64)
    j = L - 1
    for t in range(T - 1, -1, -1):
        path[t] = j
        if t > 0 and moved[t, j]:
            j -= 1
    return path, float(delta[-1])


def chain_path_score(emit: np.ndarray, log_self, log_fwd, path) -> float:
    """Score of an explicit chain path under the same conventions as :func:`viterbi_chain`."""
    path = np.asarray(path)
    score = emit[0, path[0]]
    for t in range(1, len(path)):
        step = path[t] - path[t - 1]
        if step == 0:
            score += log_self[path[t]]
        elif step == 1:
            score += log_fwd[path[t - 1]]
        else:
            return NEG_INF
        score += emit[t, path[t]]
    return float(score)


def force_align(model: GmmHmmModel, features: np.ndarray, transcript, utt_id: str = "") -> Alignment:
    topo = model.topology
    chain = topo.composite(transcript)
    emit = model.state_loglikes(features, chain)
    idx, score = viterbi_chain(emit, topo.log_self[chain], topo.log_fwd[chain])
    return Alignment(utt_id, chain[idx], score)


def _frames(f) -> np.ndarray:
    return f.frames if hasattr(f, "frames") else np.asarray(f)


def flat_start(manifest, features: dict, topology: HmmTopology | None = None,
               max_components: int = 8) -> GmmHmmModel:
    """Uniform segmentation of every utterance over its composite states, one Gaussian per state."""
    records = list(manifest)
    if not records:
        raise ValueError("empty manifest")
    topo = topology or HmmTopology(PhoneInventory())
    buckets = {}
    dim = None
    for r in records:
        x = _frames(features[r.utt_id])
        chain = topo.composite(r.transcript)
        T, L = len(x), len(chain)
        if T < L:
            log.warning("%s: %d frames < %d states; skipped", r.utt_id, T, L)
            continue
        dim = x.shape[1]
        bounds = (np.arange(L + 1) * T) // L
        for j, s in enumerate(chain):
            buckets.setdefault(int(s), []).append(x[bounds[j]:bounds[j + 1]])
    if dim is None:
        raise ValueError("no usable utterances for flat start")
    allx = np.concatenate([np.concatenate(v) for v in buckets.values()])
    gmean, gvar = allx.mean(axis=0), np.maximum(allx.var(axis=0), VAR_FLOOR)
    S, M = topo.num_states, max_components
    weights = np.zeros((S, M))
    weights[:, 0] = 1.0
    means = np.tile(gmean, (S, M, 1))
    variances = np.tile(gvar, (S, M, 1))
    for s, chunks in buckets.items():
        x = np.concatenate(chunks)
        means[s, 0] = x.mean(axis=0)
        if len(x) > 1:
            variances[s, 0] = np.maximum(x.var(axis=0), _floor(gvar))
    return GmmHmmModel(topo, weights, means, variances, max_components)


def _floor(global_var: np.ndarray) -> np.ndarray:
    return np.maximum(0.01 * global_var, VAR_FLOOR)


def reestimate(model: GmmHmmModel, frames_by_state: dict, var_floor: np.ndarray) -> GmmHmmModel:
    """One EM step of each state's GMM on its aligned frames; empty states keep their parameters."""
    w, mu, var = model.weights.copy(), model.means.copy(), model.variances.copy()
    for s, x in frames_by_state.items():
        if len(x) == 0:
            continue
        active = np.flatnonzero(w[s] > 0)
        sub = GmmHmmModel(model.topology, w[s:s + 1, active], mu[s:s + 1, active], var[s:s + 1, active])
        comp = _component_loglikes(sub, x)
        post = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
        occ = post.sum(axis=0)
        for k, c in enumerate(active):
            if occ[k] < 1e-3:
                continue
            m = post[:, k] @ x / occ[k]
            v = post[:, k] @ (x**2) / occ[k] - m**2
            mu[s, c] = m
            var[s, c] = np.maximum(v, var_floor)
        w[s, active] = np.maximum(occ, 1e-10) / max(occ.sum(), 1e-10)
    return GmmHmmModel(model.topology, w, mu, var, model.max_components)


def _component_loglikes(model: GmmHmmModel, x: np.ndarray) -> np.ndarray:
    w, mu, var = model.weights[0], model.means[0], model.variances[0]
    inv = 1.0 / var
    const = -0.5 * (x.shape[1] * np.log(2 * np.pi) + np.log(var).sum(axis=1))
    quad = (x**2) @ inv.T - 2 * x @ (mu * inv).T + (mu**2 * inv).sum(axis=1)
    return np.log(w) + const - 0.5 * quad


def split_components(model: GmmHmmModel, perturb: float = 0.2) -> GmmHmmModel:
    """Double each state's component count (largest weights first), capped at max_components."""
    w, mu, var = model.weights.copy(), model.means.copy(), model.variances.copy()
    for s in range(model.num_states):
        active = list(np.flatnonzero(w[s] > 0))
        free = [c for c in range(model.max_components) if w[s, c] == 0]
        for c in sorted(active, key=lambda c: -w[s, c]):
            if not free:
                break
            n = free.pop(0)
            off = perturb * np.sqrt(var[s, c])
            mu[s, n], var[s, n] = mu[s, c] + off, var[s, c]
            mu[s, c] = mu[s, c] - off
            w[s, c] *= 0.5
            w[s, n] = w[s, c]
    return GmmHmmModel(model.topology, w, mu, var, model.max_components)


def aligned_loglike(model: GmmHmmModel, x: np.ndarray, states: np.ndarray) -> float:
    """Sum of emission log-likelihoods along a fixed state sequence."""
    uniq, inv = np.unique(states, return_inverse=True)
    ll = model.state_loglikes(x, uniq)
    return float(ll[np.arange(len(x)), inv].sum())


def viterbi_train(model: GmmHmmModel, manifest, features: dict, iters: int = 15,
                  split_at=(4, 8, 12), history: list | None = None) -> GmmHmmModel:
    """Alternate forced alignment and GMM re-estimation; ``history`` gets the total aligned
    log-likelihood (emissions + transitions) of each iteration's alignment."""
    records = [r for r in manifest if len(_frames(features[r.utt_id])) >= len(model.topology.composite(r.transcript))]
    allx = np.concatenate([_frames(features[r.utt_id]) for r in records])
    floor = _floor(np.maximum(allx.var(axis=0), VAR_FLOOR))
    for it in range(1, iters + 1):
        if it in split_at:
            model = split_components(model)
        buckets = {s: [] for s in range(model.num_states)}
        total = 0.0
        for r in records:
            x = _frames(features[r.utt_id])
            ali = force_align(model, x, r.transcript, r.utt_id)
            total += ali.score
            for s in np.unique(ali.states):
                buckets[int(s)].append(x[ali.states == s])
        if history is not None:
            history.append(total)
        frames = {s: np.concatenate(v) if v else np.zeros((0, allx.shape[1])) for s, v in buckets.items()}
        model = reestimate(model, frames, floor)
    return model


def align_all(model: GmmHmmModel, manifest, features: dict) -> dict:
    out = {}
    for r in manifest:
        try:
            out[r.utt_id] = force_align(model, _frames(features[r.utt_id]), r.transcript, r.utt_id)
        except AlignmentError as exc:
            log.warning("%s: %s", r.utt_id, exc)
    return out


def write_alignments(path, alignments: dict) -> None:
    lines = [f"{u} " + " ".join(map(str, alignments[u].states)) for u in sorted(alignments)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_alignments(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            utt, *states = line.split()
            out[utt] = Alignment(utt, np.array([int(s) for s in states], dtype=np.int64))
    return out


def phone_accuracy(topology: HmmTopology, alignment: Alignment, reference_phones: np.ndarray) -> float:
    """Fraction of frames whose aligned state belongs to the reference phone."""
    n = min(len(alignment), len(reference_phones))
    return float(np.mean(topology.state_phone[alignment.states[:n]] == reference_phones[:n]))
