"""Numerator/denominator state graphs and exact log-semiring forward-backward.

Graphs are epsilon-free acceptors: every arc consumes one frame and carries the id of
the HMM state that emits it. A path's score is the sum of its arc log-weights, the
frame log-likelihoods of the arc labels and the final weight of its last node.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hmm import HmmTopology

NEG_INF = -np.inf
BOS, EOS = "<s>", "</s>"


class GraphError(ValueError):
    pass


@dataclass
class StateGraph:
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    start: int
    final: np.ndarray  # log final weight per node, -inf if not final
    num_states: int

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.final = np.asarray(self.final, dtype=np.float64)
        n = len(self.src)
        if not (len(self.dst) == len(self.label) == len(self.weight) == n):
            raise GraphError("arc arrays differ in length")
        if n and (self.label.min() < 0 or self.label.max() >= self.num_states):
            raise GraphError("arc labels must be emitting-state ids in [0, S); epsilon arcs are not allowed")
        if len(self.final) != self.num_nodes:
            raise GraphError("final weights must cover every node")
        if not self._has_path():
            raise GraphError("no path from start to a final node")

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    def _has_path(self) -> bool:
        # nodes reachable by at least one arc (every path consumes a frame)
        seen = np.zeros(self.num_nodes, dtype=bool)
        frontier = np.array([self.start])
        while len(frontier):
            nxt = np.unique(self.dst[np.isin(self.src, frontier)])
            nxt = nxt[~seen[nxt]]
            seen[nxt] = True
            frontier = nxt
        return bool(np.any(np.isfinite(self.final) & seen))

    def to_text(self) -> str:
        lines = [f"start {self.start} nodes {self.num_nodes} states {self.num_states}"]
        for a in range(self.num_arcs):
            lines.append(f"{self.src[a]} {self.dst[a]} {self.label[a]} {float(self.weight[a])!r}")
        for n in np.flatnonzero(np.isfinite(self.final)):
            lines.append(f"final {n} {float(self.final[n])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StateGraph":
        src, dst, lab, w = [], [], [], []
        finals = {}
        header, *rest = [l for l in text.splitlines() if l.strip()]
        h = header.split()
        start, nodes, states = int(h[1]), int(h[3]), int(h[5])
        for line in rest:
            f = line.split()
            if f[0] == "final":
                finals[int(f[1])] = float(f[2])
            else:
                src.append(int(f[0]))
                dst.append(int(f[1]))
                lab.append(int(f[2]))
                w.append(float(f[3]))
        final = np.full(nodes, NEG_INF)
        for n, v in finals.items():
            final[n] = v
        return cls(nodes, np.array(src), np.array(dst), np.array(lab), np.array(w), start, final, states)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StateGraph":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class PhoneLM:
    """Add-one smoothed phone n-gram (order 1 or 2) over inventory phones plus <s>/</s>."""

    phones: tuple
    logprob: dict  # (history, next) -> log P; history is BOS/phone for order 2, None for order 1
    order: int = 2

    @classmethod
    def estimate(cls, transcripts, phones, order: int = 2) -> "PhoneLM":
        if order not in (1, 2):
            raise GraphError("phone LM order must be 1 or 2")
        phones = tuple(phones)
        succ = phones + (EOS,)
        lp = {}
        if order == 1:
            c = Counter(p for t in transcripts for p in tuple(t) + (EOS,))
            total = sum(c.values()) + len(succ)
            for b in succ:
                lp[(None, b)] = float(np.log((c[b] + 1) / total))
            return cls(phones, lp, 1)
        c = Counter()
        for t in transcripts:
            seq = (BOS,) + tuple(t) + (EOS,)
            c.update(zip(seq[:-1], seq[1:]))
        for a in (BOS,) + phones:
            nxt = succ if a != BOS else phones
            denom = sum(c[(a, b)] for b in nxt) + len(nxt)
            for b in nxt:
                lp[(a, b)] = float(np.log((c[(a, b)] + 1) / denom))
        return cls(phones, lp, 2)

    @classmethod
    def uniform(cls, phones) -> "PhoneLM":
        phones = tuple(phones)
        return cls.estimate([], phones, 2)

    def score(self, a: str, b: str) -> float:
        key = (None, b) if self.order == 1 else (a, b)
        return self.logprob[key]

    def sequence_logprob(self, phones) -> float:
        seq = (BOS,) + tuple(phones) + (EOS,)
        return float(sum(self.score(a, b) for a, b in zip(seq[:-1], seq[1:])))

    def to_text(self) -> str:
        lines = [f"order {self.order}", "phones " + " ".join(self.phones)]
        for (a, b), v in sorted(self.logprob.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            lines.append(f"{a if a is not None else '-'} {b} {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PhoneLM":
        lines = text.splitlines()
        order = int(lines[0].split()[1])
        phones = tuple(lines[1].split()[1:])
        lp = {}
        for line in lines[2:]:
            if line.strip():
                a, b, v = line.split()
                lp[(None if a == "-" else a, b)] = float(v)
        return cls(phones, lp, order)


class _Builder:
    def __init__(self, num_states: int):
        self.S = num_states
        self.arcs = []
        self.n = 1  # node 0 is the start
        self.finals = {}

    def node(self) -> int:
        self.n += 1
        return self.n - 1

    def arc(self, s, d, lab, w):
        self.arcs.append((s, d, int(lab), float(w)))

    def build(self) -> StateGraph:
        a = np.array(self.arcs, dtype=object).reshape(-1, 4)
        final = np.full(self.n, NEG_INF)
        for k, v in self.finals.items():
            final[k] = np.logaddexp(final[k], v)
        return StateGraph(self.n, a[:, 0].astype(np.int64), a[:, 1].astype(np.int64),
                          a[:, 2].astype(np.int64), a[:, 3].astype(np.float64), 0, final, self.S)


def _lm(lm: PhoneLM | None, a: str, b: str) -> float:
    return 0.0 if lm is None else lm.score(a, b)


def build_numerator_graph(transcript, topology: HmmTopology, phone_lm: PhoneLM | None = None,
                          optional_silence: bool = True, partial: bool = False) -> StateGraph:
    """Chain of the transcript's phone HMMs.

    Phone-transition arcs carry the same LM weights as the denominator graph, so every
    numerator path is a denominator path of equal weight. With ``partial`` (training
    chunks cut out of an utterance) the path may enter any state of the first phone and
    stop in any state of the last phone, all with weight 0, matching the chunk-mode
    denominator.
    """
    phones = list(transcript)
    if not phones:
        raise GraphError("empty transcript")
    inv = topology.inventory
    sil = inv.phones[0]
    if optional_silence and not partial:
        seqs_pre = [[]] if phones[0] == sil else [[], [sil]]
        seqs_post = [[]] if phones[-1] == sil else [[], [sil]]
    else:
        seqs_pre, seqs_post = [[]], [[]]
    b = _Builder(topology.num_states)

    def chain(seq, entry_nodes):
        """Append phones ``seq`` after ``entry_nodes`` (list of (node, weight, phone)); returns exits."""
        exits = entry_nodes
        for p in seq:
            states = topology.phone_states[inv.index(p)]
            nodes = [b.node() for _ in states]
            for (n, w, q) in exits:
                lmw = _lm(phone_lm, q, p)
                b.arc(n, nodes[0], states[0], w + lmw)
            for k, (nd, s) in enumerate(zip(nodes, states)):
                b.arc(nd, nd, s, topology.log_self[s])
                if k + 1 < len(nodes):
                    b.arc(nd, nodes[k + 1], states[k + 1], topology.log_fwd[s])
            exits = [(nodes[-1], topology.log_fwd[states[-1]], p)]
        return exits

    # Core chain (built once), entered from the start or from optional leading silence.
    core_states = [topology.phone_states[inv.index(p)] for p in phones]
    core_nodes = [[b.node() for _ in st] for st in core_states]
    for i, (nodes, states) in enumerate(zip(core_nodes, core_states)):
        for k, (nd, s) in enumerate(zip(nodes, states)):
            b.arc(nd, nd, s, topology.log_self[s])
            if k + 1 < len(nodes):
                b.arc(nd, nodes[k + 1], states[k + 1], topology.log_fwd[s])
        if i + 1 < len(phones):
            nxt = core_states[i + 1]
            b.arc(nodes[-1], core_nodes[i + 1][0], nxt[0],
                  topology.log_fwd[states[-1]] + _lm(phone_lm, phones[i], phones[i + 1]))
    first_nodes, first_states = core_nodes[0], core_states[0]
    if partial:
        for nd, s in zip(first_nodes, first_states):
            b.arc(0, nd, s, 0.0)
        for nd in core_nodes[-1]:
            b.finals[nd] = 0.0
        return b.build()
    for pre in seqs_pre:
        if pre:
            exits = chain(pre, [(0, 0.0, BOS)])
            for (n, w, q) in exits:
                b.arc(n, first_nodes[0], first_states[0], w + _lm(phone_lm, q, phones[0]))
        else:
            b.arc(0, first_nodes[0], first_states[0], _lm(phone_lm, BOS, phones[0]))
    last_node, last_state = core_nodes[-1][-1], core_states[-1][-1]
    for post in seqs_post:
        if post:
            exits = chain(post, [(last_node, topology.log_fwd[last_state], phones[-1])])
            for (n, w, q) in exits:
                b.finals[n] = w + _lm(phone_lm, q, EOS)
        else:
            b.finals[last_node] = topology.log_fwd[last_state] + _lm(phone_lm, phones[-1], EOS)
    return b.build()


def build_denominator_graph(phone_lm: PhoneLM, topology: HmmTopology, chunk_mode: bool = False) -> StateGraph:
    """One node per HMM state; phone HMMs joined by bigram-weighted arcs.

    ``chunk_mode`` lets paths start in any state and end in any state with weight 0, which
    is what training on chunks cut from longer utterances needs.
    """
    inv = topology.inventory
    S = topology.num_states
    b = _Builder(S)
    b.n = S + 1  # node s + 1 <-> state s
    for pi, states in enumerate(topology.phone_states):
        for k, s in enumerate(states):
            b.arc(s + 1, s + 1, s, topology.log_self[s])
            if k + 1 < len(states):
                b.arc(s + 1, states[k + 1] + 1, states[k + 1], topology.log_fwd[s])
    for ai, a in enumerate(inv.phones):
        la = topology.last_state[ai]
        for bi, p in enumerate(inv.phones):
            fb = topology.first_state[bi]
            b.arc(la + 1, fb + 1, fb, topology.log_fwd[la] + phone_lm.score(a, p))
    if chunk_mode:
        for s in range(S):
            b.arc(0, s + 1, s, 0.0)
            b.finals[s + 1] = 0.0
    else:
        for bi, p in enumerate(inv.phones):
            fb = topology.first_state[bi]
            b.arc(0, fb + 1, fb, phone_lm.score(BOS, p))
        for ai, a in enumerate(inv.phones):
            la = topology.last_state[ai]
            b.finals[la + 1] = topology.log_fwd[la] + phone_lm.score(a, EOS)
    return b.build()


@dataclass
class FBResult:
    log_total: float
    posteriors: np.ndarray  # (T, S)
    backward_total: float = np.nan


class _Segments:
    """Arcs grouped by a key node, for per-node log-sum-exp / max reductions."""

    def __init__(self, key: np.ndarray, num_nodes: int):
        self.order = np.argsort(key, kind="stable")
        k = key[self.order]
        self.starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]]) if len(k) else np.zeros(0, int)
        self.nodes = k[self.starts]
        self.lengths = np.diff(np.r_[self.starts, len(k)])
        self.num_nodes = num_nodes

    def logsumexp(self, scores: np.ndarray) -> np.ndarray:
        out = np.full(self.num_nodes, NEG_INF)
        if not len(self.starts):
            return out
        sc = scores[self.order]
        m = np.maximum.reduceat(sc, self.starts)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.add.reduceat(np.exp(sc - np.repeat(m, self.lengths)), self.starts)
        with np.errstate(divide="ignore"):
            out[self.nodes] = np.log(s) + m
        return out

    def argmax(self, scores: np.ndarray):
        """Per-node max and the arc achieving it (smallest arc index on ties)."""
        out = np.full(self.num_nodes, NEG_INF)
        arg = np.full(self.num_nodes, -1, dtype=np.int64)
        if not len(self.starts):
            return out, arg
        sc = scores[self.order]
        m = np.maximum.reduceat(sc, self.starts)
        pos = np.arange(len(sc))
        cand = np.where(sc == np.repeat(m, self.lengths), pos, len(sc))
        first = np.minimum.reduceat(cand, self.starts)
        out[self.nodes] = m
        arg[self.nodes] = self.order[first]
        return out, arg


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v) if len(v) else NEG_INF
    if not np.isfinite(m):
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(v - m))))


def _forward_backward_arrays(src, dst, lab, w, num_nodes, starts, final, ll, comp, n_comp,
                             want_posteriors=True, lengths=None):
    """Core recursion over a (possibly disconnected) graph; components are scored separately.

    ``ll`` is (T, L) where arc labels index columns; ``comp`` maps node -> component.
    ``lengths`` (per component, default T) freezes a component after its last frame.
    Returns (totals, backward totals, arc occupancy summed into (T, L)).
    """
    T = ll.shape[0]
    by_dst = _Segments(dst, num_nodes)
    by_src = _Segments(src, num_nodes)
    node_len = None if lengths is None else np.asarray(lengths)[comp]
    alpha = np.full((T + 1, num_nodes), NEG_INF)
    alpha[0, starts] = 0.0
    for t in range(T):
        alpha[t + 1] = by_dst.logsumexp(alpha[t, src] + w + ll[t, lab])
        if node_len is not None:
            alpha[t + 1] = np.where(t < node_len, alpha[t + 1], alpha[t])
    end = alpha[T] + final
    totals = np.array([_logsumexp(end[comp == c]) for c in range(n_comp)])
    beta = np.full((T + 1, num_nodes), NEG_INF)
    beta[T] = final
    for t in range(T - 1, -1, -1):
        beta[t] = by_src.logsumexp(w + ll[t, lab] + beta[t + 1, dst])
        if node_len is not None:
            beta[t] = np.where(t < node_len, beta[t], beta[t + 1])
    back_totals = np.array([_logsumexp(beta[0, starts[comp[starts] == c]]) for c in range(n_comp)])
    if not want_posteriors:
        return totals, back_totals, None
    arc_tot = totals[comp[src]]
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha[:T, src] + w + ll[:, lab] + beta[1:, dst] - arc_tot)
    live = np.isfinite(arc_tot)[None, :]
    if node_len is not None:
        live = live & (np.arange(T)[:, None] < node_len[src][None, :])
    occ = np.where(live, occ, 0.0)
    L = ll.shape[1]
    flat = (np.arange(T)[:, None] * L + lab[None, :]).ravel()
    post = np.bincount(flat, weights=occ.ravel(), minlength=T * L).reshape(T, L)
    return totals, back_totals, post


def forward_backward(g: StateGraph, loglikes: np.ndarray) -> FBResult:
    ll = np.asarray(loglikes, dtype=np.float64)
    if ll.ndim != 2 or ll.shape[1] != g.num_states:
        raise GraphError(f"loglikes must be (T, {g.num_states})")
    if not np.all(np.isfinite(ll)):
        raise GraphError("loglikes must be finite")
    comp = np.zeros(g.num_nodes, dtype=np.int64)
    tot, btot, post = _forward_backward_arrays(g.src, g.dst, g.label, g.weight, g.num_nodes,
                                               np.array([g.start]), g.final, ll, comp, 1)
    if not np.isfinite(tot[0]):
        raise GraphError("no surviving path: total log-probability is -inf")
    return FBResult(float(tot[0]), post, float(btot[0]))


def forward_backward_batch(graphs, loglikes: np.ndarray, lengths=None):
    """Independent forward-backward on B graphs with loglikes (B, T, S) in one sweep.

    ``lengths`` gives each member's number of valid frames (frames past it are ignored).
    Returns (totals (B,), posteriors (B, T, S)). Totals of graphs without a surviving
    path are -inf and their posteriors are zero.
    """
    ll = np.asarray(loglikes, dtype=np.float64)
    B, T, S = ll.shape
    src, dst, lab, w, final, comp, starts = [], [], [], [], [], [], []
    off = 0
    for b, g in enumerate(graphs):
        src.append(g.src + off)
        dst.append(g.dst + off)
        lab.append(g.label + b * S)
        w.append(g.weight)
        final.append(g.final)
        comp.append(np.full(g.num_nodes, b))
        starts.append(g.start + off)
        off += g.num_nodes
    flat_ll = ll.transpose(1, 0, 2).reshape(T, B * S)
    tot, _, post = _forward_backward_arrays(np.concatenate(src), np.concatenate(dst), np.concatenate(lab),
                                            np.concatenate(w), off, np.array(starts), np.concatenate(final),
                                            flat_ll, np.concatenate(comp), B, lengths=lengths)
    return tot, post.reshape(T, B, S).transpose(1, 0, 2)


def viterbi_best_path(g: StateGraph, loglikes: np.ndarray):
    """Max-weight path. Returns (state per frame, score, arc index per frame)."""
    ll = np.asarray(loglikes, dtype=np.float64)
    T = ll.shape[0]
    by_dst = _Segments(g.dst, g.num_nodes)
    delta = np.full(g.num_nodes, NEG_INF)
    delta[g.start] = 0.0
    back = np.empty((T, g.num_nodes), dtype=np.int64)
    for t in range(T):
        delta, back[t] = by_dst.argmax(delta[g.src] + g.weight + ll[t, g.label])
    end = delta + g.final
    node = int(np.argmax(end))
    score = float(end[node])
    if not np.isfinite(score):
        raise GraphError("no path through the graph")
    arcs = np.empty(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        arcs[t] = back[t, node]
        node = int(g.src[arcs[t]])
    return g.label[arcs].copy(), score, arcs
