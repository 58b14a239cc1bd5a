"""Phone decoding over the denominator graph and phone error rate scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..fdcae import AcousticModel, encoder_forward
from ..graph import GraphError, StateGraph, viterbi_best_path
from ..hmm import HmmTopology

log = logging.getLogger(__name__)


@dataclass
class DecodeResult:
    utt_id: str
    phones: list = field(default_factory=list)
    score: float = float("-inf")
    flagged: bool = False


def phones_from_arcs(g: StateGraph, arcs: np.ndarray, topology: HmmTopology) -> list:
    """Phone ids entered along a path: an arc starts a phone when it enters a phone's first
    state from another node (or is the path's first arc)."""
    out = []
    first = set(int(s) for s in topology.first_state)
    for t, a in enumerate(arcs):
        lab = int(g.label[a])
        if t == 0 or (lab in first and g.src[a] != g.dst[a]):
            out.append(int(topology.state_phone[lab]))
    return out


def strip_silence(phones, topology: HmmTopology) -> list:
    sil = topology.inventory.phones[0]
    names = [p if isinstance(p, str) else topology.inventory.phones[p] for p in phones]
    return [p for p in names if p != sil]


def decode_logits(utt_id: str, logits: np.ndarray, den_graph: StateGraph, topology: HmmTopology) -> DecodeResult:
    try:
        _, score, arcs = viterbi_best_path(den_graph, logits)
    except GraphError as e:
        log.warning("%s: %s; empty hypothesis", utt_id, e)
        return DecodeResult(utt_id, [], float("-inf"), True)
    return DecodeResult(utt_id, strip_silence(phones_from_arcs(den_graph, arcs, topology), topology), score)


def decode_utterance(model: AcousticModel, feats, aux, den_graph: StateGraph, topology: HmmTopology,
                     utt_id: str = "") -> DecodeResult:
    """Best denominator-graph path under the encoder's logits; the decoder is never used."""
    logits, _ = encoder_forward(model.encoder, feats, aux)
    return decode_logits(utt_id, logits, den_graph, topology)


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def phone_error_rate(hyp, ref) -> float:
    """Levenshtein distance (unit costs) over |ref|, in percent."""
    ref = list(ref)
    if not ref:
        raise ValueError("empty reference")
    return 100.0 * edit_distance(hyp, ref) / len(ref)


def corpus_per(hyps: dict, refs: dict) -> float:
    """Pooled PER: total edits over total reference length for utterances in ``refs``."""
    errors = sum(edit_distance(hyps.get(u, []), r) for u, r in refs.items())
    total = sum(len(r) for r in refs.values())
    if total == 0:
        raise ValueError("empty reference set")
    return 100.0 * errors / total
