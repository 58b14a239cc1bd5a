import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcae_lab.corpus import PhoneInventory
from fdcae_lab.graph import (GraphError, PhoneLM, StateGraph, build_denominator_graph,
                             build_numerator_graph, forward_backward, forward_backward_batch,
                             viterbi_best_path)
from fdcae_lab.hmm import HmmTopology

from oracles import (all_phone_sequences, brute_best, brute_log_total, brute_posteriors,
                     enumerate_paths, has_path_of_length, random_graph)


def small_topology(states_per_phone=1, sil_states=1):
    inv = PhoneInventory(("sil", "aa", "s"))
    return HmmTopology(inv, states_per_phone=states_per_phone, sil_states=sil_states)


def test_single_state_two_frames():
    g = StateGraph(2, [0, 1], [1, 1], [0, 0], [0.0, 0.0], 0, [-np.inf, 0.0], 1)
    res = forward_backward(g, np.array([[-1.3], [0.4]]))
    assert res.log_total == pytest.approx(-0.9, abs=1e-12)
    np.testing.assert_allclose(res.posteriors, 1.0)


def test_one_phone_numerator_is_three_state_chain():
    topo = HmmTopology(PhoneInventory())
    g = build_numerator_graph(["aa"], topo, optional_silence=False)
    states = topo.phone_states[1]
    assert g.num_nodes == 4
    self_loops = g.src == g.dst
    assert sorted(g.label[self_loops]) == list(states)
    fwd = ~self_loops
    assert sorted(g.label[fwd]) == list(states)
    assert np.isfinite(g.final).sum() == 1


def test_empty_transcript_rejected():
    with pytest.raises(GraphError):
        build_numerator_graph([], HmmTopology(PhoneInventory()))


@pytest.mark.parametrize("T", [6, 7, 8, 9])
def test_two_phone_path_count(T):
    topo = HmmTopology(PhoneInventory())
    g = build_numerator_graph(["aa", "s"], topo, optional_silence=False)
    zero = StateGraph(g.num_nodes, g.src, g.dst, g.label, np.zeros(g.num_arcs), g.start,
                      np.where(np.isfinite(g.final), 0.0, -np.inf), g.num_states)
    count = sum(1 for _ in enumerate_paths(zero, T))
    # six states, each occupying at least one frame: C(T-1, 5) ways
    from math import comb
    assert count == comb(T - 1, 5)
    res = forward_backward(zero, np.zeros((T, g.num_states)))
    assert np.exp(res.log_total) == pytest.approx(count, rel=1e-9)


def test_denominator_accepts_each_single_phone():
    inv = PhoneInventory(("sil", "aa"))
    topo = HmmTopology(inv, states_per_phone=3, sil_states=3)
    g = build_denominator_graph(PhoneLM.uniform(inv.phones), topo)
    for p in range(2):
        ll = np.full((6, topo.num_states), -50.0)
        ll[:, topo.phone_states[p]] = 0.0
        res = forward_backward(g, ll)
        assert res.log_total > -20
        assert res.posteriors[:, topo.phone_states[p]].sum() == pytest.approx(6.0, abs=1e-6)


def test_uniform_bigram_path_weight():
    topo = small_topology()
    phones = topo.inventory.phones
    lm = PhoneLM.uniform(phones)
    g = build_denominator_graph(lm, topo)
    seq = ("aa", "s", "aa")
    # each phone one frame: the only path is forced by hand-set likelihoods
    ll = np.full((3, topo.num_states), -1e4)
    for t, p in enumerate(seq):
        ll[t, topo.first_state[phones.index(p)]] = 0.0
    _, score, _ = viterbi_best_path(g, ll)
    P = len(phones)
    expected = np.log(1 / P) + 2 * np.log(1 / (P + 1)) + np.log(1 / (P + 1)) + 3 * topo.log_fwd[0]
    assert score == pytest.approx(expected, abs=1e-9)


def test_denominator_equals_sum_over_phone_sequences():
    topo = small_topology()
    phones = topo.inventory.phones
    rng = np.random.default_rng(0)
    transcripts = [list(rng.choice(phones, size=rng.integers(1, 4))) for _ in range(10)]
    lm = PhoneLM.estimate(transcripts, phones)
    den = build_denominator_graph(lm, topo)
    T = 4
    ll = rng.normal(0, 1, (T, topo.num_states))
    nums = [forward_backward(build_numerator_graph(seq, topo, lm, optional_silence=False), ll).log_total
            for seq in all_phone_sequences(phones, T)]
    m = max(nums)
    oracle = m + np.log(np.sum(np.exp(np.array(nums) - m)))
    assert forward_backward(den, ll).log_total == pytest.approx(oracle, abs=1e-9)


def test_random_graphs_match_enumeration():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 100:
        g = random_graph(rng)
        T = int(rng.integers(1, 7))
        if not has_path_of_length(g, T):
            continue
        ll = rng.normal(0, 2, (T, g.num_states))
        res = forward_backward(g, ll)
        assert res.log_total == pytest.approx(brute_log_total(g, ll), abs=1e-9)
        assert res.backward_total == pytest.approx(res.log_total, abs=1e-9)
        np.testing.assert_allclose(res.posteriors, brute_posteriors(g, ll), atol=1e-9)
        np.testing.assert_allclose(res.posteriors.sum(1), 1.0, atol=1e-6)
        states, score, arcs = viterbi_best_path(g, ll)
        best_arcs, best_score = brute_best(g, ll)
        assert score == pytest.approx(best_score, abs=1e-9)
        assert tuple(arcs) == best_arcs
        assert score <= res.log_total + 1e-12
        checked += 1


def test_no_surviving_path_raises():
    g = StateGraph(3, [0, 1], [1, 2], [0, 0], [0.0, 0.0], 0, [-np.inf, -np.inf, 0.0], 1)
    with pytest.raises(GraphError):
        forward_backward(g, np.zeros((3, 1)))
    with pytest.raises(GraphError):
        viterbi_best_path(g, np.zeros((3, 1)))


def test_invalid_graphs_rejected():
    with pytest.raises(GraphError):
        StateGraph(2, [0], [1], [3], [0.0], 0, [-np.inf, 0.0], 2)
    with pytest.raises(GraphError):
        StateGraph(2, [0], [1], [0], [0.0], 0, [-np.inf, -np.inf], 1)


def test_viterbi_tie_prefers_smallest_arc():
    # two parallel arcs with equal weight into the same node
    g = StateGraph(2, [0, 0], [1, 1], [0, 1], [0.0, 0.0], 0, [-np.inf, 0.0], 2)
    for _ in range(3):
        states, _, arcs = viterbi_best_path(g, np.zeros((1, 2)))
        assert arcs[0] == 0 and states[0] == 0


def test_text_round_trip(tmp_path):
    topo = HmmTopology(PhoneInventory())
    lm = PhoneLM.estimate([["sil", "aa", "s", "sil"]], topo.inventory.phones)
    g = build_denominator_graph(lm, topo)
    g.save(tmp_path / "den.txt")
    h = StateGraph.load(tmp_path / "den.txt")
    for k in ("src", "dst", "label", "weight", "final"):
        np.testing.assert_array_equal(getattr(g, k), getattr(h, k))
    assert PhoneLM.from_text(lm.to_text()).logprob == lm.logprob


def test_batch_matches_single():
    topo = HmmTopology(PhoneInventory())
    lm = PhoneLM.uniform(topo.inventory.phones)
    rng = np.random.default_rng(2)
    graphs = [build_numerator_graph(["sil", "aa", "sil"], topo, lm),
              build_denominator_graph(lm, topo, chunk_mode=True),
              build_numerator_graph(["s", "iy"], topo, lm, partial=True)]
    ll = rng.normal(0, 1, (3, 20, topo.num_states))
    tot, post = forward_backward_batch(graphs, ll)
    for b, g in enumerate(graphs):
        res = forward_backward(g, ll[b])
        assert tot[b] == pytest.approx(res.log_total, abs=1e-9)
        np.testing.assert_allclose(post[b], res.posteriors, atol=1e-9)


def test_batch_with_lengths_matches_truncated():
    topo = HmmTopology(PhoneInventory())
    lm = PhoneLM.uniform(topo.inventory.phones)
    rng = np.random.default_rng(4)
    graphs = [build_denominator_graph(lm, topo, chunk_mode=True),
              build_numerator_graph(["sil", "aa", "s", "sil"], topo, lm)]
    ll = rng.normal(0, 1, (2, 30, topo.num_states))
    lengths = [17, 30]
    tot, post = forward_backward_batch(graphs, ll, lengths=lengths)
    for b, g in enumerate(graphs):
        res = forward_backward(g, ll[b, :lengths[b]])
        assert tot[b] == pytest.approx(res.log_total, abs=1e-9)
        np.testing.assert_allclose(post[b, :lengths[b]], res.posteriors, atol=1e-9)
        assert np.all(post[b, lengths[b]:] == 0)


@pytest.mark.parametrize("partial", [False, True])
def test_numerator_mass_below_denominator(partial):
    topo = HmmTopology(PhoneInventory())
    phones = topo.inventory.phones
    rng = np.random.default_rng(3)
    transcripts = [["sil"] + list(rng.choice(phones[1:], 5)) + ["sil"] for _ in range(20)]
    lm = PhoneLM.estimate(transcripts, phones)
    den = build_denominator_graph(lm, topo, chunk_mode=partial)
    for tr in transcripts[:5]:
        num = build_numerator_graph(tr, topo, lm, partial=partial)
        ll = rng.normal(0, 3, (40, topo.num_states))
        assert forward_backward(num, ll).log_total <= forward_backward(den, ll).log_total + 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-20, 20))
def test_constant_shift_per_frame(seed, c):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    T = int(rng.integers(1, 6))
    if not has_path_of_length(g, T):
        return
    ll = rng.normal(0, 1, (T, g.num_states))
    a = forward_backward(g, ll)
    b = forward_backward(g, ll + c)
    assert b.log_total == pytest.approx(a.log_total + T * c, abs=1e-9)
    np.testing.assert_allclose(b.posteriors, a.posteriors, atol=1e-9)
    _, vs, _ = viterbi_best_path(g, ll)
    assert np.exp(vs - a.log_total) <= 1 + 1e-12
