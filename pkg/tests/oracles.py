"""Brute-force references used by the tests: exhaustive path enumeration and finite differences."""

import itertools

import numpy as np

from fdcae_lab.graph import StateGraph


def enumerate_paths(g: StateGraph, T: int):
    """Yield (arc index tuple, graph weight) for every start->final path of exactly T arcs."""
    out_arcs = [[] for _ in range(g.num_nodes)]
    for a in range(g.num_arcs):
        out_arcs[g.src[a]].append(a)

    def rec(node, depth, arcs, w):
        if depth == T:
            if np.isfinite(g.final[node]):
                yield tuple(arcs), w + g.final[node]
            return
        for a in out_arcs[node]:
            arcs.append(a)
            yield from rec(g.dst[a], depth + 1, arcs, w + g.weight[a])
            arcs.pop()

    yield from rec(g.start, 0, [], 0.0)


def path_scores(g: StateGraph, ll: np.ndarray):
    T = ll.shape[0]
    for arcs, w in enumerate_paths(g, T):
        labels = g.label[list(arcs)]
        yield arcs, w + float(ll[np.arange(T), labels].sum())


def brute_log_total(g, ll):
    scores = np.array([s for _, s in path_scores(g, ll)])
    if not len(scores):
        return -np.inf
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def brute_posteriors(g, ll):
    T, S = ll.shape
    items = list(path_scores(g, ll))
    scores = np.array([s for _, s in items])
    p = np.exp(scores - scores.max())
    p /= p.sum()
    post = np.zeros((T, S))
    for (arcs, _), pk in zip(items, p):
        post[np.arange(T), g.label[list(arcs)]] += pk
    return post


def brute_best(g, ll):
    best = None
    for arcs, s in path_scores(g, ll):
        if best is None or s > best[1]:
            best = (arcs, s)
    return best


def random_graph(rng, max_states=5, max_nodes=6, arc_prob=0.4) -> StateGraph:
    """Random epsilon-free acceptor with at least one start->final path."""
    while True:
        S = int(rng.integers(1, max_states + 1))
        N = int(rng.integers(2, max_nodes + 1))
        src, dst = np.nonzero(rng.random((N, N)) < arc_prob)
        if not len(src):
            continue
        lab = rng.integers(0, S, size=len(src))
        w = rng.normal(0, 1, size=len(src))
        final = np.where(rng.random(N) < 0.5, rng.normal(0, 1, N), -np.inf)
        try:
            return StateGraph(N, src, dst, lab, w, 0, final, S)
        except ValueError:
            continue


def has_path_of_length(g, T):
    return next(enumerate_paths(g, T), None) is not None


def numeric_grad(f, x, coords, eps=1e-6):
    """Central differences of scalar f at the given flat coordinates of x (modified in place)."""
    flat = x.reshape(-1)
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def all_phone_sequences(phones, max_len):
    for L in range(1, max_len + 1):
        yield from itertools.product(phones, repeat=L)
