"""Slow, obviously-correct reference implementations used by the tests."""

import itertools

import numpy as np

from wavemotif.roadgraph import MOTIF_TEMPLATES, DirectedRoadGraph


def random_graph(rng, n, density):
    """Directed graph with each ordered pair present with probability ``density``."""
    a = (rng.random((n, n)) < density).astype(int)
    np.fill_diagonal(a, 0)
    return DirectedRoadGraph.from_adjacency(a)


def brute_force_motifs(graph):
    """Per-class edge participation by testing every triple against every relabelled template."""
    n = graph.node_count
    a = graph.adjacency
    counts = {k: np.zeros((n, n), dtype=np.int64) for k in MOTIF_TEMPLATES}
    for triple in itertools.combinations(range(n), 3):
        induced = {(u, v) for u in triple for v in triple if u != v and a[u, v]}
        for k, template in MOTIF_TEMPLATES.items():
            for perm in itertools.permutations(triple):
                if {(perm[u], perm[v]) for u, v in template} == induced:
                    for u, v in induced:
                        counts[k][u, v] += 1
                    break
    return counts


def dense_cheb_filter(x, theta, lap):
    """``sum_k T_k(L) x theta_k`` with each ``T_k(L)`` formed as a dense matrix first."""
    n = lap.shape[0]
    mats = [np.eye(n), lap]
    while len(mats) < theta.shape[0]:
        mats.append(2 * lap @ mats[-1] - mats[-2])
    return sum(mats[k] @ x @ theta[k] for k in range(theta.shape[0]))


def lstm_step(x, h, c, wx, wh, b):
    """One LSTM step written gate by gate with explicit sigmoids."""
    hid = h.shape[-1]
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    z = x @ wx + h @ wh + b
    i = sig(z[:hid])
    f = sig(z[hid:2 * hid])
    o = sig(z[2 * hid:3 * hid])
    g = np.tanh(z[3 * hid:])
    c = f * c + i * g
    return o * np.tanh(c), c
