"""Shared model builders and independent oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np

from blendsp import CountingNumbers, Region, RegionGraph, Sample


def chain_graph(n_vars: int, cards=None) -> RegionGraph:
    """Singletons 0..n-1 plus pairwise regions over consecutive variables."""
    cards = cards or [2] * n_vars
    regions = [Region(i, (i,), (cards[i],)) for i in range(n_vars)]
    edges = []
    rid = n_vars
    for i in range(n_vars - 1):
        regions.append(Region(rid, (i, i + 1), (cards[i], cards[i + 1])))
        edges += [(rid, i), (rid, i + 1)]
        rid += 1
    return RegionGraph(regions, edges, n_vars)


def tree_graph(rng: np.random.Generator, n_vars: int) -> RegionGraph:
    """Random spanning tree: singletons plus pairwise regions on tree edges."""
    regions = [Region(i, (i,), (2,)) for i in range(n_vars)]
    edges = []
    rid = n_vars
    for v in range(1, n_vars):
        u = int(rng.integers(0, v))
        a, b = min(u, v), max(u, v)
        regions.append(Region(rid, (a, b), (2, 2)))
        edges += [(rid, a), (rid, b)]
        rid += 1
    return RegionGraph(regions, edges, n_vars)


def loopy_graph(rng: np.random.Generator, n_vars: int, n_pairs: int) -> RegionGraph:
    """Singletons plus random distinct pairwise regions (cycles allowed)."""
    regions = [Region(i, (i,), (2,)) for i in range(n_vars)]
    pairs = set()
    while len(pairs) < n_pairs:
        a, b = sorted(rng.choice(n_vars, 2, replace=False).tolist())
        pairs.add((a, b))
    edges = []
    rid = n_vars
    for a, b in sorted(pairs):
        regions.append(Region(rid, (a, b), (2, 2)))
        edges += [(rid, a), (rid, b)]
        rid += 1
    return RegionGraph(regions, edges, n_vars)


def random_sample(
    rng: np.random.Generator,
    graph: RegionGraph,
    num_features: int,
    sample_id: int = 0,
    with_loss: bool = True,
) -> Sample:
    """Random feature/loss tables with a consistent random true assignment."""
    assign = rng.integers(0, graph.cardinalities)
    loss, feats, truth = {}, {}, {}
    for reg in graph.regions:
        strides = reg.strides()
        truth[reg.id] = int(
            sum(int(assign[v]) * int(s) for v, s in zip(reg.variables, strides))
        )
        k_count = int(rng.integers(1, min(num_features, 3) + 1))
        k_ids = rng.choice(num_features, size=k_count, replace=False)
        feats[reg.id] = {int(k): rng.normal(size=reg.label_count) for k in k_ids}
        if with_loss and len(reg.variables) == 1:
            table = rng.uniform(0.1, 2.0, reg.label_count)
            table[truth[reg.id]] = 0.0
            loss[reg.id] = table
    return Sample(graph, sample_id, loss, feats, truth)


def random_model(rng: np.random.Generator, max_vars: int = 6, num_features: int = 3):
    """A random loopy model plus one sample; small enough for enumeration."""
    n = int(rng.integers(2, max_vars + 1))
    n_pairs = int(rng.integers(1, n * (n - 1) // 2 + 1))
    graph = loopy_graph(rng, n, n_pairs)
    return graph, random_sample(rng, graph, num_features)


def brute_force_lse(values, t: float) -> float:
    """Independent high-precision log-sum-exp via math.fsum of exact exps."""
    values = [float(v) for v in values]
    if t == 0.0:
        return max(values)
    m = max(values) if t > 0 else min(values)
    return m + t * math.log(math.fsum(math.exp((v - m) / t) for v in values))


def primal_lambda_gradient_fd(graph, sample, state, w, eps, counting, h=1e-6):
    """Central finite differences of the primal in every message entry."""
    from blendsp.objective import primal_objective

    grad = np.zeros_like(state.vec)
    for j in range(state.vec.size):
        old = state.vec[j]
        state.vec[j] = old + h
        fp = primal_objective(graph, [sample], [state], w, eps, counting, 0.0)
        state.vec[j] = old - h
        fm = primal_objective(graph, [sample], [state], w, eps, counting, 0.0)
        state.vec[j] = old
        grad[j] = (fp - fm) / (2 * h)
    return grad


def ones(graph) -> CountingNumbers:
    return CountingNumbers.ones(graph)
