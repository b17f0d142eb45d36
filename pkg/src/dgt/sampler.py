"""Personalized PageRank by local push and target/context node selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Edge, TemporalUnionGraph, canon


@dataclass
class SparsePPR:
    entries: dict[int, float]
    residuals: dict[int, float]
    alpha: float
    epsilon: float
    pushes: int = 0

    def dense(self, num_nodes: int) -> np.ndarray:
        out = np.zeros(num_nodes)
        for k, v in self.entries.items():
            out[k] = v
        return out


@dataclass
class BatchSpec:
    targets: list[int]
    contexts: list[int]
    K: int = field(default=0)

    def __post_init__(self):
        if set(self.targets) & set(self.contexts):
            raise ValueError("contexts must be disjoint from targets")
        if len(set(self.targets)) != len(self.targets) or len(set(self.contexts)) != len(self.contexts):
            raise ValueError("duplicate node in batch")


def approx_ppr(g: TemporalUnionGraph, source: int, alpha: float = 0.15,
               epsilon: float = 1e-4) -> SparsePPR:
    """Forward push from ``source``.

    A node is pushed while its residual is at least ``epsilon * deg / vol``,
    ``vol`` being the total degree of the graph. This keeps the leftover
    residual mass, which is exactly the L1 gap to the true PPR vector, below
    ``epsilon``. All nodes over threshold are pushed together each round.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    deg = g.degree().astype(np.float64)
    if deg[source] == 0:
        return SparsePPR({source: 1.0}, {}, alpha, epsilon)
    n = g.num_nodes
    limit = deg * (epsilon / deg.sum())
    owner = np.repeat(np.arange(n), np.diff(g.indptr))
    p = np.zeros(n)
    r = np.zeros(n)
    r[source] = 1.0
    pushes = 0
    while True:
        active = (deg > 0) & (r >= limit)
        if not active.any():
            break
        pushes += int(active.sum())
        ra = np.where(active, r, 0.0)
        p += alpha * ra
        r -= ra
        share = (1.0 - alpha) * np.divide(ra, deg, out=np.zeros(n), where=deg > 0)
        r += np.bincount(g.indices, weights=share[owner], minlength=n)
    entries = {int(k): float(p[k]) for k in np.flatnonzero(p)}
    residuals = {int(k): float(r[k]) for k in np.flatnonzero(r)}
    return SparsePPR(entries, residuals, alpha, epsilon, pushes)


def joint_ppr(g: TemporalUnionGraph, targets, alpha: float = 0.15,
              epsilon: float = 1e-4) -> np.ndarray:
    """Sum of the per-target PPR vectors, accumulated in target order."""
    targets = list(targets)
    if not targets:
        raise ValueError("targets must be non-empty")
    scores = np.zeros(g.num_nodes)
    for t in targets:
        for k, v in approx_ppr(g, int(t), alpha, epsilon).entries.items():
            scores[k] += v
    return scores


def _candidates(scores, targets) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.ones(len(scores), dtype=bool)
    cand[np.asarray(list(targets), dtype=np.int64)] = False
    cand &= scores > 0
    ids = np.flatnonzero(cand)
    return ids, scores[ids]


def select_context_topk(scores, targets, K: int) -> BatchSpec:
    """Top-``K`` non-target nodes by score, ties broken by smaller node id."""
    if K < 0:
        raise ValueError("K must be non-negative")
    ids, s = _candidates(scores, targets)
    order = np.lexsort((ids, -s))
    return BatchSpec(list(map(int, targets)), [int(i) for i in ids[order[:K]]], K)


def sample_context_random(scores, targets, K: int, seed) -> BatchSpec:
    """``K`` draws without replacement, each proportional to the remaining scores."""
    if K < 0:
        raise ValueError("K must be non-negative")
    ids, s = _candidates(scores, targets)
    if K > 0 and len(ids) == 0:
        raise ValueError("no positive-score candidate to sample from")
    rng = np.random.default_rng(seed)
    w = s.copy()
    picked = []
    for _ in range(min(K, len(ids))):
        k = int(rng.choice(len(ids), p=w / w.sum()))
        picked.append(int(ids[k]))
        w[k] = 0.0
    return BatchSpec(list(map(int, targets)), picked, K)


def sample_targets_for_links(edges, num_nodes: int, num_pos: int, neg_ratio: int, seed,
                             exclude=()) -> tuple[list[Edge], list[Edge], list[int]]:
    """Uniform positive links, uniform non-links, and the nodes they touch.

    ``edges`` is a snapshot edge collection (or a union graph). Pairs in
    ``exclude`` are used neither as positives nor as negatives.
    """
    if isinstance(edges, TemporalUnionGraph):
        edge_set = set(edges.edge_list())
    else:
        edge_set = {canon(*e[:2]) for e in edges}
    excluded = {canon(*e) for e in exclude}
    pool = sorted(edge_set - excluded)
    if len(pool) < num_pos:
        raise ValueError(f"graph has {len(pool)} usable edges, need {num_pos}")
    num_neg = num_pos * neg_ratio
    total_pairs = num_nodes * (num_nodes - 1) // 2
    free = total_pairs - len(edge_set) - len(excluded - edge_set)
    if free < num_neg:
        raise ValueError(f"only {free} non-edges available, need {num_neg}")
    rng = np.random.default_rng(seed)
    pos = [pool[i] for i in sorted(rng.choice(len(pool), size=num_pos, replace=False))]
    neg: list[Edge] = []
    seen: set[Edge] = set()
    while len(neg) < num_neg:
        u, v = (int(x) for x in rng.integers(0, num_nodes, size=2))
        if u == v:
            continue
        e = canon(u, v)
        if e in edge_set or e in excluded or e in seen:
            continue
        seen.add(e)
        neg.append(e)
    targets = sorted({n for e in pos + neg for n in e})
    return pos, neg, targets
