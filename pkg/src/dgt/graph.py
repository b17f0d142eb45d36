"""Snapshot sequences, the temporal-union graph and pairwise encoding indices."""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

Edge = tuple[int, int]

MASKED = 0  # temporal index meaning "time-step hidden"; real indices are 1..2T

_PHASE: contextvars.ContextVar[str] = contextvars.ContextVar("snapshot_access_phase", default="")


def canon(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@contextlib.contextmanager
def access_phase(name: str) -> Iterator[None]:
    """Tag snapshot reads made inside the block (see ``SnapshotSequence.watch``)."""
    token = _PHASE.set(name)
    try:
        yield
    finally:
        _PHASE.reset(token)


class SnapshotSequence:
    """Undirected weighted snapshots ``G_1..G_T`` over nodes ``0..num_nodes-1``.

    Each snapshot accepts a mapping ``(u, v) -> weight`` or an iterable of
    ``(u, v)`` / ``(u, v, w)`` tuples; repeated pairs have their weights summed.
    Time-steps are 1-based.
    """

    def __init__(self, num_nodes: int, snapshots: Sequence[Mapping[Edge, int] | Iterable]):
        if num_nodes < 1:
            raise ValueError("num_nodes must be positive")
        if len(snapshots) < 1:
            raise ValueError("a snapshot sequence needs at least one time-step")
        self.num_nodes = int(num_nodes)
        self._snaps: tuple[dict[Edge, int], ...] = tuple(self._normalize(s) for s in snapshots)
        self._watchers: list[list[tuple[int, str]]] = []

    def _normalize(self, snap) -> dict[Edge, int]:
        items = snap.items() if isinstance(snap, Mapping) else (
            ((e[0], e[1]), e[2] if len(e) > 2 else 1) for e in snap)
        out: dict[Edge, int] = {}
        for (u, v), w in items:
            u, v, w = int(u), int(v), int(w)
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise ValueError(f"edge ({u}, {v}) outside node range [0, {self.num_nodes})")
            if w <= 0:
                raise ValueError(f"edge ({u}, {v}) has non-positive weight {w}")
            e = canon(u, v)
            out[e] = out.get(e, 0) + w
        return dict(sorted(out.items()))

    @property
    def num_steps(self) -> int:
        return len(self._snaps)

    T = num_steps

    def edges(self, t: int) -> dict[Edge, int]:
        """Edge -> weight map of snapshot ``t`` (1-based)."""
        if not 1 <= t <= self.num_steps:
            raise IndexError(f"time-step {t} outside [1, {self.num_steps}]")
        for w in self._watchers:
            w.append((t, _PHASE.get()))
        return self._snaps[t - 1]

    def edge_set(self, t: int) -> set[Edge]:
        return set(self.edges(t))

    def prefix(self, k: int) -> "SnapshotSequence":
        """The first ``k`` snapshots; reads nothing past ``k``."""
        if not 1 <= k <= self.num_steps:
            raise IndexError(f"prefix length {k} outside [1, {self.num_steps}]")
        return SnapshotSequence(self.num_nodes, [self.edges(t) for t in range(1, k + 1)])

    @contextlib.contextmanager
    def watch(self) -> Iterator[list[tuple[int, str]]]:
        """Record every ``(t, phase)`` read made through :meth:`edges`."""
        log: list[tuple[int, str]] = []
        self._watchers.append(log)
        try:
            yield log
        finally:
            self._watchers.remove(log)

    def __eq__(self, other):
        return (isinstance(other, SnapshotSequence) and self.num_nodes == other.num_nodes
                and self._snaps == other._snaps)

    def __repr__(self):
        sizes = [len(s) for s in self._snaps]
        return f"SnapshotSequence(num_nodes={self.num_nodes}, T={self.num_steps}, edges={sizes})"


class TemporalUnionGraph:
    """Deduplicated union of all snapshot edges with per-edge existence bits.

    ``edges`` is an ``(E, 2)`` array sorted lexicographically with ``u < v``;
    ``exists[e, t-1]`` says whether edge ``e`` is in ``G_t``.
    """

    def __init__(self, num_nodes: int, edges: np.ndarray, exists: np.ndarray):
        self.num_nodes = num_nodes
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.exists = np.asarray(exists, dtype=bool)
        if self.exists.ndim != 2 or len(self.exists) != len(self.edges):
            raise ValueError(f"exists must be (E, T) with E={len(self.edges)}, got {self.exists.shape}")
        self.num_steps = self.exists.shape[1]
        self.keys = self.edges[:, 0] * num_nodes + self.edges[:, 1]
        if len(self.keys) > 1 and np.any(np.diff(self.keys) <= 0):
            raise ValueError("union edges must be unique and sorted")
        # CSR adjacency, neighbors sorted ascending
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((dst, src))
        self.indices = dst[order]
        self.indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(self.indptr, src + 1, 1)
        self.indptr = np.cumsum(self.indptr)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def bitmask(self, e: int) -> int:
        """Existence of edge ``e`` as an int with bit ``t-1`` set for each ``t``."""
        return sum(1 << i for i in np.flatnonzero(self.exists[e]))

    def edge_ids(self, u, v) -> np.ndarray:
        """Edge index per pair, or -1 where the pair is not a union edge."""
        u, v = np.asarray(u, dtype=np.int64), np.asarray(v, dtype=np.int64)
        keys = np.minimum(u, v) * self.num_nodes + np.maximum(u, v)
        if not len(self.keys):
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        hit = (self.keys[pos] == keys) & (u != v)
        return np.where(hit, pos, -1)

    def has_edge(self, u: int, v: int) -> bool:
        return bool(self.edge_ids(u, v) >= 0)

    def edge_list(self) -> list[Edge]:
        return [tuple(map(int, e)) for e in self.edges]

    def _subset(self, keep: np.ndarray) -> "TemporalUnionGraph":
        return TemporalUnionGraph(self.num_nodes, self.edges[keep], self.exists[keep])

    def without_step(self, t: int) -> "TemporalUnionGraph":
        """Drop edges that exist at ``t`` and at no other time-step."""
        col = self.exists[:, t - 1]
        only_t = col & (self.exists.sum(axis=1) == 1)
        return self._subset(~only_t)

    def up_to(self, t: int) -> "TemporalUnionGraph":
        """Union of ``G_1..G_t`` (existence bits beyond ``t`` dropped)."""
        ex = self.exists[:, :t]
        keep = ex.any(axis=1)
        return TemporalUnionGraph(self.num_nodes, self.edges[keep], ex[keep])

    def with_edge(self, u: int, v: int) -> "TemporalUnionGraph":
        e = canon(u, v)
        if self.has_edge(*e):
            return self
        edges = np.vstack([self.edges, [e]])
        exists = np.vstack([self.exists, np.ones((1, self.num_steps), bool)])
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        return TemporalUnionGraph(self.num_nodes, edges[order], exists[order])


def build_union(s: SnapshotSequence) -> TemporalUnionGraph:
    bits: dict[Edge, list[int]] = {}
    for t in range(1, s.num_steps + 1):
        for e in s.edges(t):
            bits.setdefault(e, []).append(t)
    edges = sorted(bits)
    exists = np.zeros((len(edges), s.num_steps), dtype=bool)
    for i, e in enumerate(edges):
        exists[i, np.asarray(bits[e]) - 1] = True
    return TemporalUnionGraph(s.num_nodes, np.array(edges, dtype=np.int64).reshape(-1, 2), exists)


def temporal_index(g: TemporalUnionGraph, e: Edge, t: int, masked_t: int | None = None) -> int:
    """Temporal connection index: ``2t`` if ``e`` is present at ``t``, else ``2t-1``."""
    if not 1 <= t <= g.num_steps:
        raise IndexError(f"time-step {t} outside [1, {g.num_steps}]")
    if masked_t is not None and t == masked_t:
        return MASKED
    eid = int(g.edge_ids(*e))
    present = eid >= 0 and bool(g.exists[eid, t - 1])
    return 2 * t if present else 2 * t - 1


def bfs_distances(g: TemporalUnionGraph, source: int, d_max: int) -> np.ndarray:
    """Hop distance from ``source`` to every node, capped at ``d_max``."""
    dist = np.full(g.num_nodes, d_max, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    indptr, indices = g.indptr, g.indices
    while queue:
        u = queue.popleft()
        du = dist[u] + 1
        if du >= d_max:
            continue
        for w in indices[indptr[u]:indptr[u + 1]]:
            if dist[w] > du:
                dist[w] = du
                queue.append(w)
    return dist


def spatial_distance(u: int, v: int, g: TemporalUnionGraph, d_max: int,
                     exclude_t: int | None = None) -> int:
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    if exclude_t is not None:
        g = g.without_step(exclude_t)
    return int(bfs_distances(g, u, d_max)[v])


def perturb_edges(s: SnapshotSequence, fraction: float, seed: int,
                  pairs: Sequence[Edge] | None = None) -> SnapshotSequence:
    """Flip the membership of ``ceil(fraction * |pairs|)`` random pairs per snapshot.

    ``pairs`` defaults to every unordered node pair. Edges switched on get weight 1.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    if pairs is None:
        iu, ju = np.triu_indices(s.num_nodes, k=1)
        universe = np.stack([iu, ju], axis=1)
    else:
        universe = np.array([canon(*p) for p in pairs], dtype=np.int64).reshape(-1, 2)
    n_flip = math.ceil(fraction * len(universe) - 1e-9)
    rng = np.random.default_rng(seed)
    out = []
    for t in range(1, s.num_steps + 1):
        snap = dict(s.edges(t))
        for k in rng.choice(len(universe), size=n_flip, replace=False):
            e = (int(universe[k, 0]), int(universe[k, 1]))
            if e in snap:
                del snap[e]
            else:
                snap[e] = 1
        out.append(snap)
    return SnapshotSequence(s.num_nodes, out)


def sbm_blocks(num_nodes: int, num_blocks: int) -> np.ndarray:
    return (np.arange(num_nodes) * num_blocks) // num_nodes


def synth_dynamic_sbm(num_nodes: int, num_blocks: int, T: int, p_in: float, p_out: float,
                      persist: float, seed: int) -> SnapshotSequence:
    """Block-model snapshots where each pair keeps its state with prob. ``persist``.

    Pairs that do not persist are redrawn from the block model, so every
    snapshot has the block model as its marginal.
    """
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if not 0.0 <= persist <= 1.0:
        raise ValueError(f"persist must be in [0, 1], got {persist}")
    if not 1 <= num_blocks <= num_nodes or T < 1:
        raise ValueError("need 1 <= num_blocks <= num_nodes and T >= 1")
    rng = np.random.default_rng(seed)
    block = sbm_blocks(num_nodes, num_blocks)
    iu, ju = np.triu_indices(num_nodes, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    state = rng.random(len(prob)) < prob
    snaps = []
    for t in range(T):
        if t > 0:
            redraw = rng.random(len(prob)) >= persist
            fresh = rng.random(len(prob)) < prob
            state = np.where(redraw, fresh, state)
        snaps.append({(int(iu[k]), int(ju[k])): 1 for k in np.flatnonzero(state)})
    return SnapshotSequence(num_nodes, snaps)


# ---------------------------------------------------------------- pair encodings


@dataclass(frozen=True)
class PairEncodingIndices:
    """Per-pair temporal (``tc_index``, shape ``(P, T)``) and spatial (``sd_index``) indices.

    Pairs are the row-major grid ``rows x cols``; ``shape`` is ``(len(rows), len(cols))``.
    """
    tc_index: np.ndarray
    sd_index: np.ndarray
    d_max: int
    shape: tuple[int, int]


class EncodingView:
    """What the model may see of a dynamic graph: visible time-steps and an SPD graph.

    ``presence`` supplies existence bits for temporal indices; ``masked`` lists
    hidden time-steps; distances come from ``spd_graph``.
    """

    def __init__(self, presence: TemporalUnionGraph, num_steps: int, d_max: int,
                 masked: Iterable[int] = (), spd_graph: TemporalUnionGraph | None = None):
        if d_max < 1:
            raise ValueError("d_max must be >= 1")
        self.presence = presence
        self.num_steps = num_steps
        self.d_max = d_max
        self.masked = frozenset(int(t) for t in masked)
        self.spd_graph = presence if spd_graph is None else spd_graph
        self._dist: dict[int, np.ndarray] = {}
        vis = np.array([t not in self.masked and t <= presence.num_steps
                        for t in range(1, num_steps + 1)])
        self.visible = vis

    def distances(self, sources) -> np.ndarray:
        rows = []
        for s in np.asarray(sources, dtype=np.int64):
            s = int(s)
            d = self._dist.get(s)
            if d is None:
                d = self._dist[s] = bfs_distances(self.spd_graph, s, self.d_max)
            rows.append(d)
        return np.array(rows, dtype=np.int64).reshape(len(rows), self.presence.num_nodes)

    def pair_indices(self, rows, cols) -> PairEncodingIndices:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        u = np.repeat(rows, len(cols))
        v = np.tile(cols, len(rows))
        T = self.num_steps
        eid = self.presence.edge_ids(u, v)
        steps = np.arange(1, T + 1)
        tp = self.presence.num_steps
        present = np.zeros((len(u), T), dtype=bool)
        hit = eid >= 0
        present[hit, :min(T, tp)] = self.presence.exists[eid[hit], :min(T, tp)]
        tc = np.where(present, 2 * steps, 2 * steps - 1)
        tc = np.where(self.visible[None, :], tc, MASKED)
        sd = self.distances(rows)[:, cols].reshape(-1) if len(rows) and len(cols) else np.zeros(0, np.int64)
        return PairEncodingIndices(tc.astype(np.int64), sd, self.d_max, (len(rows), len(cols)))


class GraphViews:
    """Cached encoding views of one training sequence.

    ``full()`` sees everything, ``without(t)`` hides step ``t`` (reconstruction),
    ``prefix(t)`` sees steps ``1..t`` only (fine-tuning and evaluation).
    """

    def __init__(self, s: SnapshotSequence, num_steps: int, d_max: int):
        if num_steps < s.num_steps:
            raise ValueError("model has fewer time-steps than the sequence")
        self.seq = s
        self.union = build_union(s)
        self.num_steps = num_steps
        self.d_max = d_max
        self._cache: dict[tuple, EncodingView] = {}

    def full(self) -> EncodingView:
        return self._get(("full",), lambda: EncodingView(self.union, self.num_steps, self.d_max))

    def without(self, t: int) -> EncodingView:
        return self._get(("without", t), lambda: EncodingView(
            self.union, self.num_steps, self.d_max, masked=[t],
            spd_graph=self.union.without_step(t)))

    def prefix(self, t: int) -> EncodingView:
        if t >= self.union.num_steps and self.num_steps == self.union.num_steps:
            return self.full()
        return self._get(("prefix", t), lambda: EncodingView(
            self.union.up_to(t), self.num_steps, self.d_max,
            masked=range(t + 1, self.num_steps + 1)))

    def prefix_union(self, t: int) -> TemporalUnionGraph:
        return self.prefix(t).spd_graph

    def _get(self, key, make):
        v = self._cache.get(key)
        if v is None:
            v = self._cache[key] = make()
        return v


# ---------------------------------------------------------------- files


def write_snapshots(s: SnapshotSequence, path) -> None:
    lines = [f"nodes={s.num_nodes} steps={s.num_steps}"]
    for t in range(1, s.num_steps + 1):
        lines.extend(f"{t} {u} {v} {w}" for (u, v), w in s.edges(t).items())
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshots(path) -> SnapshotSequence:
    text = Path(path).read_text().splitlines()
    header = None
    body: list[tuple[int, int, int, int]] = []
    for lineno, line in enumerate(text, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            try:
                fields = dict(tok.split("=", 1) for tok in line.split())
                header = int(fields["nodes"]), int(fields["steps"])
            except (ValueError, KeyError):
                raise ValueError(f"{path}:{lineno}: expected header 'nodes=<N> steps=<T>'") from None
            continue
        parts = line.split()
        try:
            t, u, v, w = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 't u v w', got {line!r}") from None
        if not 1 <= t <= header[1]:
            raise ValueError(f"{path}:{lineno}: time-step {t} outside [1, {header[1]}]")
        body.append((t, u, v, w))
    if header is None:
        raise ValueError(f"{path}: empty snapshot file")
    snaps: list[list] = [[] for _ in range(header[1])]
    for t, u, v, w in body:
        snaps[t - 1].append((u, v, w))
    return SnapshotSequence(header[0], snaps)


def read_interactions(path) -> list[tuple[float, str, str]]:
    """Parse an ``epoch u v`` interaction log."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'epoch u v', got {line!r}")
        try:
            ts = float(parts[0])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
        records.append((ts, parts[1], parts[2]))
    if not records:
        raise ValueError(f"{path}: no interactions")
    return records


def _node_order(tokens: Iterable[str]) -> list[str]:
    uniq = set(tokens)
    try:
        return sorted(uniq, key=int)
    except ValueError:
        return sorted(uniq)


def window_interactions(records: Sequence[tuple[float, str, str]], *, window: float | None = None,
                        steps: int | None = None) -> tuple[SnapshotSequence, list[str]]:
    """Bucket interactions into snapshots, by fixed ``window`` length or into
    ``steps`` windows holding equal numbers of interactions.

    Repeated pairs inside a window become one edge weighted by the count.
    Returns the sequence and the original node label of each node id.
    """
    if (window is None) == (steps is None):
        raise ValueError("give exactly one of window or steps")
    recs = sorted(records, key=lambda r: r[0])
    labels = _node_order([r[1] for r in recs] + [r[2] for r in recs])
    node_id = {lab: i for i, lab in enumerate(labels)}
    if steps is not None:
        if steps < 1 or steps > len(recs):
            raise ValueError(f"cannot split {len(recs)} interactions into {steps} windows")
        bucket = np.repeat(np.arange(steps), [len(c) for c in np.array_split(np.arange(len(recs)), steps)])
    else:
        if window <= 0:
            raise ValueError("window must be positive")
        t0 = recs[0][0]
        bucket = np.array([int((r[0] - t0) // window) for r in recs])
        steps = int(bucket.max()) + 1
    snaps: list[list] = [[] for _ in range(steps)]
    for b, (_, u, v) in zip(bucket, recs):
        if u != v:
            snaps[b].append((node_id[u], node_id[v], 1))
    empty = [i + 1 for i, s in enumerate(snaps) if not s]
    if empty:
        raise ValueError(f"empty windows at time-steps {empty}")
    return SnapshotSequence(len(labels), snaps), labels
