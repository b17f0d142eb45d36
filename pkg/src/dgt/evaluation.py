"""Link-prediction evaluation: label splits, chunked embedding, logistic probe, AUC."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .graph import (Edge, EncodingView, GraphViews, SnapshotSequence, access_phase, build_union,
                    canon, perturb_edges)
from .model import ModelConfig, ModelParams, compute_bias, hop_mask

if TYPE_CHECKING:
    from .trainer import Checkpoint


# ---------------------------------------------------------------- AUC


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    # midranks handle ties
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    s_sorted = scores[order]
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- splits


@dataclass
class EvalSplit:
    t_star: int
    train_pos: list[Edge]
    train_neg: list[Edge]
    val_pos: list[Edge]
    val_neg: list[Edge]
    test_pos: list[Edge]
    test_neg: list[Edge]

    PARTS = ("train", "val", "test")

    def part(self, name: str) -> tuple[list[Edge], np.ndarray]:
        pos, neg = getattr(self, name + "_pos"), getattr(self, name + "_neg")
        return pos + neg, np.r_[np.ones(len(pos), int), np.zeros(len(neg), int)]

    def nodes(self) -> list[int]:
        return sorted({n for name in self.PARTS for e in self.part(name)[0] for n in e})

    def save(self, path) -> None:
        lines = [f"t_star={self.t_star}"]
        for name in self.PARTS:
            for label, key in ((1, "_pos"), (0, "_neg")):
                lines += [f"{name} {label} {u} {v}" for u, v in getattr(self, name + key)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "EvalSplit":
        lines = Path(path).read_text().splitlines()
        t_star = int(lines[0].split("=", 1)[1])
        parts = {f"{n}{k}": [] for n in cls.PARTS for k in ("_pos", "_neg")}
        for line in lines[1:]:
            name, label, u, v = line.split()
            parts[name + ("_pos" if label == "1" else "_neg")].append((int(u), int(v)))
        return cls(t_star, **parts)


def _partition(items: list, rng: np.random.Generator) -> tuple[list, list, list]:
    perm = [items[i] for i in rng.permutation(len(items))]
    n_train = int(round(0.2 * len(items)))
    n_val = int(round(0.2 * len(items)))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def build_split(s: SnapshotSequence, t_star: int, seed: int, new_only: bool = False) -> EvalSplit:
    """Positives = links of ``G_{t*}`` (only unseen ones with ``new_only``), an equal
    number of uniformly drawn non-links, each class partitioned 20/20/60."""
    with access_phase("split"):
        current = s.edges(t_star)
        pos = sorted(current)
        if new_only:
            seen: set[Edge] = set()
            for t in range(1, t_star):
                seen |= set(s.edges(t))
            pos = [e for e in pos if e not in seen]
            if not pos:
                raise ValueError(f"no new links at time-step {t_star}")
        n = s.num_nodes
        if n * (n - 1) // 2 - len(current) < len(pos):
            raise ValueError("not enough non-links for a balanced split")
        rng = np.random.default_rng([seed, t_star])
        neg: list[Edge] = []
        taken: set[Edge] = set()
        while len(neg) < len(pos):
            u, v = (int(x) for x in rng.integers(0, n, size=2))
            e = canon(u, v)
            if u == v or e in current or e in taken:
                continue
            taken.add(e)
            neg.append(e)
        neg.sort()
        part_rng = np.random.default_rng([seed, t_star, 1])
        ptr, pva, pte = _partition(pos, part_rng)
        ntr, nva, nte = _partition(neg, part_rng)
    split = EvalSplit(t_star, ptr, ntr, pva, nva, pte, nte)
    for name in EvalSplit.PARTS:
        _, y = split.part(name)
        if len(set(y.tolist())) < 2:
            raise ValueError(f"degenerate {name} split at t*={t_star}: need both classes")
    return split


# ---------------------------------------------------------------- chunked inference


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def embed_all_chunked(params: ModelParams, cfg: ModelConfig, view: EncodingView, node_set,
                      chunk_size: int, return_attention: bool = False):
    """Full attention over ``node_set`` evaluated one (query chunk, key chunk) block at a time.

    Equivalent to a single-tower eval-mode forward over ``node_set``. Each
    query chunk makes two passes over the key chunks: the first collects the
    softmax row max and normaliser, the second accumulates the weighted values.
    Only ``chunk_size x chunk_size`` attention blocks are ever materialised.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    nodes = np.asarray(list(node_set), dtype=np.int64)
    n, d, h, dh = len(nodes), cfg.d, cfg.num_heads, cfg.d_head
    P = {k: v.data for k, v in params.items()}
    H = P["node_embed"][nodes].copy()
    blocks = _chunks(n, chunk_size)
    attn_layers = []

    def block_logits(q, k, qs, ks):
        idx = view.pair_indices(nodes[qs], nodes[ks])
        btc, bsd = compute_bias(params, cfg, idx)
        logits = q[:, qs] @ np.swapaxes(k[:, ks], -1, -2) / math.sqrt(dh) + (btc.data + bsd.data)
        keep = hop_mask(idx, cfg)
        if keep is None:
            keep = np.ones(idx.shape, dtype=bool)
        return np.where(keep, logits, -np.inf), keep

    for l in range(cfg.num_layers):
        pre = f"layer{l}."
        X = _ln(H, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = (X @ P[pre + "wq"]).reshape(n, h, dh).transpose(1, 0, 2)
        k = (X @ P[pre + "wk"]).reshape(n, h, dh).transpose(1, 0, 2)
        v = (X @ P[pre + "wv"]).reshape(n, h, dh).transpose(1, 0, 2)
        out = np.zeros((h, n, dh))
        attn = np.zeros((h, n, n)) if return_attention else None
        for qs in blocks:
            nq = qs.stop - qs.start
            m = np.full((h, nq, 1), -np.inf)
            z = np.zeros((h, nq, 1))
            for ks in blocks:
                lg, _ = block_logits(q, k, qs, ks)
                bmax = lg.max(axis=-1, keepdims=True)
                m_new = np.maximum(m, bmax)
                safe = np.where(np.isfinite(m_new), m_new, 0.0)
                z = z * np.exp(np.where(np.isfinite(m), m - safe, -np.inf)) + np.exp(lg - safe).sum(axis=-1, keepdims=True)
                m = m_new
            safe_m = np.where(np.isfinite(m), m, 0.0)
            denom = np.where(z > 0, z, 1.0)
            for ks in blocks:
                lg, _ = block_logits(q, k, qs, ks)
                p = np.exp(lg - safe_m) / denom
                out[:, qs] += p @ v[:, ks]
                if attn is not None:
                    attn[:, qs, ks] = p
        Z = out.transpose(1, 0, 2).reshape(n, d) + H
        F = _ln(Z, P[pre + "ln2.g"], P[pre + "ln2.b"])
        H = _gelu(F @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"]) @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"] + Z
        if attn is not None:
            attn_layers.append(attn)
    return (H, attn_layers) if return_attention else H


# ---------------------------------------------------------------- probe


def edge_features(emb: np.ndarray, row_of: dict[int, int], pairs: Sequence[Edge]) -> np.ndarray:
    """Hadamard product of the two endpoint embeddings."""
    i = np.array([row_of[u] for u, _ in pairs], dtype=np.int64)
    j = np.array([row_of[v] for _, v in pairs], dtype=np.int64)
    return emb[i] * emb[j]


class LogisticProbe:
    """Unregularised logistic regression fit by full-batch gradient descent on the mean log loss."""

    def __init__(self, iterations: int = 500, lr: float = 0.1):
        self.iterations, self.lr = iterations, lr

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticProbe":
        y = np.asarray(y, dtype=np.float64)
        w, b = np.zeros(X.shape[1]), 0.0
        for _ in range(self.iterations):
            g = _sigmoid(X @ w + b) - y
            w -= self.lr * (X.T @ g) / len(y)
            b -= self.lr * g.mean()
        self.w, self.b = w, b
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        return X @ self.w + self.b


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- protocol


@dataclass
class EvalReport:
    micro_auc: float
    macro_auc: float
    per_step: dict[int, float] = field(default_factory=dict)
    new_link: "EvalReport | None" = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_step"] = {str(k): v for k, v in self.per_step.items()}
        if self.new_link is not None:
            d["new_link"] = self.new_link.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def step_scores(params: ModelParams, cfg: ModelConfig, s: SnapshotSequence, split: EvalSplit,
                chunk_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Test-split scores of a probe trained on the train split, conditioning on ``G_1..G_{t*-1}``."""
    t = split.t_star
    if t < 2:
        raise ValueError("prediction step must be >= 2")
    views = GraphViews(s.prefix(t - 1), cfg.T, cfg.d_max)
    nodes = list(range(s.num_nodes))
    emb = embed_all_chunked(params, cfg, views.full(), nodes, chunk_size)
    row_of = {u: i for i, u in enumerate(nodes)}
    Xtr_pairs, ytr = split.part("train")
    Xte_pairs, yte = split.part("test")
    probe = LogisticProbe().fit(edge_features(emb, row_of, Xtr_pairs), ytr)
    return probe.decision(edge_features(emb, row_of, Xte_pairs)), yte


def _evaluate(params, cfg, s, t_star, window, seed, chunk_size, new_only, split_dir) -> EvalReport:
    if window < 1 or t_star - window + 1 < 2:
        raise ValueError("evaluation window must lie within time-steps 2..t*")
    all_s, all_y, per_step = [], [], {}
    for t in range(t_star - window + 1, t_star + 1):
        split = None
        path = None
        if split_dir is not None:
            tag = "new" if new_only else "all"
            path = Path(split_dir) / f"split_t{t}_seed{seed}_{tag}.txt"
            if path.exists():
                split = EvalSplit.load(path)
        if split is None:
            split = build_split(s, t, seed, new_only=new_only)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                split.save(path)
        sc, y = step_scores(params, cfg, s, split, chunk_size)
        per_step[t] = auc(sc, y)
        all_s.append(sc)
        all_y.append(y)
    micro = auc(np.concatenate(all_s), np.concatenate(all_y))
    macro = float(np.mean(list(per_step.values())))
    return EvalReport(micro, macro, per_step)


def evaluate(checkpoint: "Checkpoint", s: SnapshotSequence, t_star: int, window: int = 1,
             seed: int = 0, chunk_size: int = 64, split_dir=None) -> EvalReport:
    """Micro/macro AUC over prediction steps ``t*-window+1 .. t*``."""
    return _evaluate(checkpoint.model_params(), checkpoint.config.model, s, t_star, window,
                     seed, chunk_size, False, split_dir)


def evaluate_new_links(checkpoint: "Checkpoint", s: SnapshotSequence, t_star: int,
                       window: int = 1, seed: int = 0, chunk_size: int = 64,
                       split_dir=None) -> EvalReport:
    """As :func:`evaluate` with positives restricted to links never seen before ``t*``."""
    return _evaluate(checkpoint.model_params(), checkpoint.config.model, s, t_star, window,
                     seed, chunk_size, True, split_dir)


# ---------------------------------------------------------------- noise harness


def noise_universe(s: SnapshotSequence, seed) -> list[Edge]:
    """Every pair linked at some step plus as many never-linked pairs drawn uniformly."""
    linked = build_union(s).edge_list()
    present = set(linked)
    n_free = s.num_nodes * (s.num_nodes - 1) // 2 - len(present)
    k = min(len(linked), n_free)
    rng = np.random.default_rng(seed)
    extra: set[Edge] = set()
    while len(extra) < k:
        u, v = (int(x) for x in rng.integers(0, s.num_nodes, size=2))
        if u != v and canon(u, v) not in present:
            extra.add(canon(u, v))
    return sorted(present | extra)


def noisy_history(s: SnapshotSequence, t_star: int, fraction: float, seed) -> SnapshotSequence:
    """``G_1..G_{t*-1}`` with flipped pairs; ``G_{t*}`` onward left clean for labelling."""
    past = s.prefix(t_star - 1)
    with access_phase("noise"):
        noisy = perturb_edges(past, fraction, seed, pairs=noise_universe(past, [seed, 11])) \
            if fraction > 0 else past
        tail = [dict(s.edges(t)) for t in range(t_star, s.num_steps + 1)]
    return SnapshotSequence(s.num_nodes, [dict(noisy.edges(t)) for t in range(1, t_star)] + tail)
