"""Link-prediction, temporal-reconstruction and multi-view losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .graph import Edge, GraphViews
from .model import ModelConfig, ModelParams, decode, encode_batch, forward
from .sampler import BatchSpec
from .tensor import Tensor


@dataclass
class LossReport:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)


@dataclass
class LinkBatch:
    """Targets/contexts plus labelled pairs for one prediction step."""
    batch: BatchSpec
    pos: list[Edge]
    neg: list[Edge]


def link_pred_loss(x: Tensor, pos: Sequence[Edge], neg: Sequence[Edge],
                   row_of: dict[int, int] | None = None) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(x_i . x_j)`` over positive and negative pairs.

    Pair entries are node ids, mapped to rows of ``x`` through ``row_of``
    (identity when omitted).
    """
    n = len(pos) + len(neg)
    if n == 0:
        raise ValueError("link_pred_loss needs at least one pair")
    pairs = list(pos) + list(neg)
    if row_of is not None:
        pairs = [(row_of[i], row_of[j]) for i, j in pairs]
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    z = (tn.gather_rows(x, pairs[:, 0]) * tn.gather_rows(x, pairs[:, 1])).sum(axis=1)
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    sign = np.concatenate([-np.ones(len(pos)), np.ones(len(neg))])
    return tn.softplus(z * Tensor(sign)).sum() * (1.0 / n)


def view_loss(h: Tensor, h_alt: Tensor) -> Tensor:
    """Symmetric squared distance with the opposite view held fixed in each term."""
    if h.shape != h_alt.shape:
        raise ValueError(f"view shapes differ: {h.shape} vs {h_alt.shape}")
    n = float(h.data.size)
    a = tn.sq_frobenius(h - tn.stop_grad(h_alt))
    b = tn.sq_frobenius(tn.stop_grad(h) - h_alt)
    return (a + b) * (1.0 / n)


def _target_pairs_at(views: GraphViews, targets: list[int], t: int, neg_ratio: int,
                     rng: np.random.Generator) -> tuple[list[Edge], list[Edge]]:
    ts = sorted(targets)
    iu, ju = np.triu_indices(len(ts), k=1)
    u, v = np.asarray(ts)[iu], np.asarray(ts)[ju]
    eid = views.union.edge_ids(u, v)
    present = np.zeros(len(u), dtype=bool)
    hit = eid >= 0
    present[hit] = views.union.exists[eid[hit], t - 1]
    pos = [(int(a), int(b)) for a, b in zip(u[present], v[present])]
    absent = np.flatnonzero(~present)
    k = min(len(absent), neg_ratio * len(pos))
    pick = np.sort(rng.choice(len(absent), size=k, replace=False)) if k else []
    neg = [(int(u[absent[i]]), int(v[absent[i]])) for i in pick]
    return pos, neg


def recon_loss(params: ModelParams, cfg: ModelConfig, views: GraphViews, batch: BatchSpec,
               neg_ratio: int, seed, train: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, list[tuple[int, list, list]]]:
    """Sum over snapshots of the loss for rebuilding ``G_t`` with step ``t`` hidden.

    Step ``t`` is masked in the temporal encoding and edges seen only at ``t``
    are dropped from the distance graph. Returns the loss and the
    ``(t, pos, neg)`` pairs each term used.
    """
    T = views.union.num_steps
    if T < 2:
        raise ValueError("reconstruction needs at least two snapshots")
    pair_rng = np.random.default_rng(seed)
    row_of = {n: i for i, n in enumerate(batch.targets)}
    total, terms = None, []
    for t in range(1, T + 1):
        pos, neg = _target_pairs_at(views, batch.targets, t, neg_ratio, pair_rng)
        if not pos and not neg:
            continue
        enc = encode_batch(views.without(t), batch.targets, batch.contexts, cfg)
        h_bar, _ = forward(params, cfg, enc, train, rng)
        term = link_pred_loss(decode(params, h_bar), pos, neg, row_of)
        total = term if total is None else total + term
        terms.append((t, pos, neg))
    if total is None:
        total = Tensor(0.0)
    return total, terms


def pretrain_loss(params: ModelParams, cfg: ModelConfig, views: GraphViews, batch: BatchSpec,
                  alt_batch: BatchSpec, gamma: float, neg_ratio: int, seed,
                  train: bool = False, rng: np.random.Generator | None = None) -> LossReport:
    if list(batch.targets) != list(alt_batch.targets):
        raise ValueError("both views must share the same target list")
    recon, terms = recon_loss(params, cfg, views, batch, neg_ratio, seed, train, rng)
    full = views.full()
    h, _ = forward(params, cfg, encode_batch(full, batch.targets, batch.contexts, cfg), train, rng)
    h_alt, _ = forward(params, cfg, encode_batch(full, alt_batch.targets, alt_batch.contexts, cfg),
                       train, rng)
    view = view_loss(h, h_alt)
    total = recon + view * gamma if gamma else recon
    return LossReport(total, {"recon": recon.item(), "view": view.item()},
                      {"positives": sum(len(p) for _, p, _ in terms),
                       "negatives": sum(len(n) for _, _, n in terms)})


def finetune_loss(params: ModelParams, cfg: ModelConfig, views: GraphViews,
                  batch_fn: Callable[[int], LinkBatch], train: bool = False,
                  rng: np.random.Generator | None = None) -> LossReport:
    """Sum over prefixes ``t = 1..T-1`` of predicting ``E_{t+1}`` from ``G_1..G_t``.

    ``batch_fn(t)`` supplies the targets, contexts and labelled pairs of step ``t + 1``.
    """
    T = views.union.num_steps
    if T < 2:
        raise ValueError("fine-tuning needs at least two snapshots")
    total, n_pos, n_neg = None, 0, 0
    for t in range(1, T):
        lb = batch_fn(t)
        enc = encode_batch(views.prefix(t), lb.batch.targets, lb.batch.contexts, cfg)
        h, _ = forward(params, cfg, enc, train, rng)
        row_of = {n: i for i, n in enumerate(lb.batch.targets)}
        term = link_pred_loss(h, lb.pos, lb.neg, row_of)
        total = term if total is None else total + term
        n_pos += len(lb.pos)
        n_neg += len(lb.neg)
    return LossReport(total, {"link_pred": total.item()}, {"positives": n_pos, "negatives": n_neg})
