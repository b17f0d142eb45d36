"""Pre-training and fine-tuning loops, run configuration and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .evaluation import auc, embed_all_chunked
from .graph import GraphViews, SnapshotSequence, TemporalUnionGraph
from .model import ModelConfig, ModelParams, init_params, trainable_names
from .objectives import LinkBatch, finetune_loss, pretrain_loss
from .sampler import (BatchSpec, approx_ppr, sample_context_random, sample_targets_for_links,
                      select_context_topk)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelConfig
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    epochs_pretrain: int = 50
    epochs_finetune: int = 30
    batch_size: int = 512
    num_pos: int = 256
    neg_ratio: int = 10
    gamma: float = 1.0
    ppr_alpha: float = 0.15
    ppr_eps: float = 1e-4
    seed: int = 0
    patience: int | None = None
    steps_per_epoch: int | None = None
    finetune_steps_per_epoch: int = 1
    val_fraction: float = 0.2
    eval_chunk_size: int = 64

    def __post_init__(self):
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be non-negative")

    def to_flat(self) -> dict:
        """One flat key -> value mapping (model fields inlined)."""
        out = self.model.to_dict()
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"})
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        own = {f.name for f in fields(cls)} - {"model"}
        unknown = set(flat) - own - {f.name for f in fields(ModelConfig)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=ModelConfig.from_dict(flat), **{k: v for k, v in flat.items() if k in own})

    def hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ConfigMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    epoch: int = 0
    phase: str = "init"
    history: list[dict] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0

    def model_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.params)

    def save(self, path) -> None:
        meta = {"config_hash": self.config.hash(), "config": self.config.to_flat(),
                "epoch": self.epoch, "phase": self.phase, "history": self.history,
                "optimizer_step": self.optimizer_step, "param_names": list(self.params)}
        arrays = dict(self.params)
        arrays.update(self.optimizer)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tn.save_tensors(path, arrays, meta)

    @classmethod
    def load(cls, path, expected: TrainConfig | None = None) -> "Checkpoint":
        arrays, meta = tn.load_tensors(path)
        cfg = TrainConfig.from_flat(meta["config"])
        if cfg.hash() != meta["config_hash"]:
            raise ConfigMismatchError(f"{path}: stored config does not match its hash")
        if expected is not None and expected.hash() != meta["config_hash"]:
            raise ConfigMismatchError(f"{path}: checkpoint config {meta['config_hash']} != "
                                      f"requested {expected.hash()}")
        names = meta["param_names"]
        return cls({k: arrays[k] for k in names}, cfg, meta["epoch"], meta["phase"],
                   meta["history"], {k: v for k, v in arrays.items() if k not in names},
                   meta["optimizer_step"])


class PPRCache:
    """Per-node PPR vectors on one graph, summed in target order on demand."""

    def __init__(self, g: TemporalUnionGraph, alpha: float, eps: float):
        self.g, self.alpha, self.eps = g, alpha, eps
        self._vec: dict[int, dict[int, float]] = {}

    def joint(self, targets) -> np.ndarray:
        scores = np.zeros(self.g.num_nodes)
        for t in targets:
            e = self._vec.get(t)
            if e is None:
                e = self._vec[t] = approx_ppr(self.g, t, self.alpha, self.eps).entries
            for k, v in e.items():
                scores[k] += v
        return scores


class RunLog:
    """``metrics.csv`` plus per-epoch checkpoints under an optional run directory."""

    COLUMNS = ["phase", "epoch", "loss", "recon", "view", "link_pred", "val_metric"]

    def __init__(self, run_dir, cfg: TrainConfig):
        self.dir = None if run_dir is None else Path(run_dir)
        if self.dir is not None:
            (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.dir / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")
            path = self.dir / "metrics.csv"
            if not path.exists():
                path.write_text(",".join(self.COLUMNS) + "\n")

    def row(self, rec: dict) -> None:
        if self.dir is None:
            return
        with open(self.dir / "metrics.csv", "a", newline="") as f:
            csv.writer(f).writerow([_fmt(rec.get(c, "")) for c in self.COLUMNS])

    def checkpoint(self, ckpt: Checkpoint, name: str | None = None) -> None:
        if self.dir is not None:
            ckpt.save(self.dir / "checkpoints" / (name or f"epoch_{ckpt.epoch}.ckpt"))


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _step(params: ModelParams, names: list[str], opt: tn.Adam, loss_fn: Callable[[], object]):
    with tn.Tape() as tape:
        report = loss_fn()
    grads = tn.backward(tape, report.total, {k: params[k] for k in names})
    opt.step(params, grads)
    return report


def _adam(cfg: TrainConfig) -> tn.Adam:
    return tn.Adam(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)


def _snapshot(params, cfg, epoch, phase, history, opt) -> Checkpoint:
    return Checkpoint(params.copy_arrays(), cfg, epoch, phase, [dict(h) for h in history],
                      {k: v.copy() for k, v in opt.state_arrays().items()}, opt.step_count)


# ---------------------------------------------------------------- pre-training


def pretrain_batches(views: GraphViews, ppr: PPRCache, targets: list[int], seed) -> tuple[BatchSpec, BatchSpec]:
    """Top-K context view and a PPR-proportional alternative view of the same targets."""
    scores = ppr.joint(targets)
    K = len(targets)
    return select_context_topk(scores, targets, K), sample_context_random(scores, targets, K, seed)


def pretrain(s: SnapshotSequence, cfg: TrainConfig, run_dir=None) -> Checkpoint:
    """Self-supervised training; returns the checkpoint with the lowest validation
    reconstruction loss (epoch 0 = initial parameters)."""
    if s.num_steps < 2:
        raise ValueError("pre-training needs at least two snapshots")
    mc = cfg.model
    views = GraphViews(s, mc.T, mc.d_max)
    ppr = PPRCache(views.union, cfg.ppr_alpha, cfg.ppr_eps)
    params = init_params(mc, cfg.seed)
    names = trainable_names(params, mc)
    opt = _adam(cfg)
    runlog = RunLog(run_dir, cfg)
    N = s.num_nodes
    bs = min(cfg.batch_size, N // 2) if N > 1 else 1
    steps = cfg.steps_per_epoch or math.ceil(N / bs)

    val_rng = np.random.default_rng([cfg.seed, 7001])
    val_targets = sorted(int(x) for x in val_rng.permutation(N)[:bs])
    val_batch, _ = pretrain_batches(views, ppr, val_targets, [cfg.seed, 7002])

    def val_loss():
        from .objectives import recon_loss
        loss, _ = recon_loss(params, mc, views, val_batch, cfg.neg_ratio, [cfg.seed, 7003])
        return loss.item()

    history: list[dict] = []
    best_val = val_loss()
    history.append({"phase": "pretrain", "epoch": 0, "val_metric": best_val})
    runlog.row(history[-1])
    best = _snapshot(params, cfg, 0, "pretrain", history, opt)
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.epochs_pretrain + 1):
        sums = {"loss": 0.0, "recon": 0.0, "view": 0.0}
        for step in range(steps):
            if step % math.ceil(N / bs) == 0:
                perm = rng.permutation(N)
            chunk = perm[(step % math.ceil(N / bs)) * bs:][:bs]
            targets = sorted(int(x) for x in chunk)
            step_seed = [cfg.seed, epoch, step]
            batch, alt = pretrain_batches(views, ppr, targets, step_seed + [0])
            drop_rng = np.random.default_rng(step_seed + [1])
            rep = _step(params, names, opt, lambda: pretrain_loss(
                params, mc, views, batch, alt, cfg.gamma, cfg.neg_ratio, step_seed + [2],
                train=True, rng=drop_rng))
            sums["loss"] += rep.total.item()
            sums["recon"] += rep.components["recon"]
            sums["view"] += rep.components["view"]
        v = val_loss()
        rec = {"phase": "pretrain", "epoch": epoch, **{k: x / steps for k, x in sums.items()},
               "val_metric": v}
        history.append(rec)
        runlog.row(rec)
        if v < best_val:
            best_val = v
            best = _snapshot(params, cfg, epoch, "pretrain", history, opt)
            runlog.checkpoint(best)
    best.history = history
    runlog.checkpoint(best, "pretrain_best.ckpt")
    return best


# ---------------------------------------------------------------- fine-tuning


def validation_pairs(s: SnapshotSequence, fraction: float, seed) -> tuple[list, list]:
    """Held-out links of the last training snapshot with as many non-links."""
    T = s.num_steps
    edges = sorted(s.edges(T))
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(edges))))
    pos = [edges[i] for i in sorted(rng.choice(len(edges), size=k, replace=False))]
    present = set(edges)
    neg, seen = [], set()
    while len(neg) < k:
        u, v = (int(x) for x in rng.integers(0, s.num_nodes, size=2))
        e = (min(u, v), max(u, v))
        if u == v or e in present or e in seen:
            continue
        seen.add(e)
        neg.append(e)
    return pos, sorted(neg)


def make_link_batch_fn(views: GraphViews, cfg: TrainConfig, ppr_by_prefix: dict, seed,
                       exclude_last=()) -> Callable[[int], LinkBatch]:
    """Labelled pairs of ``E_{t+1}``, their endpoints as targets, and top-K PPR
    contexts on the ``1..t`` union."""
    s = views.seq
    T = s.num_steps

    def fn(t: int) -> LinkBatch:
        edges = s.edges(t + 1)
        excl = exclude_last if t + 1 == T else ()
        usable = len(edges) - len(set(excl) & set(edges))
        num_pos = min(cfg.num_pos, usable)
        pos, neg, targets = sample_targets_for_links(edges, s.num_nodes, num_pos, cfg.neg_ratio,
                                                     list(seed) + [t], exclude=excl)
        cache = ppr_by_prefix.get(t)
        if cache is None:
            cache = ppr_by_prefix[t] = PPRCache(views.prefix_union(t), cfg.ppr_alpha, cfg.ppr_eps)
        batch = select_context_topk(cache.joint(targets), targets, len(targets))
        return LinkBatch(batch, pos, neg)

    return fn


def validation_auc(params: ModelParams, cfg: TrainConfig, views: GraphViews, pos, neg) -> float:
    """AUC of ``x_i . x_j`` on held-out pairs of ``G_T``, conditioning on ``G_1..G_{T-1}``."""
    T = views.union.num_steps
    pairs = pos + neg
    nodes = sorted({n for e in pairs for n in e})
    emb = embed_all_chunked(params, cfg.model, views.prefix(T - 1), nodes, cfg.eval_chunk_size)
    row = {u: i for i, u in enumerate(nodes)}
    scores = [float(emb[row[u]] @ emb[row[v]]) for u, v in pairs]
    return auc(scores, [1] * len(pos) + [0] * len(neg))


def finetune(s: SnapshotSequence, cfg: TrainConfig, start: Checkpoint | None = None,
             run_dir=None) -> Checkpoint:
    """Supervised next-snapshot link prediction.

    Starts from ``start`` when given, otherwise from a fresh initialisation.
    Returns the checkpoint with the best validation AUC; stops early after
    ``cfg.patience`` epochs without improvement.
    """
    if s.num_steps < 2:
        raise ValueError("fine-tuning needs at least two snapshots")
    mc = cfg.model
    views = GraphViews(s, mc.T, mc.d_max)
    params = start.model_params() if start is not None else init_params(mc, cfg.seed)
    names = trainable_names(params, mc)
    opt = _adam(cfg)
    runlog = RunLog(run_dir, cfg)
    val_pos, val_neg = validation_pairs(s, cfg.val_fraction, [cfg.seed, 8001])
    ppr_by_prefix: dict = {}
    history = list(start.history) if start is not None else []
    best_val = validation_auc(params, cfg, views, val_pos, val_neg)
    history.append({"phase": "finetune", "epoch": 0, "val_metric": best_val})
    runlog.row(history[-1])
    best = _snapshot(params, cfg, 0, "finetune", history, opt)
    stale = 0
    for epoch in range(1, cfg.epochs_finetune + 1):
        total = 0.0
        for step in range(cfg.finetune_steps_per_epoch):
            step_seed = [cfg.seed, 9000 + epoch, step]
            fn = make_link_batch_fn(views, cfg, ppr_by_prefix, step_seed, exclude_last=val_pos + val_neg)
            drop_rng = np.random.default_rng(step_seed + [1])
            rep = _step(params, names, opt,
                        lambda: finetune_loss(params, mc, views, fn, train=True, rng=drop_rng))
            total += rep.total.item()
        v = validation_auc(params, cfg, views, val_pos, val_neg)
        rec = {"phase": "finetune", "epoch": epoch,
               "loss": total / cfg.finetune_steps_per_epoch,
               "link_pred": total / cfg.finetune_steps_per_epoch, "val_metric": v}
        history.append(rec)
        runlog.row(rec)
        if v > best_val:
            best_val, stale = v, 0
            best = _snapshot(params, cfg, epoch, "finetune", history, opt)
            runlog.checkpoint(best)
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    best.history = history
    runlog.checkpoint(best, "finetune_best.ckpt")
    return best
