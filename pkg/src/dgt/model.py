"""Two-tower graph transformer with temporal-connection and spatial-distance attention biases."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as tn
from .graph import MASKED, EncodingView, PairEncodingIndices
from .tensor import Tensor

log = logging.getLogger(__name__)

TOWER_MODES = ("two-tower", "single-tower")


@dataclass
class ModelConfig:
    num_nodes: int
    T: int
    d: int = 32
    num_layers: int = 2
    num_heads: int = 4
    d_max: int = 5
    dropout_hidden: float = 0.5
    dropout_attn: float = 0.1
    tower_mode: str = "two-tower"
    attn_mask_hops: int | None = None
    use_tc: bool = True
    use_sd: bool = True

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        if self.num_layers < 1 or self.d_max < 1 or self.T < 1:
            raise ValueError("num_layers, d_max and T must be >= 1")
        if self.tower_mode not in TOWER_MODES:
            raise ValueError(f"tower_mode must be one of {TOWER_MODES}")
        if self.attn_mask_hops is not None and self.attn_mask_hops < 0:
            raise ValueError("attn_mask_hops must be non-negative")

    @property
    def d_head(self) -> int:
        return self.d // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams(dict):
    """Name -> trainable :class:`Tensor`. Both towers read the same entries."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays) -> "ModelParams":
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                    for k, v in arrays.items()})


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.d

    def normal(std, *shape):
        return rng.normal(0.0, std, size=shape)

    p = {
        "node_embed": normal(0.02, cfg.num_nodes, d),
        "tc_table": normal(1.0, 2 * cfg.T, d),
        "tc_time_logits": np.zeros(cfg.T),
        "tc_proj.w": normal(1.0 / math.sqrt(d), d, 1),
        "tc_proj.b": np.zeros(1),
        "sd_table": normal(1.0, cfg.d_max + 1, d),
        "sd_proj.w": normal(1.0 / math.sqrt(d), d, 1),
        "sd_proj.b": np.zeros(1),
    }
    for l in range(cfg.num_layers):
        pre = f"layer{l}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            p[pre + w] = normal(1.0 / math.sqrt(d), d, d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = normal(1.0 / math.sqrt(d), d, 4 * d)
        p[pre + "ffn.b1"] = np.zeros(4 * d)
        p[pre + "ffn.w2"] = normal(1.0 / math.sqrt(4 * d), 4 * d, d)
        p[pre + "ffn.b2"] = np.zeros(d)
    p["decoder.w"] = normal(1.0 / math.sqrt(d), d, d)
    p["decoder.b"] = np.zeros(d)
    # disabled encodings keep their parameters (shape-compatible checkpoints) at zero
    if not cfg.use_tc:
        p["tc_proj.w"][:] = 0.0
    if not cfg.use_sd:
        p["sd_proj.w"][:] = 0.0
    return ModelParams.from_arrays(p)


def trainable_names(params: ModelParams, cfg: ModelConfig) -> list[str]:
    frozen = set()
    if not cfg.use_tc:
        frozen |= {"tc_table", "tc_time_logits", "tc_proj.w", "tc_proj.b"}
    if not cfg.use_sd:
        frozen |= {"sd_table", "sd_proj.w", "sd_proj.b"}
    return [k for k in params if k not in frozen]


# ---------------------------------------------------------------- TC row instrumentation

_TC_READS: list[set[int]] = []


@contextlib.contextmanager
def record_tc_rows() -> Iterator[set[int]]:
    """Collect every temporal index (``1..2T``) looked up inside the block."""
    seen: set[int] = set()
    _TC_READS.append(seen)
    try:
        yield seen
    finally:
        _TC_READS.remove(seen)


def _note_tc(idx: np.ndarray) -> None:
    if _TC_READS:
        used = set(np.unique(idx).tolist())
        for s in _TC_READS:
            s |= used


# ---------------------------------------------------------------- encodings


@dataclass
class EncodedBatch:
    targets: list[int]
    contexts: list[int]
    indices: PairEncodingIndices

    @property
    def nodes(self) -> list[int]:
        return self.targets + self.contexts


def encode_batch(view: EncodingView, targets, contexts, cfg: ModelConfig) -> EncodedBatch:
    """Pair indices for the attention grid the configured tower mode needs.

    Two-tower: ``targets x contexts``; single-tower: all nodes against all nodes.
    """
    targets, contexts = [int(x) for x in targets], [int(x) for x in contexts]
    if cfg.tower_mode == "two-tower":
        idx = view.pair_indices(targets, contexts)
    else:
        nodes = targets + contexts
        idx = view.pair_indices(nodes, nodes)
    return EncodedBatch(targets, contexts, idx)


def compute_bias(params: ModelParams, cfg: ModelConfig,
                 indices: PairEncodingIndices) -> tuple[Tensor, Tensor]:
    """Scalar attention biases from the temporal and spatial lookup tables.

    The temporal embedding of a pair is a learned softmax-weighted average of
    its per-step rows over the visible steps; both encodings go through a
    ``d -> 1`` linear map. Returns two ``rows x cols`` tensors.
    """
    R, C = indices.shape
    P = R * C
    tc = indices.tc_index
    sd = indices.sd_index
    if tc.shape != (P, cfg.T):
        raise ValueError(f"tc_index shape {tc.shape} does not match ({P}, {cfg.T})")
    if P and (sd.min() < 0 or sd.max() > cfg.d_max):
        raise IndexError(f"sd index outside [0, {cfg.d_max}]")
    if P and tc.max() > 2 * cfg.T:
        raise IndexError(f"tc index outside [1, {2 * cfg.T}]")

    visible = tc != MASKED
    cols = np.flatnonzero(visible.any(axis=0)) if P else np.zeros(0, np.int64)
    if P and not visible[:, cols].all():
        raise ValueError("temporal masks must hide the same time-steps for every pair")
    if not cfg.use_tc or len(cols) == 0:
        bias_tc = Tensor(np.zeros((R, C)))
    else:
        rows = tc[:, cols].reshape(-1)
        _note_tc(rows)
        emb = tn.gather_rows(params["tc_table"], rows - 1).reshape(P, len(cols), cfg.d)
        w = tn.softmax(tn.index(params["tc_time_logits"], cols))
        avg = (emb * w.reshape(1, len(cols), 1)).sum(axis=1)
        bias_tc = (avg @ params["tc_proj.w"] + params["tc_proj.b"]).reshape(R, C)
    if not cfg.use_sd:
        bias_sd = Tensor(np.zeros((R, C)))
    else:
        e = tn.gather_rows(params["sd_table"], sd)
        bias_sd = (e @ params["sd_proj.w"] + params["sd_proj.b"]).reshape(R, C)
    return bias_tc, bias_sd


def hop_mask(indices: PairEncodingIndices, cfg: ModelConfig) -> np.ndarray | None:
    if cfg.attn_mask_hops is None:
        return None
    return indices.sd_index.reshape(indices.shape) <= cfg.attn_mask_hops


# ---------------------------------------------------------------- layers


class EmptyContextError(ValueError):
    pass


def _ln(params, key, x):
    return tn.layer_norm(x, params[key + ".g"], params[key + ".b"])


def _attend(params, pre, cfg, xq: Tensor, xk: Tensor, bias: Tensor, mask, train, rng) -> Tensor:
    """Multi-head attention of queries ``xq`` over keys/values ``xk``.

    The same pair bias is added to every head's scaled logits; head outputs are
    concatenated back to width ``d``.
    """
    h, dh = cfg.num_heads, cfg.d_head
    nq, nk = xq.shape[0], xk.shape[0]
    q = (xq @ params[pre + "wq"]).reshape(nq, h, dh)
    k = (xk @ params[pre + "wk"]).reshape(nk, h, dh)
    v = (xk @ params[pre + "wv"]).reshape(nk, h, dh)
    q, k, v = (tn.transpose(t, (1, 0, 2)) for t in (q, k, v))
    logits = (q @ tn.transpose(k)) * (1.0 / math.sqrt(dh)) + bias
    attn = tn.softmax(logits, mask)
    attn = tn.dropout(attn, cfg.dropout_attn, rng, train)
    out = tn.transpose(attn @ v, (1, 0, 2)).reshape(nq, cfg.d)
    return tn.dropout(out, cfg.dropout_hidden, rng, train)


def _ffn(params, pre, cfg, z: Tensor, train, rng) -> Tensor:
    x = _ln(params, pre + "ln2", z)
    hdn = tn.gelu(x @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"])
    out = hdn @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
    return tn.dropout(out, cfg.dropout_hidden, rng, train) + z


def two_tower_layer(params: ModelParams, layer: int, h_tgt: Tensor, h_ctx: Tensor,
                    bias_tgt_view: Tensor, bias_ctx_view: Tensor, cfg: ModelConfig,
                    mask_tgt=None, mask_ctx=None, train: bool = False,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Targets attend to contexts and contexts to targets, with shared weights.

    ``bias_tgt_view`` is ``|tgt| x |ctx|``; ``bias_ctx_view`` is its transpose.
    """
    if h_ctx.shape[0] == 0 or h_tgt.shape[0] == 0:
        raise EmptyContextError("two-tower attention needs non-empty target and context sets")
    pre = f"layer{layer}."
    x_tgt = _ln(params, pre + "ln1", h_tgt)
    x_ctx = _ln(params, pre + "ln1", h_ctx)
    z_ctx = _attend(params, pre, cfg, x_ctx, x_tgt, bias_ctx_view, mask_ctx, train, rng) + h_ctx
    z_tgt = _attend(params, pre, cfg, x_tgt, x_ctx, bias_tgt_view, mask_tgt, train, rng) + h_tgt
    return _ffn(params, pre, cfg, z_tgt, train, rng), _ffn(params, pre, cfg, z_ctx, train, rng)


def single_tower_layer(params: ModelParams, layer: int, h: Tensor, bias: Tensor,
                       cfg: ModelConfig, mask=None, train: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
    pre = f"layer{layer}."
    x = _ln(params, pre + "ln1", h)
    z = _attend(params, pre, cfg, x, x, bias, mask, train, rng) + h
    return _ffn(params, pre, cfg, z, train, rng)


def _residual_only_layer(params, layer, h, cfg, train, rng):
    return _ffn(params, f"layer{layer}.", cfg, h, train, rng)


def forward(params: ModelParams, cfg: ModelConfig, batch: EncodedBatch, train: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Final-layer target and context representations."""
    if train and rng is None and (cfg.dropout_attn > 0 or cfg.dropout_hidden > 0):
        raise ValueError("training-mode forward with dropout needs an rng")
    nt = len(batch.targets)
    bias_tc, bias_sd = compute_bias(params, cfg, batch.indices)
    bias = bias_tc + bias_sd
    mask = hop_mask(batch.indices, cfg)
    if cfg.tower_mode == "single-tower":
        h = tn.gather_rows(params["node_embed"], batch.nodes)
        for l in range(cfg.num_layers):
            h = single_tower_layer(params, l, h, bias, cfg, mask, train, rng)
        return h[:nt], h[nt:]

    h_tgt = tn.gather_rows(params["node_embed"], batch.targets)
    h_ctx = tn.gather_rows(params["node_embed"], batch.contexts)
    if not batch.contexts:
        log.warning("empty context set; running residual-only layers")
        for l in range(cfg.num_layers):
            h_tgt = _residual_only_layer(params, l, h_tgt, cfg, train, rng)
        return h_tgt, h_ctx
    bias_t = tn.transpose(bias)
    mask_t = None if mask is None else mask.T
    for l in range(cfg.num_layers):
        h_tgt, h_ctx = two_tower_layer(params, l, h_tgt, h_ctx, bias, bias_t, cfg,
                                       mask, mask_t, train, rng)
    return h_tgt, h_ctx


def decode(params: ModelParams, h: Tensor) -> Tensor:
    """Linear structure decoder used by the reconstruction objective."""
    return h @ params["decoder.w"] + params["decoder.b"]
