"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
op whose inputs require gradients appends a node to it; :func:`backward` walks
the nodes in reverse insertion order.

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss, {"w": w})
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

MASK_SENTINEL = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]


_TAPES: list[Tape] = []


def _emit(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind}: non-finite values in output")
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(Node(kind, out, inputs, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _emit("log", y, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data
    y = np.logaddexp(0.0, x)
    return _emit("softplus", y, (a,), lambda g: (g * _sigmoid(x),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def grad(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _emit("gelu", y, (a,), grad)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        y = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from None

    def grad(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", y, (a, b), grad)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    return _emit("reshape", y, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(a: Tensor, key) -> Tensor:
    """Basic or fancy indexing; the backward scatters with accumulation."""
    y = a.data[key]

    def grad(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _emit("index", np.array(y, dtype=np.float64), (a,), grad)


def gather_rows(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    return _emit_gather(table, idx)


def _emit_gather(table: Tensor, idx: np.ndarray) -> Tensor:
    def grad(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("gather_rows", table.data[idx], (table,), grad)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(y), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def sq_frobenius(a: Tensor) -> Tensor:
    return _emit("sq_frobenius", np.asarray(np.sum(a.data**2)), (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- normalization / attention


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (True = keep) zeroes the excluded entries exactly; a row with no
    kept entry comes out all zeros instead of uniform.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, MASK_SENTINEL)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    if mask is not None:
        e = e * mask
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), grad)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Overwrite masked entries with ``value``; ``-inf`` becomes the finite softmax sentinel."""
    if value == -np.inf:
        value = MASK_SENTINEL
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _emit("masked_fill", np.where(mask, value, a.data), (a,),
                 lambda g: (np.where(mask, 0.0, g),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with learnable gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def grad(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", y, (x, gain, bias), grad)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def stop_grad(a: Tensor) -> Tensor:
    """Same values, recorded as a node that passes no gradient to its input."""
    out = Tensor(a.data.copy())
    if _TAPES and a.requires_grad:
        _TAPES[-1].nodes.append(Node("stop_grad", out, (a,), lambda g: (None,)))
    return out


KERNELS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "transpose": transpose, "reshape": reshape, "concat": concat, "index": index,
    "gather_rows": gather_rows, "softmax": softmax, "masked_fill": masked_fill,
    "layer_norm": layer_norm, "gelu": gelu, "sigmoid": sigmoid, "softplus": softplus,
    "exp": exp, "log": log, "dropout": dropout, "sum": sum_, "mean": mean,
    "sq_frobenius": sq_frobenius, "stop_grad": stop_grad,
}


def forward(kind: str, *inputs, **attrs) -> Tensor:
    """Run a kernel by name."""
    try:
        fn = KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every tensor in ``params``.

    Parameters the loss does not reach get zero arrays.
    """
    if loss.data.size != 1:
        raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or not any(n.out is loss for n in tape.nodes):
        raise BackwardError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()}


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam with optional decoupled weight decay."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape "
                                 f"{params[name].shape} for {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


# ---------------------------------------------------------------- tensor files

_MAGIC = b"DGTTENS1"


def save_tensors(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | raw little-endian f64``."""
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
