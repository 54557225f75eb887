"""Minimal reverse-mode autodiff core and the neural layers built on it.

Everything is float64 and numpy-backed. Ops record a backprop closure; the
composite layers (softmax, layer norm, attention) are built from primitives
so their gradients come for free.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "cilp-checkpoint"
CHECKPOINT_VERSION = 1


class Node:
    """Backprop record: op kind, parent tensors, gradient closure."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


class Tensor:
    """A numpy array plus an optional gradient and backprop record."""

    __slots__ = ("values", "grad", "requires_grad", "node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad or p.node is not None for p in parents):
        out.node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.values + b.values, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.values - b.values, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.values * b.values, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape),
                            _unbroadcast(g * a.values, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.values / b.values, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * a.values / (b.values ** 2), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, "neg", (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul expects 2-D tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.values @ b.values, "matmul", (a, b),
                 lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.values.T, "transpose", (a,), lambda g: (g.T,))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(a.values.sum(axis=axis, keepdims=keepdims), "sum", (a,), back)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.values.size if axis is None else a.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return _make(a.values.mean(axis=axis, keepdims=keepdims), "mean", (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].values.ndim
    for t in tensors:
        if t.values.ndim != ndim:
            raise ValueError("concat rank mismatch")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.values for t in tensors], axis=axis),
                 "concat", tensors, back)


def take_rows(a: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx], "take_rows", (a,), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.values.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(a.values)
        out[sl] = g
        return (out,)

    return _make(a.values[sl].copy(), "narrow", (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(old),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.values), "log", (a,), lambda g: (g / a.values,))


def exp(a: Tensor) -> Tensor:
    out_values = np.exp(a.values)
    return _make(out_values, "exp", (a,), lambda g: (g * out_values,))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.values ** p, "power", (a,),
                 lambda g: (g * p * a.values ** (p - 1),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.values >= lo) & (a.values <= hi)
    return _make(np.clip(a.values, lo, hi), "clip", (a,),
                 lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out_values = 1.0 / (1.0 + np.exp(-a.values))
    return _make(out_values, "sigmoid", (a,),
                 lambda g: (g * out_values * (1.0 - out_values),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.values >= 0.0, 1.0, slope)
    return _make(a.values * scale, "leaky_relu", (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# composite layers (gradients via the primitives above)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(a.values.max(axis=axis, keepdims=True))  # constant, detached
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply learnable gain and bias."""
    m = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, power(add(var, Tensor(eps)), 0.5))
    return add(mul(normed, gain), bias)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q Kᵀ / √m) V with m the key dimension."""
    m = k.shape[-1]
    if q.shape[-1] != m:
        raise ValueError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    scores = mul(matmul(q, transpose(k)), Tensor(1.0 / math.sqrt(m)))
    return matmul(softmax(scores, axis=-1), v)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         wq: Tensor, bq: Tensor, wk: Tensor,
                         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                         heads: int) -> Tensor:
    """Per-head projected attentions, concatenated, then output-projected.

    The key projection carries no bias: softmax is shift-invariant, so a key
    bias would be a permanently zero-gradient parameter.
    """
    width = wq.shape[1]
    if width % heads != 0:
        raise ValueError(f"{heads} heads do not divide width {width}")
    d = width // heads
    qp, kp, vp = linear(q, wq, bq), matmul(k, wk), linear(v, wv, bv)
    outs = []
    for i in range(heads):
        qi = narrow(qp, 1, i * d, d)
        ki = narrow(kp, 1, i * d, d)
        vi = narrow(vp, 1, i * d, d)
        outs.append(scaled_dot_attention(qi, ki, vi))
    return linear(concat(outs, axis=1), wo, bo)


def positional_encoding(seq_len: int, width: int) -> Tensor:
    """Sinusoidal position table; deterministic constant, no gradient."""
    pe = np.zeros((seq_len, width))
    if seq_len and width:
        pos = np.arange(seq_len)[:, None].astype(np.float64)
        idx = np.arange(0, width, 2).astype(np.float64)
        angle = pos / np.power(10000.0, idx / width)
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : width // 2])
    return Tensor(pe)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient accumulation from a scalar loss.

    Grads land on every tensor with requires_grad set; repeated calls
    accumulate until zero_grad.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in reversed(_topo_order(loss)):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for p, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if pg is None:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape: tuple[int, ...] | None = None) -> Tensor:
    """Uniform init in ±√(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class ModelParams:
    """Named map of trainable tensors; the key set is fixed after construction."""

    def __init__(self, params: dict[str, Tensor]):
        for name, t in params.items():
            if not np.all(np.isfinite(t.values)):
                raise ValueError(f"parameter {name!r} contains non-finite values")
            t.requires_grad = True
        self._params = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            self._params[name].values = np.asarray(v, dtype=np.float64).copy()

    def save(self, path: str, extra: dict | None = None) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": {
                name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
                for name, t in self._params.items()
            },
        }
        if extra:
            doc["meta"] = extra
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path: str) -> tuple["ModelParams", dict]:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a parameter checkpoint: {path}")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        params = {
            name: Tensor(np.asarray(rec["values"]).reshape(rec["shape"]),
                         requires_grad=True)
            for name, rec in doc["params"].items()
        }
        return cls(params), doc.get("meta", {})
