"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a fresh contiguous array; nothing is mutated in place. When
gradient recording is on and at least one input requires a gradient, the
output remembers its parents and a closure mapping the upstream gradient to
one gradient per parent. ``Tensor.backward`` walks the recorded graph once in
reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels as K

LN_EPS = 1e-5

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (e.g. a second backward pass)."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _released(g):
    raise GraphError("graph already consumed by a previous backward pass")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None):
        if self._backward is _released:
            raise GraphError("backward called twice on the same graph; re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise GraphError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64).reshape(self.shape)

        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is _released:
                raise GraphError("graph already consumed by a previous backward pass")
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
            node._backward = _released
            node._parents = ()

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    # sum is NaN/Inf iff some element is (barring overflow at ~1e308 magnitudes)
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # reported by _make as NonFiniteError
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make(y, (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    return _make(K.gelu(x.data), (x,), lambda g: (K.gelu_grad(x.data, np.ascontiguousarray(g)),), "gelu")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against constant targets."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    val = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _make(val, (logits,), lambda g: (g * (_sigmoid(z) - y),), "bce_with_logits")


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(sum_(x, axes, keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(y, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ValueError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _make(y, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(y, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis=0) -> list:
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(slice_(x, tuple(idx)))
        start += s
    return out


def slice_(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, type(Ellipsis))):
            raise TypeError("only basic slicing is supported; use gather_rows for index arrays")
    y = np.array(x.data[key], dtype=np.float64)
    if y.size == 0:
        raise ValueError("slice produced an empty tensor")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _make(y, (x,), backward, "slice")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of the second-to-last axis: (..., L, d) -> (..., m, d)."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    lead, length, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError("gather index out of range")
    x3 = x.data.reshape(-1, length, d)
    y = K.gather_rows(x3, idx).reshape(lead + (idx.size, d))
    ones = np.ones(idx.size)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(-1, idx.size, d)
        return (K.scatter_rows(g3, idx, ones, length).reshape(x.shape),)

    return _make(y, (x,), backward, "gather_rows")


def scatter_rows(y: Tensor, idx: np.ndarray, length: int, weights: np.ndarray | None = None) -> Tensor:
    """Weighted scatter-add along the second-to-last axis: (..., m, d) -> (..., length, d)."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ones(idx.size) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    lead, m, d = y.shape[:-2], y.shape[-2], y.shape[-1]
    if m != idx.size or w.size != m:
        raise ValueError("scatter index/weight length does not match rows")
    if idx.min() < 0 or idx.max() >= length:
        raise IndexError("scatter index out of range")
    out = K.scatter_rows(y.data.reshape(-1, m, d), idx, w, length).reshape(lead + (length, d))

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(-1, length, d)
        return ((K.gather_rows(g3, idx) * w[None, :, None]).reshape(y.shape),)

    return _make(out, (y,), backward, "scatter_rows")


# --------------------------------------------------------------------------
# linear algebra & fused row ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shape = x.shape
    d = shape[-1]
    y = K.softmax_rows(x.data.reshape(-1, d)).reshape(shape)

    def backward(g):
        gy = np.ascontiguousarray(g).reshape(-1, d)
        return (K.softmax_rows_grad(y.reshape(-1, d), gy).reshape(shape),)

    return _make(y, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("softmax_rows expects an m x n tensor")
    return softmax(x)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis (population variance, eps inside the sqrt)."""
    shape = x.shape
    d = shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("gamma/beta must have the size of the last axis")
    y, xhat, rstd = K.layernorm_rows(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = K.layernorm_rows_grad(np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg, gb

    return _make(y.reshape(shape), (x, gamma, beta), backward, "layernorm")


def sdpa(qkv: Tensor, heads: int) -> Tensor:
    """Fused multi-head scaled dot-product attention.

    ``qkv`` has shape (..., n, 3*d) holding [Q | K | V] along the last axis;
    returns the concatenated head outputs (..., n, d) before the output
    projection.
    """
    *lead, n, d3 = qkv.shape
    d = d3 // 3
    if d3 != 3 * d or d % heads:
        raise ValueError(f"width {d} not divisible into {heads} heads")
    dk = d // heads
    scale = 1.0 / np.sqrt(dk)
    # (..., n, 3, h, dk) -> (3, ..., h, n, dk)
    parts = qkv.data.reshape(*lead, n, 3, heads, dk)
    nl = len(lead)
    order = (nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3)
    q, k, v = np.ascontiguousarray(parts.transpose(order))
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    p = K.softmax_rows(scores.reshape(-1, n)).reshape(scores.shape)
    o = p @ v  # (..., h, n, dk)
    back = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    out = np.ascontiguousarray(o.transpose(back)).reshape(*lead, n, d)

    def backward(g):
        go = np.ascontiguousarray(g.reshape(*lead, n, heads, dk).transpose(back))
        gp = go @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ go
        gs = K.softmax_rows_grad(p.reshape(-1, n), np.ascontiguousarray(gp).reshape(-1, n)).reshape(p.shape)
        gs *= scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        stacked = np.stack([gq, gk, gv])  # (3, ..., h, n, dk)
        inv = tuple(np.argsort(order))
        return (np.ascontiguousarray(stacked.transpose(inv)).reshape(qkv.shape),)

    return _make(out, (qkv,), backward, "sdpa")


# --------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._params: dict = {}

    def rng_for(self, name: str) -> np.random.Generator:
        # per-name stream: init does not depend on construction order
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def normal(self, name, shape, std=0.02, truncate=2.0) -> Tensor:
        """Truncated normal init (resampled beyond ``truncate`` stds)."""
        rng = self.rng_for(name)
        vals = rng.standard_normal(shape)
        bad = np.abs(vals) > truncate
        while bad.any():
            vals[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(vals) > truncate
        return self.add(name, vals * std)

    def zeros(self, name, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> Iterable:
        return ((n, self._params[n]) for n in sorted(self._params))

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()
