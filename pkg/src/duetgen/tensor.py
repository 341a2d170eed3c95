"""Dense-tensor engine with reverse-mode differentiation.

Values are numpy arrays (float32 for training, float64 for gradient
checks).  Every operation records a backward closure on a tape unless
grad recording is disabled via `no_grad()`.  Backward traversal order is
fixed (reverse topological, deterministic), so gradient accumulation is
bit-reproducible across runs.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class NumericsError(RuntimeError):
    """Non-finite value or invalid numeric operation."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """One node of the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in {what}")
        return self

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # `owned` marks a freshly allocated gradient that no other node can
        # alias; anything else is defensively copied before being stored
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=not owned)
        else:
            self.grad += g

    def backward(self, check_finite: bool = True) -> None:
        """Reverse pass from this scalar; populates `.grad` on reachable nodes."""
        if self.data.size != 1:
            raise NumericsError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if check_finite:
            for node in topo:
                if node.requires_grad and node._backward is None and node.grad is not None:
                    if not np.all(np.isfinite(node.grad)):
                        raise NumericsError("non-finite gradient in reverse pass")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def to_dtype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        out.grad = None
        if out.requires_grad:
            out._parents = (self,)

            def bw(g):
                self._accumulate(g.astype(self.data.dtype), owned=True)

            out._backward = bw
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_(other, -1.0))

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _node(data, (a, b), bw)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0), owned=True)

    return _node(data, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape), owned=True)

    return _node(data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with x (..., n_in), w (n_in, n_out); fused for tape economy."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.data.shape[:-1]
    n_in = x.data.shape[-1]
    x2 = x.data.reshape(-1, n_in)
    out2 = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out2 = out2 + b.data
    data = out2.reshape(*lead, w.data.shape[1])
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T).reshape(x.data.shape), owned=True)
        if w.requires_grad:
            w._accumulate(x2.T @ g2, owned=True)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0), owned=True)

    return _node(data, parents, bw)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy(), owned=True)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy(), owned=True)

    return _node(data, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(data, (a,), bw)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(data, (a,), bw)


def take(a, idx) -> Tensor:
    """Indexing / gather; backward scatter-adds into the source."""
    a = as_tensor(a)
    data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf, owned=True)

    return _node(data, (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def bw(g):
        offset = 0
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + s)
                t._accumulate(g[tuple(sl)])
            offset += s

    return _node(data, tuple(ts), bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis), owned=True)

    return _node(data, tuple(ts), bw)


def pad_stack(tensors: Iterable, length: int) -> Tensor:
    """Stack 2-d tensors (L_i, D) into (B, length, D), zero-padding each tail."""
    ts = [as_tensor(t) for t in tensors]
    width = ts[0].data.shape[-1]
    data = np.zeros((len(ts), length, width), dtype=ts[0].data.dtype)
    for i, t in enumerate(ts):
        data[i, : t.data.shape[0]] = t.data

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(g[i, : t.data.shape[0]])

    return _node(data, tuple(ts), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data, owned=True)

    return _node(data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data, owned=True)

    return _node(data, (a,), bw)


def sqrt(a) -> Tensor:
    return pow_(a, 0.5)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data), owned=True)

    return _node(data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid_np(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data), owned=True)

    return _node(data, (a,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # overflow-free and fast: sigmoid(x) = (tanh(x/2) + 1) / 2
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


_GELU_K = 1.702  # sigmoid-form GELU coefficient


def gelu(a) -> Tensor:
    """Sigmoid-approximation GELU: x * sigmoid(1.702 x)."""
    from .kernels import gelu_backward, gelu_forward

    a = as_tensor(a)
    x = a.data
    data, s = gelu_forward(x)

    def bw(g):
        if a.requires_grad:
            a._accumulate(gelu_backward(g, x, s), owned=True)

    return _node(data, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x > 20, x, np.log1p(np.exp(np.minimum(x, 20.0))))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * _sigmoid_np(x), owned=True)

    return _node(data, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot), owned=True)

    return _node(data, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    from .kernels import layer_norm_backward, layer_norm_forward

    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    data, xhat, inv = layer_norm_forward(x.data, gain.data, bias.data, eps)

    def bw(g):
        gx, ggain, gbias = layer_norm_backward(g, gain.data, xhat, inv)
        if gain.requires_grad:
            gain._accumulate(ggain, owned=True)
        if bias.requires_grad:
            bias._accumulate(gbias, owned=True)
        if x.requires_grad:
            x._accumulate(gx, owned=True)

    return _node(data, (x, gain, bias), bw)


def attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(hd) + mask) v over (..., T, hd) inputs, fused.

    `mask` is additive (-inf strictly above the diagonal gives causal
    attention); masked positions contribute exact zeros, so earlier
    outputs are bit-identical under any change at later positions.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    attn = scores
    attn /= attn.sum(axis=-1, keepdims=True)
    data = np.matmul(attn, v.data)

    def bw(g):
        if v.requires_grad:
            v._accumulate(np.matmul(np.swapaxes(attn, -1, -2), g), owned=True)
        if q.requires_grad or k.requires_grad:
            g_attn = np.matmul(g, np.swapaxes(v.data, -1, -2))
            g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                q._accumulate(np.matmul(g_scores, k.data) * scale, owned=True)
            if k.requires_grad:
                k._accumulate(np.matmul(np.swapaxes(g_scores, -1, -2), q.data) * scale, owned=True)

    return _node(data, (q, k, v), bw)


def split_heads(x, heads: int) -> Tensor:
    """(B, T, D) -> (B, heads, T, D/heads)."""
    x = as_tensor(x)
    b, t, d = x.shape
    hd = d // heads
    data = x.data.reshape(b, t, heads, hd).swapaxes(1, 2)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(g.swapaxes(1, 2)).reshape(b, t, d), owned=True)

    return _node(data, (x,), bw)


def merge_heads(x) -> Tensor:
    """(B, heads, T, hd) -> (B, T, heads*hd)."""
    x = as_tensor(x)
    b, h, t, hd = x.shape
    data = np.ascontiguousarray(x.data.swapaxes(1, 2)).reshape(b, t, h * hd)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(g.reshape(b, t, h, hd).swapaxes(1, 2)), owned=True)

    return _node(data, (x,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only inside the interval."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * inside, owned=True)

    return _node(data, (a,), bw)
