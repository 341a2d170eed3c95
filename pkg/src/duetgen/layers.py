"""Transformer building blocks shared by the encoders, backbone, and heads."""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .params import bias_init, embedding_init, linear_init
from .tensor import Tensor


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = Tensor(linear_init(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(bias_init(rng, n_in, n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return tz.linear(x, self.w, self.b)

    def named_params(self):
        yield "w", self.w
        yield "b", self.b


class LayerNorm:
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(width, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return tz.layer_norm(x, self.gain, self.bias, self.eps)

    def named_params(self):
        yield "gain", self.gain
        yield "bias", self.bias


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 at or below the diagonal, -inf strictly above."""
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def rope_tables(length: int, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (length, head_dim) for half-split rotary embedding."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half) / half)
    angles = np.arange(length)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(np.float32)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(np.float32)
    return cos, sin


def rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate q/k (..., T, head_dim) by position; cos/sin are (T, head_dim)."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    rotated = tz.concat([-x2, x1], axis=-1)
    return x * Tensor(cos) + rotated * Tensor(sin)


def rope_apply_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rotated * sin


class TransformerBlock:
    """Pre-layer-norm self-attention + GELU feed-forward, optional RoPE."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, use_rope: bool = False, ffn_mult: int = 4):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.use_rope = use_rope
        self.ln1 = LayerNorm(width)
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(rng, width, ffn_mult * width)
        self.fc2 = Linear(rng, ffn_mult * width, width)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, rope: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        _, length, _ = x.shape
        h = self.ln1(x)
        q = tz.split_heads(self.wq(h), self.heads)
        k = tz.split_heads(self.wk(h), self.heads)
        v = tz.split_heads(self.wv(h), self.heads)
        if self.use_rope:
            cos, sin = rope if rope is not None else rope_tables(length, self.head_dim)
            q = rope_apply(q, cos, sin)
            k = rope_apply(k, cos, sin)
        ctx = tz.merge_heads(tz.attention(q, k, v, mask))
        x = x + self.wo(ctx)
        return x + self.fc2(tz.gelu(self.fc1(self.ln2(x))))

    def named_params(self):
        for sub, obj in (
            ("ln1", self.ln1), ("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
            ("wo", self.wo), ("ln2", self.ln2), ("fc1", self.fc1), ("fc2", self.fc2),
        ):
            for name, t in obj.named_params():
                yield f"{sub}.{name}", t


def sinusoidal_embedding(tau: np.ndarray, width: int, scale: float = 1000.0) -> np.ndarray:
    """Timestep embedding for tau in [0,1]; returns (..., width) float32."""
    tau = np.asarray(tau, dtype=np.float64)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = scale * tau[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(np.float32)


def new_embedding_row(rng: np.random.Generator, width: int) -> Tensor:
    return Tensor(embedding_init(rng, 1, width)[0], requires_grad=True)
