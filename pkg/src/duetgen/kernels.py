"""Fused forward/backward helpers for the hottest elementwise passes.

These keep the differentiation tape small: one node per gelu / layer
norm with cached intermediates, instead of chains of primitive ops.
"""

from __future__ import annotations

import numpy as np

_GELU_K = 1.702


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (x * sigmoid(kx), sigmoid(kx))."""
    s = 0.5 * (np.tanh((0.5 * _GELU_K) * x) + 1.0)
    return x * s, s


def gelu_backward(g: np.ndarray, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return g * (s + _GELU_K * (x * s) * (1.0 - s))


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Returns (out, xhat, inv) with xhat (rows, n) and inv (rows,) cached."""
    n = x.shape[-1]
    x2 = x.reshape(-1, n)
    mu = x2.mean(axis=1)
    xc = x2 - mu[:, None]
    var = np.einsum("ij,ij->i", xc, xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv[:, None]
    out = xhat * gain + bias
    return out.reshape(x.shape), xhat, inv


def layer_norm_backward(g: np.ndarray, gain: np.ndarray, xhat: np.ndarray, inv: np.ndarray):
    """Returns (gx, ggain, gbias)."""
    n = g.shape[-1]
    g2 = g.reshape(-1, n)
    gh = g2 * gain
    m1 = gh.mean(axis=1)
    m2 = np.einsum("ij,ij->i", gh, xhat) / n
    gx = gh
    gx -= m1[:, None]
    gx -= xhat * m2[:, None]
    gx *= inv[:, None]
    ggain = np.einsum("ij,ij->j", g2, xhat)
    gbias = g2.sum(axis=0)
    return gx.reshape(g.shape), ggain, gbias
