"""Modality-specific flow-matching head.

A small bidirectional transformer predicts the straight-path velocity
z - x0 for a patch of latent frames, conditioned on the backbone hidden
state (plus a sinusoidal embedding of the flow time), a global identity
vector, and a context window of the previous patch's frames.  Sampling
integrates the field from noise to data with a plain Euler scheme and
classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tz
from .layers import LayerNorm, Linear, TransformerBlock, new_embedding_row, sinusoidal_embedding
from .params import embedding_init
from .tensor import NumericsError, Tensor

TAU_CLAMP = 1e-5


def sample_tau(rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Logit-normal flow time: sigmoid of a standard normal, clamped inside (0,1)."""
    g = rng.standard_normal(size)
    tau = 1.0 / (1.0 + np.exp(-g))
    tau = np.clip(tau, TAU_CLAMP, 1.0 - TAU_CLAMP)
    return float(tau) if size is None else tau


@dataclass
class FlowSample:
    """One conditional flow-matching training point; identities hold exactly."""

    x0: np.ndarray
    z: np.ndarray
    tau: float
    x_tau: np.ndarray
    v: np.ndarray


def make_flow_pair(x0: np.ndarray, z: np.ndarray, tau: float) -> FlowSample:
    x0 = np.asarray(x0, dtype=np.float32)
    z = np.asarray(z, dtype=np.float32)
    if x0.shape != z.shape:
        raise ValueError(f"x0 {x0.shape} and z {z.shape} must match")
    x_tau = (1.0 - tau) * x0 + tau * z
    return FlowSample(x0=x0, z=z, tau=tau, x_tau=x_tau, v=z - x0)


@dataclass
class ConditioningBundle:
    """Everything one head call conditions on.

    Arrays may carry a leading batch axis (one row per patch being
    denoised).  `dropped` marks rows whose semantic anchor h is replaced
    by the head's learned null embedding; the global condition and the
    context window are kept.
    """

    h: np.ndarray | Tensor
    global_cond: np.ndarray
    context: np.ndarray
    dropped: bool | np.ndarray = False


def drop_condition(cond: ConditioningBundle, p_drop: float, rng: np.random.Generator) -> ConditioningBundle:
    """Mark the bundle dropped with probability p_drop (per row when batched)."""
    if not (0.0 <= p_drop < 1.0):
        raise ValueError(f"p_drop {p_drop} outside [0,1)")
    h = cond.h
    batched = (h.ndim if isinstance(h, Tensor) else np.ndim(h)) == 2
    if batched:
        n = h.shape[0]
        dropped = rng.random(n) < p_drop
    else:
        dropped = bool(rng.random() < p_drop)
    return replace(cond, dropped=dropped)


def cfg_velocity(v_cond: np.ndarray, v_null: np.ndarray, scale: float) -> np.ndarray:
    """Guided field v_null + scale * (v_cond - v_null)."""
    v_cond = np.asarray(v_cond)
    v_null = np.asarray(v_null)
    if v_cond.shape != v_null.shape:
        raise ValueError(f"shape mismatch {v_cond.shape} vs {v_null.shape}")
    return v_null + scale * (v_cond - v_null)


class DiffusionHead:
    """Velocity network for one modality; heads never share parameters."""

    def __init__(
        self,
        rng: np.random.Generator,
        latent_dim: int,
        cond_width: int,
        global_dim: int,
        patch: int,
        width: int = 64,
        layers: int = 2,
        heads: int = 4,
    ):
        self.latent_dim = latent_dim
        self.cond_width = cond_width
        self.global_dim = global_dim
        self.patch = patch
        self.width = width
        self.null_h = new_embedding_row(rng, cond_width)
        self.adapt_h = Linear(rng, cond_width, width)
        self.adapt_global = Linear(rng, global_dim, width)
        self.adapt_context = Linear(rng, latent_dim, width)
        self.adapt_noisy = Linear(rng, latent_dim, width)
        self.pos = Tensor(embedding_init(rng, 2 + 2 * patch, width), requires_grad=True)
        self.blocks = [TransformerBlock(rng, width, heads) for _ in range(layers)]
        self.final_ln = LayerNorm(width)
        self.out = Linear(rng, width, latent_dim)

    # -- forward -------------------------------------------------------------

    def _resolve_h(self, cond: ConditioningBundle, n: int) -> Tensor:
        h = tz.as_tensor(cond.h)
        if h.ndim == 1:
            h = tz.reshape(h, (1, self.cond_width))
        dropped = cond.dropped
        if isinstance(dropped, (bool, np.bool_)):
            dropped = np.full(n, bool(dropped))
        else:
            dropped = np.asarray(dropped, dtype=bool)
        if not dropped.any():
            return h
        null_rows = tz.reshape(self.null_h, (1, self.cond_width))
        if dropped.all():
            return null_rows + Tensor(np.zeros((n, self.cond_width), dtype=np.float32))
        keep = Tensor((~dropped).astype(np.float32)[:, None])
        drop = Tensor(dropped.astype(np.float32)[:, None])
        return h * keep + null_rows * drop

    def velocity(self, x_tau, tau, cond: ConditioningBundle) -> Tensor:
        """Predicted velocity at the noisy-frame positions, (..., P, d).

        Token sequence per sample: [h + time, global, P context frames,
        P noisy frames], full bidirectional attention.
        """
        x = tz.as_tensor(x_tau)
        single = x.ndim == 2
        if single:
            x = tz.reshape(x, (1, self.patch, self.latent_dim))
        n = x.shape[0]
        if x.shape[1] != self.patch or x.shape[2] != self.latent_dim:
            raise ValueError(f"x_tau must be (n, {self.patch}, {self.latent_dim}), got {x.shape}")
        context = np.asarray(cond.context, dtype=np.float32)
        if context.ndim == 2:
            context = context[None]
        if context.shape != (n, self.patch, self.latent_dim):
            raise ValueError(f"context must be (n, {self.patch}, {self.latent_dim}), got {context.shape}")
        gcond = np.asarray(cond.global_cond, dtype=np.float32)
        if gcond.ndim == 1:
            gcond = np.broadcast_to(gcond, (n, self.global_dim))
        tau_arr = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))
        h = self._resolve_h(cond, n)
        h_tok = self.adapt_h(h) + Tensor(sinusoidal_embedding(tau_arr, self.width))
        g_tok = self.adapt_global(Tensor(gcond))
        ctx_tok = self.adapt_context(Tensor(context))
        noisy_tok = self.adapt_noisy(x)
        seq = tz.concat(
            [
                tz.reshape(h_tok, (n, 1, self.width)),
                tz.reshape(g_tok, (n, 1, self.width)),
                ctx_tok,
                noisy_tok,
            ],
            axis=1,
        ) + tz.reshape(self.pos, (1, 2 + 2 * self.patch, self.width))
        for block in self.blocks:
            seq = block(seq)
        v = self.out(self.final_ln(seq)[:, 2 + self.patch :, :])
        return v[0] if single else v

    # -- training objective --------------------------------------------------

    def cfm_loss(self, x0, cond: ConditioningBundle, rng: np.random.Generator, per_row: bool = False) -> Tensor:
        """Mean squared velocity error on a fresh (tau, z) draw.

        With per_row=True, returns the (n,) per-sample means instead of the
        scalar (diagnostics; mean of the rows equals the scalar).
        """
        x0 = np.asarray(x0, dtype=np.float32)
        single = x0.ndim == 2
        if single:
            x0 = x0[None]
        n = x0.shape[0]
        tau = sample_tau(rng, size=n)
        z = rng.standard_normal(x0.shape).astype(np.float32)
        x_tau = (1.0 - tau)[:, None, None] * x0 + tau[:, None, None] * z
        target = z - x0
        v_hat = self.velocity(x_tau, tau, cond)
        if single:
            v_hat = tz.reshape(v_hat, x0.shape)
        diff = v_hat - Tensor(target)
        sq = diff * diff
        loss = tz.mean(tz.reshape(sq, (n, -1)), axis=1) if per_row else tz.mean(sq)
        if not np.all(np.isfinite(loss.data)):
            raise NumericsError("non-finite flow-matching loss")
        return loss

    # -- sampling --------------------------------------------------------------

    def euler_sample(
        self,
        cond: ConditioningBundle,
        rng: np.random.Generator,
        steps: int = 10,
        temperature: float = 0.7,
        cfg_scale: float = 2.0,
    ) -> np.ndarray:
        """Integrate the learned field from tau=1 to 0 on a uniform grid.

        The initial state is temperature-scaled standard noise; guidance
        combines the conditional and null-anchored predictions, costing a
        second head evaluation per step only when cfg_scale != 1.
        """
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 <= temperature <= 1.0):
            raise ValueError("temperature must be in [0, 1]")
        z = rng.standard_normal((self.patch, self.latent_dim)).astype(np.float32)
        x = temperature * z
        null_cond = replace(cond, dropped=True)
        dt = 1.0 / steps
        with tz.no_grad():
            for j in range(steps):
                tau = 1.0 - j * dt
                v_c = self.velocity(x, tau, cond).data
                if cfg_scale != 1.0:
                    v_n = self.velocity(x, tau, null_cond).data
                    v = cfg_velocity(v_c, v_n, cfg_scale)
                else:
                    v = v_c
                x = x - dt * v
                if not np.all(np.isfinite(x)):
                    raise NumericsError(f"non-finite sampler state at step {j}")
        return x.astype(np.float32)

    def named_params(self):
        yield "null_h", self.null_h
        yield "pos", self.pos
        for sub, obj in (
            ("adapt_h", self.adapt_h),
            ("adapt_global", self.adapt_global),
            ("adapt_context", self.adapt_context),
            ("adapt_noisy", self.adapt_noisy),
        ):
            for name, t in obj.named_params():
                yield f"{sub}.{name}", t
        for i, block in enumerate(self.blocks):
            for name, t in block.named_params():
                yield f"layer{i}.{name}", t
        for name, t in self.final_ln.named_params():
            yield f"final_ln.{name}", t
        for name, t in self.out.named_params():
            yield f"out.{name}", t
