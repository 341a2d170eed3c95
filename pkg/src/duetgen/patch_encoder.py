"""Patch transformer encoder: P latent frames of one modality -> one token.

Each modality owns an independent instance (no parameter sharing).  Frames
are projected to the backbone width, a learnable CLS token is prepended,
learned positional embeddings over the P+1 slots are added, and a small
bidirectional transformer runs; the CLS output is the patch embedding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .layers import LayerNorm, Linear, TransformerBlock, new_embedding_row
from .params import embedding_init
from .tensor import Tensor


class PatchEncoder:
    def __init__(self, rng: np.random.Generator, frame_dim: int, width: int, patch: int, layers: int = 2, heads: int = 4):
        self.frame_dim = frame_dim
        self.width = width
        self.patch = patch
        self.proj = Linear(rng, frame_dim, width)
        self.cls = new_embedding_row(rng, width)
        self.pos = Tensor(embedding_init(rng, patch + 1, width), requires_grad=True)
        self.blocks = [TransformerBlock(rng, width, heads) for _ in range(layers)]
        self.final_ln = LayerNorm(width)

    def encode_batch(self, frames) -> Tensor:
        """(N, P, d) -> (N, width); patches are independent (no cross-patch flow)."""
        frames = tz.as_tensor(frames)
        if frames.ndim != 3 or frames.shape[1] != self.patch or frames.shape[2] != self.frame_dim:
            raise ValueError(
                f"expected (N, {self.patch}, {self.frame_dim}) frames, got {frames.shape}"
            )
        n = frames.shape[0]
        x = self.proj(frames)
        cls_rows = tz.reshape(self.cls, (1, 1, self.width)) + Tensor(np.zeros((n, 1, self.width), dtype=np.float32))
        x = tz.concat([cls_rows, x], axis=1) + tz.reshape(self.pos, (1, self.patch + 1, self.width))
        for block in self.blocks:
            x = block(x)
        return self.final_ln(x)[:, 0, :]

    def encode_patch(self, frames) -> Tensor:
        """(P, d) -> (width,)."""
        frames = tz.as_tensor(frames)
        if frames.ndim != 2:
            raise ValueError(f"expected a single (P, d) patch, got {frames.shape}")
        return self.encode_batch(tz.reshape(frames, (1, self.patch, self.frame_dim)))[0]

    def encode_stream_frames(self, frames) -> Tensor:
        """(T, d) with T divisible by P -> (T/P, width)."""
        frames = tz.as_tensor(frames)
        t = frames.shape[0]
        if t % self.patch:
            raise ValueError(f"frame count {t} not divisible by patch size {self.patch}")
        return self.encode_batch(tz.reshape(frames, (t // self.patch, self.patch, self.frame_dim)))

    def named_params(self):
        yield "proj.w", self.proj.w
        yield "proj.b", self.proj.b
        yield "cls", self.cls
        yield "pos", self.pos
        for i, block in enumerate(self.blocks):
            for name, t in block.named_params():
                yield f"layer{i}.{name}", t
        for name, t in self.final_ln.named_params():
            yield f"final_ln.{name}", t
