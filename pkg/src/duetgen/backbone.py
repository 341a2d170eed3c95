"""Shared causal planner backbone.

Builds the fused token sequence (task tag, text prefix, patch tokens
arranged per fusion mode), runs causal self-attention with rotary
positions, and exposes both a full-sequence forward and an incremental
KV-cached forward for generation.  Hosts the stop predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .layers import (
    LayerNorm,
    Linear,
    TransformerBlock,
    causal_mask,
    new_embedding_row,
    rope_apply_np,
    rope_tables,
)
from .params import embedding_init
from .tensor import Tensor

TAG_TTS = "tts"
TAG_T2AV = "t2av"


class LayoutError(ValueError):
    """Inconsistent sequence-construction inputs."""


@dataclass(frozen=True)
class FusionMode:
    """Token arrangement for the patch portion of the sequence."""

    kind: str  # "add" | "interleave_av" | "interleave_va" | "delay"
    delay: int = 0

    def __post_init__(self):
        if self.kind not in ("add", "interleave_av", "interleave_va", "delay"):
            raise LayoutError(f"unknown fusion mode {self.kind!r}")
        if self.kind == "delay" and self.delay < 1:
            raise LayoutError("delay mode requires k >= 1")
        if self.kind != "delay" and self.delay:
            raise LayoutError(f"{self.kind} mode takes no delay")

    @property
    def name(self) -> str:
        return f"delay_{self.delay}" if self.kind == "delay" else self.kind

    def sequence_length(self, n_text: int, n_patches: int) -> int:
        if self.kind == "add":
            return 1 + n_text + n_patches
        if self.kind in ("interleave_av", "interleave_va"):
            return 1 + n_text + 2 * n_patches
        return 1 + n_text + n_patches + self.delay

    def supports_task(self, task: str) -> bool:
        """Uni-modal conditioning needs the given modality to precede the sampled one."""
        if task == "a2v":
            return self.kind != "interleave_va"
        if task == "v2a":
            return self.kind != "interleave_av"
        return True


def parse_fusion_mode(name: str) -> FusionMode:
    name = name.strip().lower()
    if name.startswith("delay_"):
        return FusionMode("delay", int(name.split("_", 1)[1]))
    return FusionMode(name)


@dataclass
class SequenceLayout:
    """Token matrix plus the position bookkeeping every consumer needs.

    audio_cond[j] / video_cond[j] give the position whose hidden state
    conditions the head that renders patch j (next-patch prediction:
    patch 0 is conditioned on the last text position).  stop_pos[j] is
    the decision position carrying patch j's stop label.
    """

    tokens: Tensor  # (L, width)
    roles: list[str]
    mode: FusionMode
    tag: str
    n_text: int
    n_patches: int
    audio_cond: list[int] = field(default_factory=list)
    video_cond: list[int] = field(default_factory=list)
    stop_pos: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def layout_positions(mode: FusionMode, n_text: int, n_patches: int, tag: str):
    """Role list and conditioning/stop position maps for one sequence."""
    base = 1 + n_text
    roles = ["task"] + ["text"] * n_text
    audio_cond: list[int] = []
    video_cond: list[int] = []
    stop_pos: list[int] = []
    has_video = tag == TAG_T2AV
    if mode.kind == "add":
        roles += ["joint"] * n_patches
        for j in range(n_patches):
            audio_cond.append(base + j - 1)
            if has_video:
                video_cond.append(base + j - 1)
            stop_pos.append(base + j)
    elif mode.kind in ("interleave_av", "interleave_va"):
        first, second = ("audio", "video") if mode.kind == "interleave_av" else ("video", "audio")
        for _ in range(n_patches):
            roles += [first, second]
        for j in range(n_patches):
            if mode.kind == "interleave_av":
                audio_cond.append(base + 2 * j - 1)
                if has_video:
                    video_cond.append(base + 2 * j)
            else:
                if has_video:
                    video_cond.append(base + 2 * j - 1)
                audio_cond.append(base + 2 * j)
            stop_pos.append(base + 2 * j + 1)
    else:  # delay
        k = mode.delay
        roles += ["joint"] * (n_patches + k)
        for j in range(n_patches):
            audio_cond.append(base + j - 1)
            if has_video:
                video_cond.append(base + j + k - 1)
            # stop supervision sits on the audio-bearing slots; the k
            # trailing pad slots are post-decision and carry no label
            stop_pos.append(base + j)
    return roles, audio_cond, video_cond, stop_pos


class Backbone:
    def __init__(self, rng: np.random.Generator, width: int, vocab: int, layers: int = 4, heads: int = 4):
        self.width = width
        self.vocab = vocab
        self.text_table = Tensor(embedding_init(rng, vocab, width), requires_grad=True)
        self.tag_tts = new_embedding_row(rng, width)
        self.tag_t2av = new_embedding_row(rng, width)
        self.pad = new_embedding_row(rng, width)
        self.blocks = [TransformerBlock(rng, width, heads, use_rope=True) for _ in range(layers)]
        self.final_ln = LayerNorm(width)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._mask_cache: dict[int, np.ndarray] = {}

    # -- sequence construction ------------------------------------------------

    def embed_text(self, symbols) -> Tensor:
        idx = np.asarray(symbols, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise LayoutError(f"text symbol out of range for vocab {self.vocab}")
        return self.text_table[idx]

    def tag_row(self, tag: str) -> Tensor:
        if tag == TAG_TTS:
            return self.tag_tts
        if tag == TAG_T2AV:
            return self.tag_t2av
        raise LayoutError(f"unknown task tag {tag!r}")

    def _pad_rows(self, n: int) -> Tensor:
        return tz.reshape(self.pad, (1, self.width)) + Tensor(np.zeros((n, self.width), dtype=np.float32))

    def build_sequence(
        self,
        text_symbols,
        audio_embs: Tensor,
        video_embs: Tensor | None,
        mode: FusionMode,
        tag: str,
    ) -> SequenceLayout:
        """Fuse patch embeddings under `mode` behind the tag + text prefix.

        audio_embs is (N, width).  video_embs is (N, width) or None; TTS
        samples always use the learned pad embedding for the video branch,
        whatever was passed.
        """
        n = audio_embs.shape[0]
        if tag == TAG_TTS:
            video_embs = None
        if video_embs is not None and video_embs.shape[0] != n:
            raise LayoutError(f"embedding list length mismatch: {n} audio vs {video_embs.shape[0]} video")
        if mode.kind == "delay" and mode.delay >= n:
            raise LayoutError(f"delay k={mode.delay} must be < n_patches={n}")
        video = video_embs if video_embs is not None else self._pad_rows(n)
        if mode.kind == "add":
            patch_tokens = audio_embs + video
        elif mode.kind in ("interleave_av", "interleave_va"):
            pair = (audio_embs, video) if mode.kind == "interleave_av" else (video, audio_embs)
            patch_tokens = tz.reshape(tz.stack(pair, axis=1), (2 * n, self.width))
        else:
            k = mode.delay
            audio_full = tz.concat([audio_embs, self._pad_rows(k)], axis=0)
            video_full = tz.concat([self._pad_rows(k), video], axis=0)
            patch_tokens = audio_full + video_full
        text = self.embed_text(text_symbols)
        tokens = tz.concat([tz.reshape(self.tag_row(tag), (1, self.width)), text, patch_tokens], axis=0)
        roles, audio_cond, video_cond, stop_pos = layout_positions(mode, len(text_symbols), n, tag)
        return SequenceLayout(
            tokens=tokens,
            roles=roles,
            mode=mode,
            tag=tag,
            n_text=len(text_symbols),
            n_patches=n,
            audio_cond=audio_cond,
            video_cond=video_cond,
            stop_pos=stop_pos,
        )

    # -- forward passes ---------------------------------------------------------

    def _tables(self, length: int):
        if length not in self._rope_cache:
            self._rope_cache[length] = rope_tables(length, self.blocks[0].head_dim)
            self._mask_cache[length] = causal_mask(length)
        return self._rope_cache[length], self._mask_cache[length]

    def forward_hidden(self, tokens) -> Tensor:
        """Strictly causal attention over (B, L, width) or (L, width) tokens."""
        tokens = tz.as_tensor(tokens)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tz.reshape(tokens, (1,) + tokens.shape)
        if tokens.shape[1] == 0:
            raise LayoutError("empty sequence")
        rope, mask = self._tables(tokens.shape[1])
        x = tokens
        for block in self.blocks:
            x = block(x, mask=mask, rope=rope)
        x = self.final_ln(x)
        return x[0] if squeeze else x

    def forward_layout(self, layout: SequenceLayout) -> Tensor:
        return self.forward_hidden(layout.tokens)

    # -- incremental decoding (inference-only numpy path) -----------------------

    def new_cache(self) -> "KvCache":
        return KvCache(keys=[None] * len(self.blocks), values=[None] * len(self.blocks))

    def incremental_forward(self, cache: "KvCache", new_tokens: np.ndarray) -> np.ndarray:
        """Extend the cached sequence; returns hidden states of the new tokens.

        Matches `forward_hidden` within float32 tolerance for any split of
        the sequence into successive blocks.
        """
        x = np.asarray(new_tokens, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        n_new, width = x.shape
        if width != self.width:
            raise LayoutError(f"token width {width} != backbone width {self.width}")
        start = cache.length
        total = start + n_new
        rope_cos, rope_sin = rope_tables(total, self.blocks[0].head_dim)
        heads = self.blocks[0].heads
        hd = self.blocks[0].head_dim
        new_mask = causal_mask(n_new)
        for li, block in enumerate(self.blocks):
            h = _ln_np(x, block.ln1)
            q = (h @ block.wq.w.data + block.wq.b.data).reshape(n_new, heads, hd).transpose(1, 0, 2)
            k = (h @ block.wk.w.data + block.wk.b.data).reshape(n_new, heads, hd).transpose(1, 0, 2)
            v = (h @ block.wv.w.data + block.wv.b.data).reshape(n_new, heads, hd).transpose(1, 0, 2)
            q = rope_apply_np(q, rope_cos[start:total], rope_sin[start:total])
            k = rope_apply_np(k, rope_cos[start:total], rope_sin[start:total])
            if cache.keys[li] is None:
                k_all, v_all = k, v
            else:
                k_all = np.concatenate([cache.keys[li], k], axis=1)
                v_all = np.concatenate([cache.values[li], v], axis=1)
            cache.keys[li] = k_all
            cache.values[li] = v_all
            scores = q @ k_all.transpose(0, 2, 1) / np.sqrt(hd)
            scores[:, :, start:] += new_mask
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ v_all).transpose(1, 0, 2).reshape(n_new, width)
            x = x + ctx @ block.wo.w.data + block.wo.b.data
            h2 = _ln_np(x, block.ln2)
            f = h2 @ block.fc1.w.data + block.fc1.b.data
            f = _gelu_np(f)
            x = x + f @ block.fc2.w.data + block.fc2.b.data
        cache.length = total
        return _ln_np(x, self.final_ln)

    def named_params(self):
        yield "text_table", self.text_table
        yield "tag_tts", self.tag_tts
        yield "tag_t2av", self.tag_t2av
        yield "pad", self.pad
        for i, block in enumerate(self.blocks):
            for name, t in block.named_params():
                yield f"layer{i}.{name}", t
        for name, t in self.final_ln.named_params():
            yield f"final_ln.{name}", t


@dataclass
class KvCache:
    """Per-layer cached keys/values (heads, T, head_dim) and the fed length."""

    keys: list
    values: list
    length: int = 0


def _ln_np(x: np.ndarray, ln: LayerNorm) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + ln.eps) * ln.gain.data + ln.bias.data


def _gelu_np(x: np.ndarray) -> np.ndarray:
    from .tensor import _GELU_K, _sigmoid_np

    return x * _sigmoid_np(_GELU_K * x)


class StopPredictor:
    """Two-layer MLP on a backbone hidden state, emitting a stop logit."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.fc1 = Linear(rng, width, width)
        self.fc2 = Linear(rng, width, 1)

    def logit(self, h) -> Tensor:
        return tz.reshape(self.fc2(tz.gelu(self.fc1(tz.as_tensor(h)))), (-1,))

    def probability(self, h) -> Tensor:
        return tz.sigmoid(self.logit(h))

    def named_params(self):
        for sub, obj in (("fc1", self.fc1), ("fc2", self.fc2)):
            for name, t in obj.named_params():
                yield f"{sub}.{name}", t


def stop_loss(probs: Tensor, labels) -> Tensor:
    """Class-weighted binary cross-entropy over stop probabilities.

    The positive (stop) class weight is the continue/stop count ratio of
    this batch; a batch without stop labels is rejected.
    """
    probs = tz.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float32).reshape(-1)
    if probs.size != labels.size:
        raise ValueError(f"{probs.size} probabilities vs {labels.size} labels")
    n_stop = float(labels.sum())
    if n_stop == 0:
        raise ValueError("batch has no stop labels; positive weight undefined")
    w = (labels.size - n_stop) / n_stop
    p = tz.clip(tz.reshape(probs, (-1,)), 1e-7, 1.0 - 1e-7)
    term = Tensor(w * labels) * tz.log(p) + Tensor(1.0 - labels) * tz.log(1.0 - p)
    return -tz.mean(term)
