"""Single-stage multi-task training.

Batches mix joint audio-video examples with audio-only (TTS-style)
examples 50/50.  Each step teacher-forces the backbone on ground-truth
patch embeddings, conditions both heads on the hidden state preceding
each patch, and optimizes
    total = audio_flow + lambda * video_flow + alpha * stop
with AdamW under a linear-warmup schedule.  Video terms vanish for
audio-only examples, whose video branch input is the learned pad
embedding.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as tz
from .backbone import TAG_T2AV, TAG_TTS, stop_loss
from .codec import AUDIO_DIM, VIDEO_DIM, LatentCodec, LatentStats, SymbolScript, fit_stats, normalize
from .config import TrainConfig
from .diffusion_head import ConditioningBundle, drop_condition
from .model import Model
from .optim import LrSchedule, OptimizerState, adamw_step, clip_gradients
from .params import gradients
from .tensor import NumericsError, Tensor

METRIC_FIELDS = ("step", "lr", "loss_total", "loss_audio", "loss_video", "loss_stop")


class TrainingError(RuntimeError):
    pass


@dataclass
class Example:
    """One prepared training example: normalized patches plus task tag."""

    script: SymbolScript
    tag: str
    audio: np.ndarray  # (N, P, 32), normalized
    video: np.ndarray | None  # (N, P, 40) for joint examples, else None

    @property
    def n_patches(self) -> int:
        return self.audio.shape[0]

    def stop_labels(self) -> np.ndarray:
        labels = np.zeros(self.n_patches, dtype=np.float32)
        labels[-1] = 1.0
        return labels


@dataclass
class Corpus:
    t2av: list[SymbolScript]
    tts: list[SymbolScript]


def build_corpus(codec: LatentCodec, config: TrainConfig) -> Corpus:
    t2av = [
        codec.sample_script(rngmod.derive_seed(config.seed, "corpus-t2av", i), config.min_patches, config.max_patches_data)
        for i in range(config.train_scripts)
    ]
    tts = [
        codec.sample_script(rngmod.derive_seed(config.seed, "corpus-tts", i), config.min_patches, config.max_patches_data)
        for i in range(config.tts_scripts)
    ]
    return Corpus(t2av=t2av, tts=tts)


def eval_scripts(codec: LatentCodec, config: TrainConfig) -> list[SymbolScript]:
    """Held-out scripts; disjoint from training pools by seed stream."""
    return [
        codec.sample_script(rngmod.derive_seed(config.seed, "corpus-eval", i), config.min_patches, config.max_patches_data)
        for i in range(config.eval_scripts)
    ]


def fit_corpus_stats(codec: LatentCodec, corpus: Corpus) -> LatentStats:
    streams = []
    for script in corpus.t2av:
        audio, video = codec.render_streams(script)
        streams.append(audio)
        streams.append(video)
    for script in corpus.tts:
        audio, _ = codec.render_streams(script)
        streams.append(audio)
    return fit_stats(streams)


def prepare_example(codec: LatentCodec, stats: LatentStats, script: SymbolScript, tag: str) -> Example:
    p = codec.config.patch_frames
    audio, video = codec.render_streams(script)
    a = normalize(audio, stats).frames.reshape(-1, p, AUDIO_DIM)
    v = None
    if tag == TAG_T2AV:
        v = normalize(video, stats).frames.reshape(-1, p, VIDEO_DIM)
    return Example(script=script, tag=tag, audio=a, video=v)


def assemble_batch(
    corpus: Corpus,
    codec: LatentCodec,
    stats: LatentStats,
    config: TrainConfig,
    step: int,
    cache: dict | None = None,
) -> list[Example]:
    """50/50 task mix by count (odd batches split by a seeded coin).

    Prepared examples are deterministic per (script, tag), so a cache dict
    may be supplied to avoid re-rendering across steps.
    """
    if not corpus.t2av or not corpus.tts:
        raise TrainingError("corpus must contain both task pools")

    def fetch(script, tag):
        if cache is None:
            return prepare_example(codec, stats, script, tag)
        key = (script.seed, tag)
        if key not in cache:
            cache[key] = prepare_example(codec, stats, script, tag)
        return cache[key]

    r = rngmod.stream(config.seed, "batch", step)
    half = config.batch_size // 2
    n_t2av = half + (int(r.integers(0, 2)) if config.batch_size % 2 else 0)
    n_tts = config.batch_size - n_t2av
    t2av_idx = r.integers(0, len(corpus.t2av), size=n_t2av)
    tts_idx = r.integers(0, len(corpus.tts), size=n_tts)
    batch = [fetch(corpus.t2av[i], TAG_T2AV) for i in t2av_idx]
    batch += [fetch(corpus.tts[i], TAG_TTS) for i in tts_idx]
    return batch


def _context_windows(patches: np.ndarray) -> np.ndarray:
    """Context for patch j is patch j-1; zeros ahead of the first patch."""
    ctx = np.zeros_like(patches)
    ctx[1:] = patches[:-1]
    return ctx


def compute_total_loss(model: Model, batch: list[Example], step: int) -> tuple[Tensor, dict]:
    """Teacher-forced loss over one batch; returns (scalar, logged components).

    The history the model conditions on (patch embeddings fed to the
    backbone and the heads' context windows) is noise-corrupted per
    example, while prediction targets stay clean: at inference the loop
    consumes its own imperfect samples, and training must match that.
    """
    cfg = model.config
    mode = model.mode
    seed = cfg.seed

    audio_stack = np.concatenate([ex.audio for ex in batch], axis=0)
    video_list = [ex.video for ex in batch if ex.video is not None]
    video_stack = np.concatenate(video_list, axis=0) if video_list else None

    audio_hist, video_hist = audio_stack, video_stack
    if cfg.history_noise > 0:
        r = rngmod.stream(seed, "history-noise", step)
        sigma = r.uniform(0.0, cfg.history_noise, size=len(batch)).astype(np.float32)
        sig_audio = np.concatenate([np.full(ex.n_patches, sigma[b]) for b, ex in enumerate(batch)])
        audio_hist = audio_stack + sig_audio[:, None, None] * r.standard_normal(audio_stack.shape).astype(np.float32)
        if video_stack is not None:
            sig_video = np.concatenate(
                [np.full(ex.n_patches, sigma[b]) for b, ex in enumerate(batch) if ex.video is not None]
            )
            video_hist = video_stack + sig_video[:, None, None] * r.standard_normal(video_stack.shape).astype(np.float32)

    audio_embs = model.audio_encoder.encode_batch(audio_hist)
    video_embs = model.video_encoder.encode_batch(video_hist) if video_stack is not None else None

    layouts = []
    a_off = v_off = 0
    for ex in batch:
        n = ex.n_patches
        a_rows = audio_embs[a_off : a_off + n]
        a_off += n
        v_rows = None
        if ex.video is not None:
            v_rows = video_embs[v_off : v_off + n]
            v_off += n
        layouts.append(model.backbone.build_sequence(ex.script.symbols, a_rows, v_rows, mode, ex.tag))

    max_len = max(lay.length for lay in layouts)
    hidden = model.backbone.forward_hidden(tz.pad_stack([lay.tokens for lay in layouts], max_len))

    audio_b, audio_p, video_b, video_p = [], [], [], []
    stop_b, stop_p, stop_labels = [], [], []
    for b, (ex, lay) in enumerate(zip(batch, layouts)):
        audio_b += [b] * ex.n_patches
        audio_p += lay.audio_cond
        if ex.video is not None:
            video_b += [b] * ex.n_patches
            video_p += lay.video_cond
        stop_b += [b] * ex.n_patches
        stop_p += lay.stop_pos
        stop_labels.append(ex.stop_labels())

    audio_counts = [ex.n_patches for ex in batch]
    audio_hist_split = np.split(audio_hist, np.cumsum(audio_counts)[:-1])
    ctx_rng = rngmod.stream(seed, "context-drop", step)

    h_audio = hidden[(np.asarray(audio_b), np.asarray(audio_p))]
    audio_ctx = np.concatenate([_context_windows(h) for h in audio_hist_split], axis=0)
    if cfg.context_drop > 0:
        audio_ctx[ctx_rng.random(len(audio_ctx)) < cfg.context_drop] = 0.0
    audio_global = np.concatenate(
        [np.repeat(ex.audio[0].mean(axis=0, keepdims=True), ex.n_patches, axis=0) for ex in batch],
        axis=0,
    )
    bundle_a = ConditioningBundle(h=h_audio, global_cond=audio_global, context=audio_ctx)
    bundle_a = drop_condition(bundle_a, cfg.p_drop, rngmod.stream(seed, "drop-audio", step))
    loss_audio = model.audio_head.cfm_loss(audio_stack, bundle_a, rngmod.stream(seed, "flow-audio", step))

    if video_stack is not None:
        video_counts = [ex.n_patches for ex in batch if ex.video is not None]
        video_hist_split = np.split(video_hist, np.cumsum(video_counts)[:-1])
        h_video = hidden[(np.asarray(video_b), np.asarray(video_p))]
        video_ctx = np.concatenate([_context_windows(h) for h in video_hist_split], axis=0)
        if cfg.context_drop > 0:
            video_ctx[ctx_rng.random(len(video_ctx)) < cfg.context_drop] = 0.0
        video_global = np.concatenate(
            [np.repeat(ex.video[0][:1], ex.n_patches, axis=0) for ex in batch if ex.video is not None],
            axis=0,
        )
        bundle_v = ConditioningBundle(h=h_video, global_cond=video_global, context=video_ctx)
        bundle_v = drop_condition(bundle_v, cfg.p_drop, rngmod.stream(seed, "drop-video", step))
        loss_video = model.video_head.cfm_loss(video_stack, bundle_v, rngmod.stream(seed, "flow-video", step))
    else:
        loss_video = Tensor(np.float64(0.0))

    h_stop = hidden[(np.asarray(stop_b), np.asarray(stop_p))]
    probs = model.stop.probability(h_stop)
    loss_stop = stop_loss(probs, np.concatenate(stop_labels))

    # combine at float64 so the logged decomposition is exact
    a64 = loss_audio.to_dtype(np.float64)
    v64 = loss_video.to_dtype(np.float64)
    s64 = loss_stop.to_dtype(np.float64)
    total = a64 + cfg.lambda_video * v64 + cfg.alpha_stop * s64
    if not np.isfinite(total.data):
        raise NumericsError(f"non-finite total loss at step {step}")
    components = {
        "loss_total": float(total.data),
        "loss_audio": float(a64.data),
        "loss_video": float(v64.data),
        "loss_stop": float(s64.data),
    }
    return total, components


def train_step(
    model: Model,
    opt_state: OptimizerState,
    batch: list[Example],
    step: int,
    schedule: LrSchedule,
) -> dict:
    cfg = model.config
    try:
        total, components = compute_total_loss(model, batch, step)
        grads = gradients(total, model.parameter_set())
    except NumericsError as exc:
        raise TrainingError(f"aborting at step {step}: {exc}") from exc
    clip_gradients(grads, cfg.grad_clip)
    lr = schedule.lr_at(step)
    adamw_step(
        model.parameter_set(), grads, opt_state, lr,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
    )
    record = {"step": step, "lr": lr}
    record.update(components)
    return record


def train(
    config: TrainConfig,
    out_dir: str | Path | None = None,
    progress: bool = False,
) -> tuple[Model, OptimizerState, list[dict]]:
    """Full training run; optionally writes metrics JSONL and a final checkpoint."""
    from .checkpoint import save_checkpoint

    model = Model(config)
    corpus = build_corpus(model.codec, config)
    model.stats = fit_corpus_stats(model.codec, corpus)
    schedule = LrSchedule(config.peak_lr, config.total_steps, config.warmup_fraction)
    opt_state = OptimizerState.for_params(model.parameter_set())

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_path / "metrics.jsonl").open("w", encoding="utf-8")

    history: list[dict] = []
    example_cache: dict = {}
    started = time.monotonic()
    try:
        for step in range(config.total_steps):
            batch = assemble_batch(corpus, model.codec, model.stats, config, step, cache=example_cache)
            record = train_step(model, opt_state, batch, step, schedule)
            history.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps({k: record[k] for k in METRIC_FIELDS}) + "\n")
            if progress and (step % config.log_every == 0 or step == config.total_steps - 1):
                elapsed = time.monotonic() - started
                print(
                    f"step {step:>6}  lr {record['lr']:.2e}  total {record['loss_total']:.4f}  "
                    f"audio {record['loss_audio']:.4f}  video {record['loss_video']:.4f}  "
                    f"stop {record['loss_stop']:.4f}  [{elapsed:.0f}s]",
                    flush=True,
                )
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint.ttav", model, opt_state)
    return model, opt_state, history
