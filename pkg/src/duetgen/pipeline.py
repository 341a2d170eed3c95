"""Inference orchestration and oracle-based evaluation.

Three generation tasks share one trained model:
  t2av  - both heads sample each patch,
  a2v   - ground-truth audio patches drive the backbone, video is sampled,
  v2a   - ground-truth video patches drive the backbone, audio is sampled.
Generated patches are re-encoded through the patch encoders to form the
next autoregressive token (closed loop).  Evaluation scores generated
streams against the oracle rendering: normalized-latent MSE, the codec
sync score, and patch-count error.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from . import rng as rngmod
from . import tensor as tz
from .backbone import TAG_T2AV
from .codec import (
    AUDIO_DIM,
    VIDEO_DIM,
    CodecError,
    LatentStream,
    SymbolScript,
    denormalize_frames,
    normalize_frames,
)
from .config import TrainConfig
from .diffusion_head import ConditioningBundle
from .model import Model

TASKS = ("t2av", "a2v", "v2a")


class GenerationError(ValueError):
    """Request inconsistent with the model or conditioning stream."""


@dataclass
class GenerationRequest:
    mode: str
    script: SymbolScript
    cond_stream: LatentStream | None = None
    steps: int = 10
    temperature: float = 0.7
    cfg_scale: float = 2.0
    stop_threshold: float = 0.5
    max_patches: int = 32
    seed: int = 0


@dataclass
class GenerationResult:
    audio: LatentStream
    video: LatentStream
    n_patches: int
    stop_probs: list[float]
    duration_s: float
    # loop internals kept for self-consistency checks: the normalized
    # patches actually fed back, and the hidden state after each token
    norm_audio_patches: list[np.ndarray] = field(default_factory=list)
    norm_video_patches: list[np.ndarray] = field(default_factory=list)
    hidden_trace: list[np.ndarray] = field(default_factory=list)
    token_trace: list[np.ndarray] = field(default_factory=list)


def _validate_request(model: Model, request: GenerationRequest) -> None:
    if request.mode not in TASKS:
        raise GenerationError(f"unknown mode {request.mode!r}")
    if not model.mode.supports_task(request.mode):
        raise GenerationError(f"fusion mode {model.mode.name} cannot serve {request.mode}")
    if model.stats is None:
        raise GenerationError("model has no normalization stats (untrained checkpoint?)")
    if request.mode == "t2av":
        if request.cond_stream is not None:
            raise GenerationError("t2av takes no conditioning stream")
        return
    expected = "audio" if request.mode == "a2v" else "video"
    if request.cond_stream is None:
        raise GenerationError(f"{request.mode} requires a conditioning {expected} stream")
    if request.cond_stream.modality != expected:
        raise GenerationError(
            f"{request.mode} needs a {expected} stream, got {request.cond_stream.modality}"
        )
    if request.cond_stream.n_frames % model.config.patch:
        raise GenerationError(
            f"conditioning stream length {request.cond_stream.n_frames} not a multiple of P={model.config.patch}"
        )
    if request.cond_stream.n_frames == 0:
        raise GenerationError("empty conditioning stream")


class _Generator:
    """State for one autoregressive generation session."""

    def __init__(self, model: Model, request: GenerationRequest):
        self.model = model
        self.req = request
        self.cfg = model.config
        self.p = model.config.patch
        cond_norm = None
        if request.cond_stream is not None:
            cond_norm = normalize_frames(request.cond_stream.frames, model.stats, request.cond_stream.modality)
            self.n_cond = cond_norm.shape[0] // self.p
        else:
            self.n_cond = None
        self.cond_patches = cond_norm.reshape(-1, self.p, cond_norm.shape[-1]) if cond_norm is not None else None

        # identity anchors: taken from the conditioning stream when it supplies
        # the modality, otherwise from the oracle rendering of the script (the
        # stand-in for the reference speech / identity image inputs)
        oracle_audio, oracle_video = model.codec.render_streams(request.script)
        audio_src = cond_norm if request.mode == "a2v" else normalize_frames(oracle_audio.frames, model.stats, "audio")
        video_src = cond_norm if request.mode == "v2a" else normalize_frames(oracle_video.frames, model.stats, "video")
        self.audio_global = audio_src[: self.p].mean(axis=0)
        self.video_global = video_src[0]

        self.audio_patches: list[np.ndarray] = []
        self.video_patches: list[np.ndarray] = []
        self.stop_probs: list[float] = []
        self.hidden_trace: list[np.ndarray] = []
        self.token_trace: list[np.ndarray] = []
        self.cache = model.backbone.new_cache()
        prefix = self._prefix_tokens()
        self.h_last = model.backbone.incremental_forward(self.cache, prefix)[-1]

    def _prefix_tokens(self) -> np.ndarray:
        bb = self.model.backbone
        text = bb.text_table.data[np.asarray(self.req.script.symbols, dtype=np.intp)]
        return np.concatenate([bb.tag_t2av.data[None, :], text], axis=0)

    def _encode(self, modality: str, patch: np.ndarray) -> np.ndarray:
        encoder = self.model.encoder_for(modality)
        with tz.no_grad():
            return encoder.encode_patch(patch).data

    def _sample(self, modality: str, h: np.ndarray, index: int) -> np.ndarray:
        head = self.model.head_for(modality)
        prev = self.audio_patches if modality == "audio" else self.video_patches
        context = prev[-1] if prev else np.zeros((self.p, head.latent_dim), dtype=np.float32)
        gcond = self.audio_global if modality == "audio" else self.video_global
        cond = ConditioningBundle(h=h, global_cond=gcond, context=context)
        rng = rngmod.stream(self.req.seed, f"sample-{modality}", index)
        return head.euler_sample(
            cond, rng,
            steps=self.req.steps,
            temperature=self.req.temperature,
            cfg_scale=self.req.cfg_scale,
        )

    def _feed(self, token: np.ndarray) -> np.ndarray:
        self.token_trace.append(token.copy())
        self.h_last = self.model.backbone.incremental_forward(self.cache, token)[-1]
        self.hidden_trace.append(self.h_last.copy())
        return self.h_last

    def _stop_prob(self, h: np.ndarray) -> float:
        with tz.no_grad():
            return float(self.model.stop.probability(h).data[0])

    def _next_audio(self, index: int) -> np.ndarray:
        if self.req.mode == "a2v":
            return self.cond_patches[index]
        return self._sample("audio", self.h_last, index)

    def _next_video(self, index: int, h: np.ndarray | None = None) -> np.ndarray:
        if self.req.mode == "v2a":
            return self.cond_patches[index]
        return self._sample("video", h if h is not None else self.h_last, index)

    # -- per-fusion-mode loops ----------------------------------------------

    def run(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        kind = self.model.mode.kind
        if kind == "add":
            self._run_add()
        elif kind in ("interleave_av", "interleave_va"):
            self._run_interleaved(audio_first=kind == "interleave_av")
        else:
            self._run_delay()
        return self.audio_patches, self.video_patches

    def _limit(self) -> int:
        if self.n_cond is not None:
            return min(self.n_cond, self.req.max_patches)
        return self.req.max_patches

    def _run_add(self) -> None:
        limit = self._limit()
        i = 0
        while True:
            audio = self._next_audio(i)
            video = self._next_video(i)
            self.audio_patches.append(audio)
            self.video_patches.append(video)
            token = self._encode("audio", audio) + self._encode("video", video)
            h = self._feed(token)
            p = self._stop_prob(h)
            self.stop_probs.append(p)
            i += 1
            if i >= limit or (self.n_cond is None and p > self.req.stop_threshold):
                return

    def _run_interleaved(self, audio_first: bool) -> None:
        limit = self._limit()
        i = 0
        while True:
            if audio_first:
                audio = self._next_audio(i)
                h_mid = self._feed(self._encode("audio", audio))
                video = self._next_video(i, h_mid)
                h = self._feed(self._encode("video", video))
            else:
                video = self._next_video(i)
                h_mid = self._feed(self._encode("video", video))
                audio = self._sample("audio", h_mid, i)
                h = self._feed(self._encode("audio", audio))
            self.audio_patches.append(audio)
            self.video_patches.append(video)
            p = self._stop_prob(h)
            self.stop_probs.append(p)
            i += 1
            if i >= limit or (self.n_cond is None and p > self.req.stop_threshold):
                return

    def _run_delay(self) -> None:
        k = self.model.mode.delay
        limit = self._limit()
        n_audio = self.n_cond if self.n_cond is not None else None
        if n_audio is not None:
            n_audio = min(n_audio, self.req.max_patches)
        pad = self.model.backbone.pad.data
        s = 0
        while True:
            audio_active = n_audio is None or s < n_audio
            if audio_active:
                audio = self._next_audio(s)
                self.audio_patches.append(audio)
                a_emb = self._encode("audio", audio)
            else:
                a_emb = pad
            j = s - k
            if j >= 0 and (n_audio is None or j < n_audio):
                video = self._next_video(j)
                self.video_patches.append(video)
                v_emb = self._encode("video", video)
            else:
                v_emb = pad
            h = self._feed(a_emb + v_emb)
            if audio_active:
                p = self._stop_prob(h)
                self.stop_probs.append(p)
                if n_audio is None and (p > self.req.stop_threshold or len(self.audio_patches) >= limit):
                    n_audio = len(self.audio_patches)
            s += 1
            if n_audio is not None and len(self.video_patches) >= n_audio:
                # trim any audio sampled past the decided length (none by construction)
                del self.audio_patches[n_audio:]
                return


def generate(model: Model, request: GenerationRequest) -> GenerationResult:
    """Run one generation session; streams come back denormalized."""
    _validate_request(model, request)
    started = time.monotonic()
    session = _Generator(model, request)
    audio_patches, video_patches = session.run()
    n = len(audio_patches)
    audio_norm = np.concatenate(audio_patches, axis=0)
    video_norm = np.concatenate(video_patches, axis=0)
    if request.mode == "a2v":
        audio = LatentStream(request.cond_stream.frames[: n * model.config.patch].copy(), "audio")
    else:
        audio = LatentStream(denormalize_frames(audio_norm, model.stats, "audio"), "audio")
    if request.mode == "v2a":
        video = LatentStream(request.cond_stream.frames[: n * model.config.patch].copy(), "video")
    else:
        video = LatentStream(denormalize_frames(video_norm, model.stats, "video"), "video")
    return GenerationResult(
        audio=audio,
        video=video,
        n_patches=n,
        stop_probs=session.stop_probs,
        duration_s=time.monotonic() - started,
        norm_audio_patches=audio_patches,
        norm_video_patches=video_patches,
        hidden_trace=session.hidden_trace,
        token_trace=session.token_trace,
    )


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalSettings:
    task: str = "t2av"
    steps: int = 10
    temperature: float = 0.7
    cfg_scale: float = 2.0
    stop_threshold: float = 0.5
    max_patches: int = 32
    seed: int = 0


@dataclass
class EvalRow:
    script_seed: int
    n_oracle: int
    n_generated: int
    length_error: int
    audio_mse: float
    video_mse: float
    sync_score: float


@dataclass
class MetricsReport:
    task: str
    rows: list[EvalRow]
    aggregates: dict[str, float]


def _normalized_mse(model: Model, generated: LatentStream, oracle: LatentStream) -> float:
    """MSE in normalized latent space over the overlapping frame prefix."""
    n = min(generated.n_frames, oracle.n_frames)
    g = normalize_frames(generated.frames[:n], model.stats, generated.modality)
    o = normalize_frames(oracle.frames[:n], model.stats, oracle.modality)
    return float(np.mean((g - o) ** 2))


def compute_aggregates(rows: list[EvalRow]) -> dict[str, float]:
    def col(name):
        return np.array([getattr(r, name) for r in rows], dtype=np.float64)

    n_oracle = col("n_oracle")
    n_generated = col("n_generated")
    if len(rows) > 1 and np.unique(n_oracle).size > 1 and np.unique(n_generated).size > 1:
        spearman = float(scipy_stats.spearmanr(n_oracle, n_generated).statistic)
    else:
        spearman = float("nan")
    out = {}
    for name in ("audio_mse", "video_mse", "sync_score", "length_error"):
        values = col(name)
        out[f"{name}_mean"] = float(values.mean())
        out[f"{name}_median"] = float(np.median(values))
    out["length_within_1_frac"] = float((col("length_error") <= 1).mean())
    out["length_spearman"] = spearman
    return out


def evaluate(model: Model, scripts: list[SymbolScript], settings: EvalSettings) -> MetricsReport:
    """Generate for each held-out script and score against the oracle rendering."""
    if not scripts:
        raise CodecError("empty evaluation corpus")
    rows = []
    for i, script in enumerate(scripts):
        oracle_audio, oracle_video = model.codec.render_streams(script)
        cond = None
        if settings.task == "a2v":
            cond = oracle_audio
        elif settings.task == "v2a":
            cond = oracle_video
        request = GenerationRequest(
            mode=settings.task,
            script=script,
            cond_stream=cond,
            steps=settings.steps,
            temperature=settings.temperature,
            cfg_scale=settings.cfg_scale,
            stop_threshold=settings.stop_threshold,
            max_patches=settings.max_patches,
            seed=rngmod.derive_seed(settings.seed, "eval-request", i),
        )
        result = generate(model, request)
        n_oracle = oracle_audio.n_frames // model.config.patch
        rows.append(
            EvalRow(
                script_seed=script.seed,
                n_oracle=n_oracle,
                n_generated=result.n_patches,
                length_error=abs(result.n_patches - n_oracle),
                audio_mse=_normalized_mse(model, result.audio, oracle_audio),
                video_mse=_normalized_mse(model, result.video, oracle_video),
                sync_score=model.codec.sync_score(result.audio, result.video),
            )
        )
    return MetricsReport(task=settings.task, rows=rows, aggregates=compute_aggregates(rows))


EVAL_CSV_COLUMNS = (
    "script_seed", "n_oracle", "n_generated", "length_error", "audio_mse", "video_mse", "sync_score",
)


def write_report_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_CSV_COLUMNS)
        for row in report.rows:
            writer.writerow([repr(getattr(row, c)) if isinstance(getattr(row, c), float) else getattr(row, c) for c in EVAL_CSV_COLUMNS])


# -- token-arrangement ablation -----------------------------------------------------


@dataclass
class AblationRow:
    fusion: str
    task: str
    seed: str  # seed index or "mean"
    status: str  # "ok" | "failed"
    sync_score: float
    audio_mse: float
    video_mse: float
    length_error_mean: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    violations: list[str]
    failed: list[str]


ABLATION_CSV_COLUMNS = (
    "fusion", "task", "seed", "status", "sync_score", "audio_mse", "video_mse", "length_error_mean",
)


def _mode_task_mean(rows: list[AblationRow], fusion: str, task: str) -> float | None:
    for row in rows:
        if row.fusion == fusion and row.task == task and row.seed == "mean" and row.status == "ok":
            return row.sync_score
    return None


def check_ordering(rows: list[AblationRow]) -> list[str]:
    """Soft qualitative ordering: add >= interleave_av > delay_1 > delay_3 on
    t2av sync; delay_3 >= delay_1 under a2v.  Returns violated clauses."""
    tol = 0.02  # "add and interleave_av are comparable"
    get = lambda fusion, task: _mode_task_mean(rows, fusion, task)
    violations = []
    pairs = [
        ("add", "interleave_av", "t2av", tol, "add >~ interleave_av (t2av)"),
        ("interleave_av", "delay_1", "t2av", 0.0, "interleave_av > delay_1 (t2av)"),
        ("delay_1", "delay_3", "t2av", 0.0, "delay_1 > delay_3 (t2av)"),
        ("delay_3", "delay_1", "a2v", 0.0, "delay_3 >= delay_1 (a2v)"),
    ]
    for hi, lo, task, slack, label in pairs:
        a, b = get(hi, task), get(lo, task)
        if a is None or b is None:
            continue
        if a + slack < b:
            violations.append(f"{label}: {a:.4f} vs {b:.4f}")
    return violations


def run_ablation(
    modes: list[str],
    base_config: TrainConfig,
    n_seeds: int = 3,
    settings: EvalSettings | None = None,
    extra_tasks: dict[str, list[str]] | None = None,
    progress: bool = False,
) -> AblationResult:
    """Train one model per (mode, seed) on identical data and compare layouts.

    All runs share scripts and batch draws (only the token arrangement
    differs).  Delay modes are additionally evaluated audio-driven.  A
    failed constituent run is flagged and the remaining rows are kept.
    """
    from .trainer import eval_scripts, train

    if len(modes) < 2:
        raise ValueError("ablation needs at least two fusion modes")
    settings = settings or EvalSettings()
    rows: list[AblationRow] = []
    failed: list[str] = []
    for mode in modes:
        per_task: dict[str, list[MetricsReport]] = {}
        for seed_i in range(n_seeds):
            cfg = replace(base_config, fusion=mode, seed=base_config.seed + seed_i)
            tasks = ["t2av"]
            if mode.startswith("delay"):
                tasks.append("a2v")
            for extra in (extra_tasks or {}).get(mode, []):
                if extra not in tasks:
                    tasks.append(extra)
            try:
                model, _, _ = train(cfg, out_dir=None, progress=progress)
            except Exception as exc:  # noqa: BLE001 - constituent failure is data
                failed.append(f"{mode}/seed{seed_i}: {exc}")
                for task in tasks:
                    rows.append(AblationRow(mode, task, str(seed_i), "failed",
                                            float("nan"), float("nan"), float("nan"), float("nan")))
                continue
            scripts = eval_scripts(model.codec, cfg)
            for task in tasks:
                report = evaluate(model, scripts, replace(settings, task=task))
                per_task.setdefault(task, []).append(report)
                agg = report.aggregates
                rows.append(
                    AblationRow(
                        mode, task, str(seed_i), "ok",
                        agg["sync_score_mean"], agg["audio_mse_mean"],
                        agg["video_mse_mean"], agg["length_error_mean"],
                    )
                )
        for task, reports in per_task.items():
            aggs = [r.aggregates for r in reports]
            rows.append(
                AblationRow(
                    mode, task, "mean", "ok",
                    float(np.mean([a["sync_score_mean"] for a in aggs])),
                    float(np.mean([a["audio_mse_mean"] for a in aggs])),
                    float(np.mean([a["video_mse_mean"] for a in aggs])),
                    float(np.mean([a["length_error_mean"] for a in aggs])),
                )
            )
    return AblationResult(rows=rows, violations=check_ordering(rows), failed=failed)


def write_ablation_csv(result: AblationResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_CSV_COLUMNS)
        for row in result.rows:
            writer.writerow([
                row.fusion, row.task, row.seed, row.status,
                repr(row.sync_score), repr(row.audio_mse), repr(row.video_mse), repr(row.length_error_mean),
            ])
        for v in result.violations:
            writer.writerow(["# ordering-violation", v, "", "", "", "", "", ""])
