"""Synthetic paired latent codec with oracle ground truth.

A script of discrete symbols drives a hidden per-frame articulation
signal (smooth interpolation between per-symbol anchor vectors plus
seeded low-amplitude noise).  Fixed linear maps with orthonormal columns
render that one signal into a 32-d audio latent stream and a 40-d video
latent stream at the same 25 Hz rate, so frame t of both streams
describes the same instant by construction.  Because the maps are known
and invertible on their content subspaces, synchronization and content
accuracy of generated streams are decidable exactly, without any
external judge.

Also houses the latent-space bottleneck math: reparameterization,
KL penalty, stride arithmetic, and per-dimension normalization stats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as tz
from .tensor import Tensor

AUDIO_DIM = 32
VIDEO_DIM = 40
FRAME_RATE = 25
MODALITY_DIMS = {"audio": AUDIO_DIM, "video": VIDEO_DIM}


class CodecError(ValueError):
    """Invalid script, stream, or stats input."""


@dataclass(frozen=True)
class SymbolScript:
    """A sequence of vocabulary symbols with per-symbol frame durations."""

    symbols: tuple[int, ...]
    durations: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if len(self.symbols) == 0:
            raise CodecError("script must contain at least one symbol")
        if len(self.symbols) != len(self.durations):
            raise CodecError("symbols and durations must have equal length")

    @property
    def total_frames(self) -> int:
        return int(sum(self.durations))


@dataclass
class LatentStream:
    """T x d matrix of continuous latent frames at a fixed frame rate."""

    frames: np.ndarray
    modality: str
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        if self.modality not in MODALITY_DIMS:
            raise CodecError(f"unknown modality {self.modality!r}")
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != MODALITY_DIMS[self.modality]:
            raise CodecError(
                f"{self.modality} stream must be (T, {MODALITY_DIMS[self.modality]}), got {self.frames.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class ModalityStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class LatentStats:
    """Per-dimension normalization statistics, one entry per fitted modality."""

    audio: ModalityStats | None = None
    video: ModalityStats | None = None

    def for_modality(self, modality: str) -> ModalityStats:
        stats = getattr(self, modality, None)
        if stats is None:
            raise CodecError(f"no stats fitted for modality {modality!r}")
        return stats


STD_FLOOR = 1e-6


def fit_stats(corpus: list[LatentStream]) -> LatentStats:
    """Population mean / std per dimension over all frames of each modality."""
    if not corpus:
        raise CodecError("empty corpus")
    out = LatentStats()
    for modality in MODALITY_DIMS:
        frames = [s.frames for s in corpus if s.modality == modality]
        if not frames:
            continue
        stacked = np.concatenate(frames, axis=0)
        if stacked.shape[0] < 2:
            raise CodecError(f"need at least 2 {modality} frames to fit stats")
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), STD_FLOOR)
        setattr(out, modality, ModalityStats(mean.astype(np.float32), std.astype(np.float32)))
    return out


def normalize(stream: LatentStream, stats: LatentStats) -> LatentStream:
    s = stats.for_modality(stream.modality)
    if s.mean.shape[0] != stream.dim:
        raise CodecError("stats dimension mismatch")
    return LatentStream((stream.frames - s.mean) / s.std, stream.modality, stream.frame_rate)


def denormalize(stream: LatentStream, stats: LatentStats) -> LatentStream:
    s = stats.for_modality(stream.modality)
    if s.mean.shape[0] != stream.dim:
        raise CodecError("stats dimension mismatch")
    return LatentStream(stream.frames * s.std + s.mean, stream.modality, stream.frame_rate)


def normalize_frames(frames: np.ndarray, stats: LatentStats, modality: str) -> np.ndarray:
    s = stats.for_modality(modality)
    return ((frames - s.mean) / s.std).astype(np.float32)


def denormalize_frames(frames: np.ndarray, stats: LatentStats, modality: str) -> np.ndarray:
    s = stats.for_modality(modality)
    return (frames * s.std + s.mean).astype(np.float32)


# -- the codec itself ----------------------------------------------------------


@dataclass
class CodecConfig:
    seed: int = 7
    vocab: int = 64
    articulation_dim: int = 16
    pose_dim: int = 6
    patch_frames: int = 4
    noise_scale: float = 0.02
    pose_amp: float = 0.3
    min_duration: int = 2
    max_duration: int = 8


class LatentCodec:
    """Deterministic renderer from symbol scripts to paired latent streams."""

    def __init__(self, config: CodecConfig | None = None):
        self.config = config or CodecConfig()
        c = self.config
        r = rngmod.stream(c.seed, "codec-anchors")
        self.anchors = r.standard_normal((c.vocab, c.articulation_dim))
        r = rngmod.stream(c.seed, "codec-durations")
        self.durations = r.integers(c.min_duration, c.max_duration + 1, size=c.vocab)
        r = rngmod.stream(c.seed, "codec-audio-map")
        fa, _ = np.linalg.qr(r.standard_normal((AUDIO_DIM, c.articulation_dim)))
        self.audio_map = fa  # (32, art), orthonormal columns
        r = rngmod.stream(c.seed, "codec-video-map")
        fv, _ = np.linalg.qr(r.standard_normal((VIDEO_DIM, c.articulation_dim + c.pose_dim)))
        self.video_map = fv[:, : c.articulation_dim]  # (40, art)
        self.pose_map = fv[:, c.articulation_dim :]  # (40, pose), orthogonal to video_map

    # -- script construction ---------------------------------------------

    def intrinsic_durations(self, symbols: tuple[int, ...]) -> tuple[int, ...]:
        """Canonical per-symbol durations (a fixed property of each symbol)."""
        self._check_symbols(symbols)
        return tuple(int(self.durations[s]) for s in symbols)

    def sample_script(self, seed: int, min_patches: int = 3, max_patches: int = 15) -> SymbolScript:
        """Random script whose rendered length lands near a target patch count."""
        c = self.config
        r = rngmod.stream(seed, "script")
        target_frames = int(r.integers(min_patches, max_patches + 1)) * c.patch_frames
        symbols: list[int] = []
        total = 0
        while total < target_frames:
            s = int(r.integers(0, c.vocab))
            symbols.append(s)
            total += int(self.durations[s])
        return SymbolScript(tuple(symbols), self.intrinsic_durations(tuple(symbols)), seed)

    # -- rendering ---------------------------------------------------------

    def _check_symbols(self, symbols) -> None:
        for s in symbols:
            if not (0 <= s < self.config.vocab):
                raise CodecError(f"unknown symbol {s} (vocab {self.config.vocab})")

    def padded_frames(self, script: SymbolScript) -> int:
        p = self.config.patch_frames
        return math.ceil(script.total_frames / p) * p

    def articulation(self, script: SymbolScript) -> np.ndarray:
        """Oracle accessor: the (T, art) articulation signal both streams share."""
        self._check_symbols(script.symbols)
        for d in script.durations:
            if d < 2:
                raise CodecError(f"duration {d} < 2")
        c = self.config
        total = self.padded_frames(script)
        # per-frame symbol index within the script, padding holds the last one
        sym_idx = np.repeat(np.arange(len(script.symbols)), script.durations)
        progress = np.concatenate(
            [(np.arange(d) + 1.0) / d for d in script.durations]
        )
        pad = total - sym_idx.shape[0]
        if pad:
            sym_idx = np.concatenate([sym_idx, np.full(pad, len(script.symbols) - 1)])
            progress = np.concatenate([progress, np.ones(pad)])
        cur = self.anchors[np.asarray(script.symbols)[sym_idx]]
        prev_sym = np.asarray((0,) + script.symbols[:-1])
        prev = self.anchors[prev_sym[sym_idx]]
        prev[sym_idx == 0] = 0.0  # neutral pose before the first symbol
        blend = 0.5 - 0.5 * np.cos(np.pi * progress)
        art = prev + (cur - prev) * blend[:, None]
        if c.noise_scale > 0:
            noise = rngmod.stream(script.seed, "articulation-noise").standard_normal(art.shape)
            art = art + c.noise_scale * noise
        return art

    def pose(self, script: SymbolScript) -> np.ndarray:
        """Slow per-script pose drift (T, pose): seeded low-frequency sinusoids."""
        c = self.config
        total = self.padded_frames(script)
        r = rngmod.stream(script.seed, "pose-drift")
        freqs = r.uniform(0.005, 0.02, size=c.pose_dim)
        phases = r.uniform(0.0, 2.0 * np.pi, size=c.pose_dim)
        t = np.arange(total)[:, None]
        return c.pose_amp * np.sin(2.0 * np.pi * freqs * t + phases)

    def render_streams(self, script: SymbolScript) -> tuple[LatentStream, LatentStream]:
        art = self.articulation(script)
        audio = art @ self.audio_map.T
        video = art @ self.video_map.T + self.pose(script) @ self.pose_map.T
        return (
            LatentStream(audio.astype(np.float32), "audio"),
            LatentStream(video.astype(np.float32), "video"),
        )

    # -- oracle metrics ------------------------------------------------------

    def recover_articulation(self, stream: LatentStream) -> np.ndarray:
        """Invert the content map; the pose subspace is orthogonal and drops out."""
        if stream.modality == "audio":
            return stream.frames @ self.audio_map
        return stream.frames @ self.video_map

    def sync_score(self, audio: LatentStream, video: LatentStream) -> float:
        """Mean per-frame cosine agreement of recovered articulation, mapped to [0,1]."""
        if audio.modality != "audio" or video.modality != "video":
            raise CodecError("sync_score expects (audio, video) streams")
        if audio.n_frames != video.n_frames:
            raise CodecError(f"length mismatch: {audio.n_frames} vs {video.n_frames}")
        a = self.recover_articulation(audio)
        v = self.recover_articulation(video)
        num = (a * v).sum(axis=1)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(v, axis=1) + 1e-12
        cos = num / den
        return float((1.0 + cos.mean()) / 2.0)


# -- bottleneck math -----------------------------------------------------------


def compression_ratio(strides: list[int]) -> int:
    """Product of temporal stride factors."""
    if not strides:
        raise CodecError("empty stride list")
    for s in strides:
        if s < 1:
            raise CodecError(f"stride {s} < 1")
    return int(np.prod(strides))


def latent_rate(sample_rate: float, ratio: int) -> float:
    return sample_rate / ratio


def reparameterize(mu, sigma, eps) -> Tensor:
    """z = mu + sigma * eps; inference uses eps = 0 (posterior mean)."""
    mu, sigma = tz.as_tensor(mu), tz.as_tensor(sigma)
    eps = tz.as_tensor(eps)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise CodecError("reparameterize: shape mismatch")
    if np.any(sigma.data <= 0):
        raise CodecError("sigma must be positive")
    return mu + sigma * eps


def kl_penalty(mu, sigma) -> Tensor:
    """Mean over elements of 0.5 (mu^2 + sigma^2 - 1 - 2 ln sigma)."""
    mu, sigma = tz.as_tensor(mu), tz.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise CodecError("sigma must be positive")
    term = mu * mu + sigma * sigma - 1.0 - 2.0 * tz.log(sigma)
    return tz.mean(term) * 0.5


class VaeBottleneck:
    """Projection to a (mean, scale) split and back, scale through softplus."""

    def __init__(self, feature_dim: int, latent_dim: int = 32, seed: int = 0):
        from .params import bias_init, linear_init

        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        r = rngmod.stream(seed, "vae-bottleneck")
        self.w_in = Tensor(linear_init(r, feature_dim, 2 * latent_dim), requires_grad=True)
        self.b_in = Tensor(bias_init(r, feature_dim, 2 * latent_dim), requires_grad=True)
        self.w_out = Tensor(linear_init(r, latent_dim, feature_dim), requires_grad=True)
        self.b_out = Tensor(bias_init(r, latent_dim, feature_dim), requires_grad=True)

    def encode(self, features) -> tuple[Tensor, Tensor]:
        h = tz.linear(tz.as_tensor(features), self.w_in, self.b_in)
        mu = h[..., : self.latent_dim]
        sigma = tz.softplus(h[..., self.latent_dim :])
        return mu, sigma

    def decode(self, z) -> Tensor:
        return tz.linear(tz.as_tensor(z), self.w_out, self.b_out)

    def named_params(self):
        yield "w_in", self.w_in
        yield "b_in", self.b_in
        yield "w_out", self.w_out
        yield "b_out", self.b_out
