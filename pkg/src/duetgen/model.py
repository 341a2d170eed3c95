"""Full model assembly: encoders, backbone, stop predictor, and both heads."""

from __future__ import annotations

import numpy as np

from . import rng as rngmod
from .backbone import Backbone, FusionMode, StopPredictor, parse_fusion_mode
from .codec import AUDIO_DIM, VIDEO_DIM, CodecConfig, LatentCodec, LatentStats
from .config import TrainConfig
from .diffusion_head import DiffusionHead
from .params import ParameterSet
from .patch_encoder import PatchEncoder


class Model:
    """All learnable components plus the codec and normalization stats."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.mode: FusionMode = parse_fusion_mode(config.fusion)
        self.codec = LatentCodec(
            CodecConfig(
                seed=config.codec_seed,
                vocab=config.vocab,
                articulation_dim=config.articulation_dim,
                pose_dim=config.pose_dim,
                patch_frames=config.patch,
                noise_scale=config.noise_scale,
                pose_amp=config.pose_amp,
            )
        )
        seed = config.seed
        self.audio_encoder = PatchEncoder(
            rngmod.stream(seed, "init.audio_encoder"),
            AUDIO_DIM, config.width, config.patch, config.encoder_layers, config.heads,
        )
        self.video_encoder = PatchEncoder(
            rngmod.stream(seed, "init.video_encoder"),
            VIDEO_DIM, config.width, config.patch, config.encoder_layers, config.heads,
        )
        self.backbone = Backbone(
            rngmod.stream(seed, "init.backbone"),
            config.width, config.vocab, config.backbone_layers, config.heads,
        )
        self.stop = StopPredictor(rngmod.stream(seed, "init.stop"), config.width)
        self.audio_head = DiffusionHead(
            rngmod.stream(seed, "init.audio_head"),
            latent_dim=AUDIO_DIM, cond_width=config.width, global_dim=AUDIO_DIM,
            patch=config.patch, width=config.head_width, layers=config.head_layers, heads=config.heads,
        )
        self.video_head = DiffusionHead(
            rngmod.stream(seed, "init.video_head"),
            latent_dim=VIDEO_DIM, cond_width=config.width, global_dim=VIDEO_DIM,
            patch=config.patch, width=config.head_width, layers=config.head_layers, heads=config.heads,
        )
        self.stats: LatentStats | None = None
        self._param_set: ParameterSet | None = None

    def named_params(self):
        modules = (
            ("audio_encoder", self.audio_encoder),
            ("video_encoder", self.video_encoder),
            ("backbone", self.backbone),
            ("stop", self.stop),
            ("audio_head", self.audio_head),
            ("video_head", self.video_head),
        )
        for prefix, module in modules:
            for name, t in module.named_params():
                yield f"{prefix}.{name}", t

    def parameter_set(self) -> ParameterSet:
        if self._param_set is None:
            self._param_set = ParameterSet.from_named(self.named_params(), rng_seed=self.config.seed)
        return self._param_set

    def n_parameters(self) -> int:
        return self.parameter_set().n_values()

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        self.parameter_set().load_values(values)

    def head_for(self, modality: str) -> DiffusionHead:
        return self.audio_head if modality == "audio" else self.video_head

    def encoder_for(self, modality: str) -> PatchEncoder:
        return self.audio_encoder if modality == "audio" else self.video_encoder
