"""Run configuration and the plain-text key=value config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config text or unknown key."""


@dataclass
class TrainConfig:
    # model architecture (desk scale; the reference system is far larger)
    width: int = 64
    heads: int = 4
    backbone_layers: int = 4
    encoder_layers: int = 2
    head_layers: int = 2
    head_width: int = 64
    patch: int = 4
    vocab: int = 64
    fusion: str = "add"
    # synthetic codec / corpus
    codec_seed: int = 7
    articulation_dim: int = 16
    pose_dim: int = 6
    noise_scale: float = 0.02
    pose_amp: float = 0.3
    min_patches: int = 3
    max_patches_data: int = 15
    train_scripts: int = 2000
    tts_scripts: int = 2000
    eval_scripts: int = 200
    # optimization
    seed: int = 0
    batch_size: int = 32
    total_steps: int = 5000
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_video: float = 8.0
    alpha_stop: float = 1.0
    p_drop: float = 0.1
    grad_clip: float = 1.0
    history_noise: float = 0.3
    context_drop: float = 0.2
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_video <= 0 or self.alpha_stop <= 0:
            raise ConfigError("loss weights must be positive")
        if self.patch < 1:
            raise ConfigError("patch must be >= 1")
        if self.min_patches < 1 or self.max_patches_data < self.min_patches:
            raise ConfigError("invalid patch-count range")

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    if f.type == "int":
        return int(raw)
    if f.type == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from exc
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
