"""TTAV checkpoint format: versioned named-tensor serialization.

Layout (little-endian):
  magic "TTAV" | u16 version | u32 config-blob length | UTF-8 config text |
  u32 tensor count | per tensor: u16 name length, name, u8 rank,
  rank*u32 extents, float32 payload

The config blob is a `step=N` line followed by the TrainConfig echo.
Tensors cover every parameter, both AdamW moments, and the
normalization statistics.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import LatentStats, ModalityStats
from .config import TrainConfig, parse_config_text
from .model import Model
from .optim import OptimizerState

MAGIC = b"TTAV"
VERSION = 1

# fields that must agree between a checkpoint and the model it loads into
ARCH_FIELDS = (
    "width", "heads", "backbone_layers", "encoder_layers", "head_layers", "head_width",
    "patch", "vocab", "fusion", "codec_seed", "articulation_dim", "pose_dim",
    "noise_scale", "pose_amp",
)


class CheckpointError(ValueError):
    """Corrupt file, unknown version, or config/shape mismatch."""


@dataclass
class CheckpointData:
    config: TrainConfig
    step: int
    tensors: dict[str, np.ndarray]


def _collect_tensors(model: Model, opt_state: OptimizerState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.parameter_set().items():
        tensors[f"param.{name}"] = t.data
    for name in model.parameter_set().names():
        tensors[f"optim.m.{name}"] = opt_state.m[name]
        tensors[f"optim.v.{name}"] = opt_state.v[name]
    if model.stats is None:
        raise CheckpointError("model has no fitted normalization stats")
    for modality in ("audio", "video"):
        stats = model.stats.for_modality(modality)
        tensors[f"stats.{modality}.mean"] = stats.mean
        tensors[f"stats.{modality}.std"] = stats.std
    return tensors


def save_checkpoint(path: str | Path, model: Model, opt_state: OptimizerState) -> None:
    tensors = _collect_tensors(model, opt_state)
    blob = (f"step={opt_state.step}\n" + model.config.to_text()).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> CheckpointData:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def need(n: int) -> memoryview:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint (need {n} bytes at offset {off})")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(need(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", need(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", need(4))
    blob = bytes(need(blob_len)).decode("utf-8")
    first, _, config_text = blob.partition("\n")
    if not first.startswith("step="):
        raise CheckpointError(f"{path}: missing step header in config blob")
    step = int(first.split("=", 1)[1])
    config = parse_config_text(config_text)
    (count,) = struct.unpack("<I", need(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = bytes(need(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", need(1))
        shape = struct.unpack(f"<{rank}I", need(4 * rank))
        n_values = int(np.prod(shape)) if rank else 1
        payload = need(4 * n_values)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return CheckpointData(config=config, step=step, tensors=tensors)


def restore_stats(data: CheckpointData) -> LatentStats:
    return LatentStats(
        audio=ModalityStats(data.tensors["stats.audio.mean"], data.tensors["stats.audio.std"]),
        video=ModalityStats(data.tensors["stats.video.mean"], data.tensors["stats.video.std"]),
    )


def load_into_model(model: Model, data: CheckpointData) -> OptimizerState:
    """Install checkpoint tensors into an existing model; configs must agree."""
    for field in ARCH_FIELDS:
        have = getattr(model.config, field)
        want = getattr(data.config, field)
        if have != want:
            raise CheckpointError(f"config mismatch on {field!r}: checkpoint has {want}, model has {have}")
    params = {}
    opt_state = OptimizerState(step=data.step)
    for name, arr in data.tensors.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("optim.m."):
            opt_state.m[name[len("optim.m.") :]] = arr.copy()
        elif name.startswith("optim.v."):
            opt_state.v[name[len("optim.v.") :]] = arr.copy()
    try:
        model.load_values(params)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    model.stats = restore_stats(data)
    return opt_state


def build_model(data: CheckpointData) -> tuple[Model, OptimizerState]:
    """Fresh model exactly as configured in the checkpoint."""
    model = Model(data.config)
    opt_state = load_into_model(model, data)
    return model, opt_state


def describe(data: CheckpointData) -> dict:
    n_params = sum(t.size for name, t in data.tensors.items() if name.startswith("param."))
    return {
        "version": VERSION,
        "step": data.step,
        "fusion": data.config.fusion,
        "n_parameter_values": int(n_params),
        "n_tensors": len(data.tensors),
        "fields": dataclasses.asdict(data.config),
    }
