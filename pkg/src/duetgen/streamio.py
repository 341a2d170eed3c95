"""TLAT binary file format for latent streams.

Layout (all little-endian):
  magic "TLAT" | u16 version | u8 modality | u8 reserved |
  u32 frame_count | u16 dim | u16 frame_rate | frame_count*dim float32, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codec import MODALITY_DIMS, LatentStream

MAGIC = b"TLAT"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIHH")
MODALITY_CODES = {"audio": 0, "video": 1}
_CODE_TO_MODALITY = {v: k for k, v in MODALITY_CODES.items()}


class StreamFormatError(ValueError):
    """Corrupt or unsupported TLAT file."""


def write_stream(path: str | Path, stream: LatentStream) -> None:
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        MODALITY_CODES[stream.modality],
        0,
        stream.n_frames,
        stream.dim,
        stream.frame_rate,
    )
    payload = np.ascontiguousarray(stream.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_stream(path: str | Path) -> LatentStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StreamFormatError(f"{path}: file shorter than TLAT header")
    magic, version, modality_code, _, frame_count, dim, frame_rate = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StreamFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StreamFormatError(f"{path}: unsupported TLAT version {version}")
    if modality_code not in _CODE_TO_MODALITY:
        raise StreamFormatError(f"{path}: unknown modality code {modality_code}")
    modality = _CODE_TO_MODALITY[modality_code]
    if dim != MODALITY_DIMS[modality]:
        raise StreamFormatError(f"{path}: dim {dim} invalid for {modality}")
    expected = _HEADER.size + 4 * frame_count * dim
    if len(raw) != expected:
        raise StreamFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(frame_count, dim)
    return LatentStream(frames.copy(), modality, frame_rate)
