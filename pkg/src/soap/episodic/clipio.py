"""Binary clip files and the dataset manifest.

Clip layout (little-endian)::

    b"SOAPCLIP"  version:u8=1  L:u32 C:u32 H:u32 W:u32  data:f32[L*C*H*W]

Data is in (frame, channel, row, column) order with values in [0, 1].
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SOAPCLIP"
VERSION = 1
_HEADER = struct.Struct("<8sB4I")


class ClipFormatError(ValueError):
    pass


def encode_clip(frames: np.ndarray) -> bytes:
    if frames.ndim != 4:
        raise ValueError(f"clip must be L×C×H×W, got shape {frames.shape}")
    header = _HEADER.pack(MAGIC, VERSION, *frames.shape)
    return header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_clip(blob: bytes) -> np.ndarray:
    """Parse a clip blob into a float32 L×C×H×W array."""
    if len(blob) < _HEADER.size:
        raise ClipFormatError("truncated clip header")
    magic, version, *dims = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ClipFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ClipFormatError(f"unsupported clip version {version}")
    count = int(np.prod(dims))
    body = blob[_HEADER.size :]
    if len(body) != 4 * count:
        raise ClipFormatError(f"expected {4 * count} data bytes for dims {dims}, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(dims)


def write_clip(path: str | Path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_clip(frames))


def read_clip(path: str | Path) -> np.ndarray:
    return decode_clip(Path(path).read_bytes())


def write_manifest(root: str | Path, classes: list[dict], dims: dict) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps({"classes": classes, "dims": dims}, indent=2) + "\n")
    return path


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    manifest = json.loads(path.read_text())
    if "classes" not in manifest or "dims" not in manifest:
        raise ClipFormatError(f"{path}: manifest needs 'classes' and 'dims'")
    return manifest
