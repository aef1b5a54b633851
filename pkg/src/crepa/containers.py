"""Flat binary containers for videos, encoder weights and model checkpoints.

All multi-byte integers are little-endian. Layouts:

* video   ("CRPV"): magic, version u32, F/H/W/C u32, then F*H*W*C float32.
* weights ("CRPE"/"CRPD"): magic, version u32, u32 JSON config echo length,
  config bytes, u32 section count, then per section u16 name length, name,
  u32 float count, float32 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError

VIDEO_MAGIC = b"CRPV"
ENCODER_MAGIC = b"CRPE"
DIT_MAGIC = b"CRPD"
FORMAT_VERSION = 1


def write_video(path, video: np.ndarray) -> None:
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4:
        raise DimensionError(f"video must be F,H,W,C; got shape {video.shape}")
    f, h, w, c = video.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, f, h, w, c))
        fh.write(video.astype("<f4").tobytes())


def read_video(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VIDEO_MAGIC:
            raise IOError(f"{path}: bad magic {magic!r}, expected {VIDEO_MAGIC!r}")
        version, f, h, w, c = struct.unpack("<5I", fh.read(20))
        if version != FORMAT_VERSION:
            raise IOError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(f * h * w * c * 4), dtype="<f4")
    if data.size != f * h * w * c:
        raise IOError(f"{path}: truncated payload")
    return data.reshape(f, h, w, c).copy()


def write_sections(path, magic: bytes, config: dict, sections: dict[str, np.ndarray]) -> None:
    """Write named float32 blobs with a JSON config echo."""
    cfg = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections.items():
            flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", flat.size))
            fh.write(flat.tobytes())


def read_sections(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise IOError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise IOError(f"{path}: unsupported version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(cfg_len).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        sections: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (size,) = struct.unpack("<I", fh.read(4))
            sections[name] = np.frombuffer(fh.read(size * 4), dtype="<f4").copy()
    return config, sections


def section_bytes(sections: dict[str, np.ndarray]) -> bytes:
    """Concatenated weight bytes in section order, as hashed by fingerprints."""
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in sections.values())


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
