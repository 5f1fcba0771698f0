"""Binary checkpoint and clip-feature files."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grammar import CompoundParams, GrammarConfig
from .matching import ClipFeatures

CHECKPOINT_MAGIC = b"MPCF"
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b"VFEA"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def save_checkpoint(params: CompoundParams, path: str | Path) -> None:
    """Header, GrammarConfig as six u32, then named float32 tensors until EOF."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<6I", *params.config.as_tuple())
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<I", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> CompoundParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        config = GrammarConfig(*struct.unpack_from("<6I", raw, 8))
        pos = 32
        tensors = {}
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    params = CompoundParams(config, {})
    for name, value in tensors.items():
        params.add(name, value.astype(np.float64))
    return params


def write_features(features: ClipFeatures, path: str | Path) -> None:
    clips = np.ascontiguousarray(features.clips, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack(
        "<3If", FEATURE_VERSION, clips.shape[0], clips.shape[1], features.seconds_per_clip
    )
    Path(path).write_bytes(header + clips.tobytes())


def read_features(path: str | Path, source_id: str = "") -> ClipFeatures:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    version, count, dim, seconds = struct.unpack_from("<3If", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if len(raw) != 20 + 4 * count * dim:
        raise FormatError(f"{path}: expected {count}x{dim} floats")
    clips = np.frombuffer(raw, dtype="<f4", offset=20).reshape(count, dim)
    return ClipFeatures(clips.astype(np.float64), float(seconds), source_id or Path(path).stem)


def feature_path(directory: str | Path, video_id: str, expert: str | None = None) -> Path:
    """``<video_id>.vfea``, or ``<video_id>.<expert>.vfea`` for one expert stream."""
    name = f"{video_id}.vfea" if expert is None else f"{video_id}.{expert}.vfea"
    return Path(directory) / name


def vocab_path(checkpoint: str | Path) -> Path:
    return Path(str(checkpoint) + ".vocab.json")
