"""Binary checkpoint container.

Byte layout, all integers little-endian::

    magic          4 bytes  b"CFSR"
    format_version u32      currently 1
    config_len     u32
    config         config_len bytes, UTF-8 JSON with sorted keys
    n_tensors      u32
    per tensor (in sorted name order):
        name_len   u16, name (UTF-8)
        ndim       u8,  dims (u32 each)
        payload    prod(dims) float32 little-endian, row-major
    checksum       u32      CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CFSR"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


def dumps(config: dict, tensors: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def loads(data: bytes) -> tuple[dict, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    if len(data) < 16:
        raise CheckpointError("file truncated")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("checksum mismatch; file is corrupt")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format_version {version}")
    pos = 12
    config = json.loads(data[pos : pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        dims = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(data) - 4:
        raise CheckpointError("trailing bytes after tensor table")
    return config, tensors


def save(path, config: dict, tensors: dict) -> None:
    Path(path).write_bytes(dumps(config, tensors))


def load(path, required: tuple = ()) -> tuple[dict, dict]:
    config, tensors = loads(Path(path).read_bytes())
    missing = [name for name in required if name not in tensors]
    if missing:
        raise MissingTensorError(f"checkpoint lacks tensors: {', '.join(missing)}")
    return config, tensors
