"""Flat binary archive of named float64 tensors.

Layout (all integers little-endian)::

    magic      8 bytes  b"EPSGCKPT"
    version    u32
    seed       u64
    cfg_len    u32, then cfg_len bytes of UTF-8 JSON (architecture config)
    count      u32
    count records:
        name_len u32, name (UTF-8)
        rank     u32
        extents  u64 * rank
        payload  float64 * prod(extents)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EPSGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], seed: int, config: dict) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, seed & 0xFFFFFFFFFFFFFFFF),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        version, seed = take("<IQ")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (cfg_len,) = take("<I")
        config = json.loads(buf[pos : pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (count,) = take("<I")
        tensors = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = take("<I")
            shape = take(f"<{rank}Q") if rank else ()
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
            tensors[name] = arr
    except CheckpointError:
        raise
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, seed, config
