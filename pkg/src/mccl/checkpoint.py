"""Binary checkpoint format.

Layout (little-endian): magic ``b"MCCL"``, version u32, tensor count u32,
then per tensor: name length u32, UTF-8 name, rank u32, rank x u32 dims,
float32 values in row-major order. Tensors are written sorted by name so
identical state always produces identical bytes.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MCCL"
VERSION = 1
TRAINING_ONLY_PREFIXES = ("mcm/", "disc/")


class CheckpointError(IOError):
    pass


def encode_state(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_state(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise CheckpointError("not an MCCL checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated checkpoint: tensor {name!r} needs {4 * size} bytes")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after {count} tensors")
    return out


def save_checkpoint(path, state: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_state(state))
    return path


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_state(path.read_bytes())


def inference_state(state: Mapping[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    """Drop the memory and discriminator tensors, which inference never uses."""
    return OrderedDict((k, v) for k, v in state.items() if not k.startswith(TRAINING_ONLY_PREFIXES))
