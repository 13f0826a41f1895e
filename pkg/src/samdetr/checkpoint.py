"""Binary parameter checkpoints.

Layout (little-endian): the 8-byte magic ``SAMD0001``, a u32 tensor count,
then per tensor a u16 name length, the UTF-8 name, a u8 rank, ``rank`` u32
dims and the float32 values in row-major order.
"""

from __future__ import annotations

import os
import struct
from collections.abc import Mapping

import numpy as np

MAGIC = b"SAMD0001"


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, values in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(values)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    """Parse checkpoint bytes into float32 arrays keyed by name."""
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not UTF-8 at byte {pos}") from exc
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last tensor")
    return out


def save_checkpoint(path, model) -> None:
    """Write every named parameter of ``model`` to ``path``."""
    blob = encode_tensors({name: p.data for name, p in model.named_parameters()})
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_tensors(f.read())


def load_checkpoint(path, model) -> None:
    """Load parameters into ``model``; names and shapes must match exactly."""
    tensors = read_checkpoint(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not fit the model: missing {missing}, extra {extra}")
    bad = [n for n, p in params.items() if p.shape != tensors[n].shape]
    if bad:
        details = ", ".join(f"{n}: {tensors[n].shape} vs {params[n].shape}" for n in bad)
        raise CheckpointError(f"shape mismatch for {details}")
    for name, p in params.items():
        p.assign(tensors[name].astype(np.float64))
