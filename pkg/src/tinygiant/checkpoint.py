"""Binary parameter checkpoints.

Layout (little-endian)::

    b"TGVM"  u32 version
    repeated until EOF:
        u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f64 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TGVM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise CheckpointError("not a TGVM checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(payload):
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", payload, pos)
            pos += 8 * rank
            count = int(np.prod(dims))  # 1 for rank 0
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(arrays))


def load_checkpoint(path, expected: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; with ``expected`` shapes, fail on the first mismatch."""
    arrays = decode_checkpoint(Path(path).read_bytes())
    if expected is not None:
        for name, shape in expected.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {name}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"parameter {name} has shape {arrays[name].shape} in checkpoint, config expects {tuple(shape)}"
                )
        extra = sorted(set(arrays) - set(expected))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]}")
    return arrays
