"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"MFPN1"
    repeated until EOF:
        uint32 name_length, name bytes (UTF-8)
        uint32 rank, rank × uint64 dims
        prod(dims) × float64 values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .tensor import Parameter

MAGIC = b"MFPN1"


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an MFPN1 checkpoint (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"record {name!r} is truncated")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    Path(path).write_bytes(encode({p.name: p.data for p in params}))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def restore(params: Iterable[Parameter], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into matching parameters; names and shapes must agree exactly."""
    params = list(params)
    missing = [p.name for p in params if p.name not in arrays]
    extra = sorted(set(arrays) - {p.name for p in params})
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for p in params:
        if arrays[p.name].shape != p.shape:
            raise CheckpointError(f"{p.name}: checkpoint shape {arrays[p.name].shape} != {p.shape}")
        p.data = arrays[p.name].copy()
        p.zero_grad()
