"""Flat binary container of named float64 tensors.

Layout (all integers little-endian u64)::

    b"NLF1" | count | { name_len | name (utf-8) | rank | dims[rank] | data (f64 LE) } * count
"""

from __future__ import annotations

import logging
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ScanFormatError

logger = logging.getLogger(__name__)

MAGIC = b"NLF1"
_U64 = struct.Struct("<Q")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, _U64.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(d) for d in arr.shape)
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ScanFormatError("not an NLF1 checkpoint (bad magic)", offset=0)
    pos = 4

    def read_u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise ScanFormatError("truncated checkpoint header", offset=pos)
        (value,) = _U64.unpack_from(blob, pos)
        pos += 8
        return value

    out: dict[str, np.ndarray] = {}
    for _ in range(read_u64()):
        n = read_u64()
        if pos + n > len(blob):
            raise ScanFormatError("truncated tensor name", offset=pos)
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        rank = read_u64()
        dims = tuple(read_u64() for _ in range(rank))
        nbytes = int(np.prod(dims, dtype=np.int64)) * 8
        if pos + nbytes > len(blob):
            raise ScanFormatError(f"truncated data for tensor {name!r}", offset=pos)
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(dims)
        pos += nbytes
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> Path:
    """Write atomically (temp file + rename) so an aborted run never leaves half a checkpoint."""

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, p)
    logger.debug("saved %d tensors to %s", len(tensors), p)
    return p


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
