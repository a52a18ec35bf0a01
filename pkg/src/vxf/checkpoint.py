"""Flat binary parameter checkpoints.

Layout (all integers u32 little-endian)::

    b"VXF1"
    repeated, names in lexicographic order:
        name_len, name (UTF-8), rank, extents[rank], float32 LE payload

Tensors held in float64 can be stored bit-exactly: they are written under
``<name>::f64`` with an extra trailing extent of 2, the payload being the
float64 bytes viewed as float32 pairs.  Readers unaware of the suffix still
parse the file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VXF1"
F64_SUFFIX = "::f64"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], exact: bool = False) -> None:
    """Write ``tensors`` (name -> array).  ``exact`` keeps float64 arrays bit-exact."""
    chunks = [MAGIC]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if exact and arr.dtype == np.float64:
            name_out = name + F64_SUFFIX
            payload = np.ascontiguousarray(arr).view("<f4").reshape(arr.shape + (2,))
        else:
            name_out = name
            payload = np.ascontiguousarray(arr, dtype="<f4")
        raw = name_out.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", payload.ndim))
        chunks.append(struct.pack(f"<{payload.ndim}I", *payload.shape))
        chunks.append(payload.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a VXF1 checkpoint")
    pos = 4
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
        if name.endswith(F64_SUFFIX):
            name = name[: -len(F64_SUFFIX)]
            arr = arr.view("<f8").reshape(shape[:-1])
        out[name] = arr
    return out
