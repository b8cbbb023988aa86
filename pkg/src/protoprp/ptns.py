"""PTNS binary tensor files.

Layout: the 4 magic bytes ``PTNS``, one ``u8`` rank, ``rank`` little-endian
``u32`` dimensions, then the float32 little-endian payload in row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PTNS"


class PTNSError(ValueError):
    pass


def dumps(array) -> bytes:
    a = np.asarray(array)
    if not 1 <= a.ndim <= 4:
        raise PTNSError(f"PTNS stores rank 1-4 tensors, got rank {a.ndim}")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise PTNSError("bad magic, not a PTNS file")
    if len(buf) < 5:
        raise PTNSError("truncated PTNS header")
    rank = buf[4]
    if not 1 <= rank <= 4:
        raise PTNSError(f"unsupported rank {rank}")
    hdr = 5 + 4 * rank
    if len(buf) < hdr:
        raise PTNSError("truncated PTNS header")
    shape = struct.unpack(f"<{rank}I", buf[5:hdr])
    n = int(np.prod(shape))
    if len(buf) - hdr != 4 * n:
        raise PTNSError(f"payload holds {(len(buf) - hdr) // 4} values, shape {shape} needs {n}")
    return np.frombuffer(buf, dtype="<f4", offset=hdr).reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
