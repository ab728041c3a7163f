"""MLCW tensor container.

Layout (little endian)::

    "MLCW" | u16 version | u32 tensor_count
    per tensor: u8 dtype (0 = f32) | u8 rank | rank x u32 dims | row-major f32 payload
"""

from __future__ import annotations

import struct

import numpy as np

from .._framing import Reader
from ..errors import ParseError

MAGIC = b"MLCW"
VERSION = 1
DTYPE_F32 = 0
_LE_F32 = np.dtype("<f4")


def encoded_size(shapes) -> int:
    n = 10
    for s in shapes:
        n += 2 + 4 * len(s) + 4 * int(np.prod(s, dtype=np.int64))
    return n


def encode_tensors(tensors) -> bytes:
    out = bytearray(MAGIC + struct.pack("<HI", VERSION, len(tensors)))
    for t in tensors:
        t = np.asarray(t, dtype=np.float32)
        if t.ndim > 255:
            raise ValueError("rank too large")
        out += struct.pack(f"<BB{t.ndim}I", DTYPE_F32, t.ndim, *t.shape)
        out += np.ascontiguousarray(t, dtype=_LE_F32).tobytes()
    return bytes(out)


def decode_tensors(buf, copy: bool = True) -> list[np.ndarray]:
    """Parse an MLCW buffer.

    With ``copy=False`` the arrays are views into ``buf``; wiping ``buf``
    afterwards zeroes them too.
    """
    r = Reader(buf)
    if r.take(4) != MAGIC:
        raise ParseError("not an MLCW weights file")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise ParseError(f"unsupported MLCW version {version}")
    out = []
    for i in range(count):
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise ParseError(f"tensor {i}: unsupported dtype {dtype}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(dims, dtype=np.int64))
        if 4 * n > r.remaining():
            raise ParseError(f"tensor {i}: payload truncated")
        start = r.pos
        r.pos += 4 * n
        arr = np.frombuffer(buf, dtype=_LE_F32, count=n, offset=start).reshape(dims)
        out.append(arr.astype(np.float32) if copy else arr)
    r.expect_end()
    return out
