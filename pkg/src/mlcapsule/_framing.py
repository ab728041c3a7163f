"""Little-endian length-prefixed field framing shared by every binary format."""

from __future__ import annotations

import struct

from .errors import ParseError

_U32 = struct.Struct("<I")


def pack_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += _U32.pack(len(f))
        out += f
    return bytes(out)


class Reader:
    """Cursor over a byte string; every short read raises ParseError."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ParseError(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        vals = s.unpack(self.take(s.size))
        return vals if len(vals) > 1 else vals[0]

    def field(self) -> bytes:
        return self.take(self.unpack("<I"))

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining():
            raise ParseError(f"{self.remaining()} trailing bytes")


def unpack_fields(data: bytes, count: int | None = None) -> list[bytes]:
    r = Reader(data)
    out = []
    while r.remaining() and (count is None or len(out) < count):
        out.append(r.field())
    if count is not None and len(out) != count:
        raise ParseError(f"expected {count} fields, found {len(out)}")
    r.expect_end()
    return out
