"""Little-endian binary helpers shared by checkpoints, exported models and the wire protocol."""

from __future__ import annotations

import struct

import crc32c as _crc32c
import numpy as np


class FormatError(ValueError):
    """Base class for binary decoding failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def crc32c(data: bytes) -> int:
    return _crc32c.crc32c(data)


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes):
        self._parts.append(bytes(b))

    def pack(self, fmt: str, *values):
        self._parts.append(struct.pack("<" + fmt, *values))

    def u8(self, v):
        self.pack("B", v)

    def u16(self, v):
        self.pack("H", v)

    def u32(self, v):
        self.pack("I", v)

    def u64(self, v):
        self.pack("Q", v)

    def f32(self, v):
        self.pack("f", v)

    def f64(self, v):
        self.pack("d", v)

    def array(self, a: np.ndarray, dtype):
        self._parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)

    def __len__(self):
        return sum(len(p) for p in self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, have {self.remaining()}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def u8(self):
        return self.unpack("B")[0]

    def u16(self):
        return self.unpack("H")[0]

    def u32(self):
        return self.unpack("I")[0]

    def u64(self):
        return self.unpack("Q")[0]

    def f32(self):
        return self.unpack("f")[0]

    def f64(self):
        return self.unpack("d")[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        buf = self.take(dt.itemsize * count)
        return np.frombuffer(buf, dtype=dt, count=count).astype(np.dtype(dtype), copy=True)

    def string(self) -> str:
        n = self.u16()
        return bytes(self.take(n)).decode("utf-8")


def seal(body: bytes) -> bytes:
    """Append the CRC32C of ``body``."""
    return body + struct.pack("<I", crc32c(body))


def unseal(data: bytes, minimum: int = 0) -> bytes:
    """Verify and strip a trailing CRC32C; raises on truncation or mismatch."""
    if len(data) < minimum + 4:
        raise TruncatedError(f"file of {len(data)} bytes is shorter than its fixed header")
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if crc32c(body) != stored:
        raise ChecksumError("CRC32C mismatch")
    return body
