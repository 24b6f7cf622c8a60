"""Little-endian binary record helpers with CRC32 framing.

Every on-disk artifact in this package (dictionaries, weight files,
bitstreams) is a sequence of little-endian fields followed by a CRC32
of everything that precedes it. These helpers keep the byte-fiddling
in one place.
"""

import struct
import zlib

import numpy as np

from .errors import FormatError, HashMismatchError


class ByteWriter:
    def __init__(self):
        self._buf = bytearray()

    def u8(self, v):
        self._buf += struct.pack("<B", v)

    def u16(self, v):
        self._buf += struct.pack("<H", v)

    def u32(self, v):
        self._buf += struct.pack("<I", v)

    def raw(self, b):
        self._buf += b

    def f32_array(self, a):
        self._buf += np.ascontiguousarray(a, dtype="<f4").tobytes()

    def crc(self):
        """Append CRC32 of all bytes written so far."""
        self.u32(zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF)

    def getvalue(self):
        return bytes(self._buf)


class ByteReader:
    def __init__(self, data):
        self._data = data
        self._pos = 0

    def _take(self, n):
        if self._pos + n > len(self._data):
            raise FormatError("truncated record: wanted %d bytes at offset %d"
                              % (n, self._pos))
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def raw(self, n):
        return self._take(n)

    def f32_array(self, count, shape=None):
        a = np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float32)
        return a.reshape(shape) if shape is not None else a

    def check_crc(self):
        """Read a CRC32 field and verify it covers all bytes before it."""
        expect = zlib.crc32(self._data[:self._pos]) & 0xFFFFFFFF
        stored = self.u32()
        if stored != expect:
            raise HashMismatchError("checksum mismatch: stored %08x, computed %08x"
                                    % (stored, expect))

    def remaining(self):
        return len(self._data) - self._pos
