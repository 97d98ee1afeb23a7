"""Little-endian binary container primitives shared by model and dataset files.

Every read is bounds-checked; a short or malformed buffer raises
``FormatError`` carrying the byte offset where parsing stopped.
"""

import struct

import numpy as np

from leantta.errors import FormatError

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<i1"),
    3: np.dtype("<u1"),
    4: np.dtype("<i4"),
    5: np.dtype("<u2"),
    6: np.dtype("<u8"),
    7: np.dtype("<f8"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, b):
        self._parts.append(bytes(b))

    def u8(self, v):
        self.raw(struct.pack("<B", v))

    def u32(self, v):
        self.raw(struct.pack("<I", v))

    def i64(self, v):
        self.raw(struct.pack("<q", v))

    def u64(self, v):
        self.raw(struct.pack("<Q", v))

    def f64(self, v):
        self.raw(struct.pack("<d", v))

    def string(self, s):
        b = s.encode("utf-8")
        self.u64(len(b))
        self.raw(b)

    def shape(self, shape):
        self.u32(len(shape))
        for d in shape:
            self.u64(d)

    def array(self, a):
        """Typed array: dtype code u8, shape, then the little-endian payload."""
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<")
        code = _DTYPE_CODES.get(dt)
        if code is None:
            raise TypeError(f"unsupported array dtype {a.dtype}")
        self.u8(code)
        self.shape(a.shape)
        payload = np.ascontiguousarray(a, dtype=dt).tobytes()
        self.u64(len(payload))
        self.raw(payload)

    def getvalue(self):
        return b"".join(self._parts)


class Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n, what):
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated data reading {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def raw(self, n, what="bytes"):
        return bytes(self._take(n, what))

    def _unpack(self, fmt, what):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt), what))[0]

    def u8(self, what="u8"):
        return self._unpack("<B", what)

    def u32(self, what="u32"):
        return self._unpack("<I", what)

    def i64(self, what="i64"):
        return self._unpack("<q", what)

    def u64(self, what="u64"):
        return self._unpack("<Q", what)

    def f64(self, what="f64"):
        return self._unpack("<d", what)

    def string(self, what="string"):
        n = self.u64(what + " length")
        start = self.pos
        try:
            return self.raw(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}", start) from exc

    def shape(self, what="shape"):
        rank = self.u32(what + " rank")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} in {what}", self.pos - 4)
        return tuple(self.u64(what) for _ in range(rank))

    def array(self, what="array"):
        start = self.pos
        code = self.u8(what + " dtype")
        dt = _DTYPES.get(code)
        if dt is None:
            raise FormatError(f"unknown dtype code {code} in {what}", start)
        shape = self.shape(what)
        nbytes = self.u64(what + " length")
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise FormatError(f"{what}: payload length {nbytes} does not match shape {shape}", self.pos - 8)
        buf = self._take(nbytes, what)
        return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)
