# formats/_binary.py
import os
import struct
from typing import Tuple

import numpy as np

from tumor_shared import FormatError, InputNotFoundError


class ByteReader:
    """Cursor over an in-memory file; every short read is a format error with its offset."""

    def __init__(self, buf: bytes, name: str = "file"):
        self.buf = buf
        self.pos = 0
        self.name = name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.name}: truncated while reading {what} "
                              f"(need {n} bytes, {len(self.buf) - self.pos} left)", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def one(self, fmt: str, what: str):
        return self.unpack(fmt, what)[0]

    def string(self, what: str) -> str:
        n = self.one("H", f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.name}: {what} is not UTF-8", self.pos - n)

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt).copy()

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"{self.name}: bad magic {got!r}, expected {magic.decode()!r}", 0)

    def expect_end(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.name}: {len(self.buf) - self.pos} trailing bytes", self.pos)


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"string too long for header ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


def read_file(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise InputNotFoundError(f"file not found: {path}")


def write_file(path: str, payload: bytes):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
