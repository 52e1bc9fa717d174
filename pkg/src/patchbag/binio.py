"""Shared framing for the binary artifact files (.pbfv, .pbcb, .pbml).

Every file is little-endian: a 4-byte magic, a u16 format version, a
format-specific payload, and a trailing CRC32 of all preceding bytes.
Writes go to a temp file in the same directory and are renamed into
place so a crash never leaves a half-written artifact.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from enum import Enum
from pathlib import Path


class FormatErrorCode(Enum):
    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    TRUNCATED = "truncated"
    BAD_CRC = "bad_crc"
    NON_FINITE = "non_finite"
    BAD_SHAPE = "bad_shape"


class FileFormatError(ValueError):
    """File failed a structural check; `code` says which one."""

    def __init__(self, code: FormatErrorCode, message: str):
        super().__init__(f"{code.value}: {message}")
        self.code = code


def write_framed(path: str | Path, magic: bytes, payload: bytes) -> None:
    """Write magic + payload + CRC32 atomically (temp file + rename)."""
    assert len(magic) == 4
    body = magic + payload
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_framed(path: str | Path, magic: bytes) -> bytes:
    """Return the payload after validating magic and trailing CRC32."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FileFormatError(FormatErrorCode.TRUNCATED, f"{path}: only {len(data)} bytes")
    if data[:4] != magic:
        raise FileFormatError(
            FormatErrorCode.BAD_MAGIC, f"{path}: expected {magic!r}, found {data[:4]!r}"
        )
    (stored,) = struct.unpack("<I", data[-4:])
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FileFormatError(
            FormatErrorCode.BAD_CRC, f"{path}: stored {stored:#010x}, computed {actual:#010x}"
        )
    return data[4:-4]


class Cursor:
    """Sequential reader over a payload with truncation checks."""

    def __init__(self, buf: bytes, context: str = ""):
        self.buf = buf
        self.pos = 0
        self.context = context

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FileFormatError(
                FormatErrorCode.TRUNCATED,
                f"{self.context}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}",
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def take_string(self) -> str:
        n = self.unpack("H")
        return self.take(n).decode("utf-8")

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FileFormatError(
                FormatErrorCode.BAD_SHAPE,
                f"{self.context}: {len(self.buf) - self.pos} unexpected trailing bytes",
            )


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FileFormatError(FormatErrorCode.BAD_SHAPE, f"string too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw
