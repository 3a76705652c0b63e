"""Shared helpers for the CRC-guarded little-endian containers."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path


class CorruptFileError(ValueError):
    """Bad magic, unsupported version, truncation or CRC mismatch."""


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def split_crc(blob: bytes, path) -> bytes:
    if len(blob) < 4:
        raise CorruptFileError(f"{path}: file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFileError(f"{path}: CRC-32 mismatch")
    return body


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    def __init__(self, body: bytes, path):
        self.body, self.pos, self.path = body, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CorruptFileError(f"{self.path}: truncated payload")
        out = self.body[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.body):
            raise CorruptFileError(f"{self.path}: {len(self.body) - self.pos} trailing bytes")
