"""Shared helpers for the binary file codecs (dataset and checkpoint files).

Both formats are little-endian throughout and fail loudly: every decode error
is a distinct exception class so callers (and tests) can tell a wrong file
apart from a damaged one.
"""

from __future__ import annotations

import struct
from typing import BinaryIO


class FileFormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class FormatVersionError(FileFormatError):
    """Magic matched but the format version is unsupported."""


class TruncatedPayloadError(FileFormatError):
    """File ended before the declared payload was complete."""


class DimensionMismatchError(FileFormatError):
    """Header dimensions are inconsistent with each other or the payload."""


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    """Read exactly ``n`` bytes or raise TruncatedPayloadError naming ``what``."""
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(
            f"truncated payload reading {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def expect_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")


def expect_version(fh: BinaryIO, supported: int, what: str) -> int:
    (version,) = struct.unpack("<H", read_exact(fh, 2, f"{what} version"))
    if version != supported:
        raise FormatVersionError(
            f"unsupported {what} version {version} (reader supports {supported})"
        )
    return version


def read_struct(fh: BinaryIO, fmt: str, what: str) -> tuple:
    size = struct.calcsize(fmt)
    return struct.unpack(fmt, read_exact(fh, size, what))


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long to serialize: {len(raw)} bytes")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def read_str(fh: BinaryIO, what: str) -> str:
    (n,) = read_struct(fh, "<H", f"{what} length")
    return read_exact(fh, n, what).decode("utf-8")
