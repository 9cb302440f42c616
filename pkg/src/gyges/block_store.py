"""File-backed physical volume and device-mapper style sector mappings.

An image file is laid out as::

    [0, 4096)                    plaintext header
    [4096, 4096 + capacity)      data region, 512-byte sectors
    [4096 + capacity, +4096)     crypto footer (present once FDE is set up)

The data region is created sparse; never-written sectors read as zeros.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import Hashable, Sequence

from .errors import (
    AlignmentError,
    FormatError,
    OutOfRangeError,
    PathExistsError,
    StoreIOError,
    UnmappedSectorError,
)

SECTOR_SIZE = 512
HEADER_SIZE = 4096
FOOTER_SIZE = 4096
MAGIC = b"GYGS1\0"
FORMAT_VERSION = 1
MIN_CAPACITY = 1 << 20

# magic, capacity_bytes, version, footer_offset
_HEADER = struct.Struct("<6sQIQ")

ZERO_SECTOR = bytes(SECTOR_SIZE)


class PhysicalVolume:
    """Sector-addressed raw device backed by an image file.

    Positional IO (``pread``/``pwrite``) is used throughout, so readers on
    different threads never race on a shared file offset.
    """

    sector_size = SECTOR_SIZE

    def __init__(self, path: str | os.PathLike, capacity_bytes: int, fd: int):
        self.backing_path = os.fspath(path)
        self.capacity_bytes = capacity_bytes
        self.num_sectors = capacity_bytes // SECTOR_SIZE
        self._fd = fd

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def open(cls, path: str | os.PathLike) -> "PhysicalVolume":
        try:
            fd = os.open(path, os.O_RDWR)
        except OSError as e:
            raise StoreIOError(f"cannot open image {path}: {e.strerror}") from e
        raw = os.pread(fd, _HEADER.size, 0)
        if len(raw) < _HEADER.size:
            os.close(fd)
            raise FormatError(f"{path}: truncated header")
        magic, capacity, version, footer_offset = _HEADER.unpack(raw)
        if magic != MAGIC:
            os.close(fd)
            raise FormatError(f"{path}: not a gyges image")
        if version != FORMAT_VERSION:
            os.close(fd)
            raise FormatError(f"{path}: unsupported format version {version}")
        length = os.fstat(fd).st_size
        if (capacity % SECTOR_SIZE or footer_offset != HEADER_SIZE + capacity
                or length not in (footer_offset, footer_offset + FOOTER_SIZE)):
            os.close(fd)
            raise FormatError(f"{path}: header disagrees with file length")
        return cls(path, capacity, fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def flush(self) -> None:
        """Durably commit everything written so far."""
        os.fsync(self._fd)

    # -- sector IO ---------------------------------------------------------

    def _check_range(self, start: int, count: int) -> None:
        if start < 0 or count < 0 or start + count > self.num_sectors:
            raise OutOfRangeError(
                f"sectors [{start}, {start + count}) outside [0, {self.num_sectors})")

    def read_sectors(self, start: int, count: int) -> bytes:
        self._check_range(start, count)
        want = count * SECTOR_SIZE
        try:
            data = os.pread(self._fd, want, HEADER_SIZE + start * SECTOR_SIZE)
        except OSError as e:
            raise StoreIOError(str(e)) from e
        if len(data) != want:
            raise StoreIOError(f"short read at sector {start}")
        return data

    def write_sectors(self, start: int, data: bytes) -> None:
        if len(data) % SECTOR_SIZE:
            raise AlignmentError("write length is not a whole number of sectors")
        self._check_range(start, len(data) // SECTOR_SIZE)
        try:
            n = os.pwrite(self._fd, data, HEADER_SIZE + start * SECTOR_SIZE)
        except OSError as e:
            raise StoreIOError(str(e)) from e
        if n != len(data):
            raise StoreIOError(f"short write at sector {start}")

    def read_sector(self, index: int) -> bytes:
        return self.read_sectors(index, 1)

    def write_sector(self, index: int, buf: bytes) -> None:
        if len(buf) != SECTOR_SIZE:
            raise AlignmentError(f"sector buffer must be {SECTOR_SIZE} bytes")
        self.write_sectors(index, buf)

    def sector_io(self, op: str, index: int, buf: bytes | None = None):
        if op == "read":
            return self.read_sector(index)
        if op == "write":
            return self.write_sector(index, buf)
        raise ValueError(f"unknown op {op!r}")

    # -- footer region -----------------------------------------------------

    @property
    def footer_offset(self) -> int:
        return HEADER_SIZE + self.capacity_bytes

    def has_footer(self) -> bool:
        return os.fstat(self._fd).st_size >= self.footer_offset + FOOTER_SIZE

    def read_footer(self) -> bytes | None:
        if not self.has_footer():
            return None
        return os.pread(self._fd, FOOTER_SIZE, self.footer_offset)

    def write_footer(self, raw: bytes) -> None:
        if len(raw) != FOOTER_SIZE:
            raise AlignmentError(f"footer must be {FOOTER_SIZE} bytes")
        if os.pwrite(self._fd, raw, self.footer_offset) != FOOTER_SIZE:
            raise StoreIOError("short footer write")
        os.fsync(self._fd)

    def __repr__(self):
        return f"PhysicalVolume({self.backing_path!r}, {self.capacity_bytes})"


def create_physical(path: str | os.PathLike, capacity_bytes: int) -> PhysicalVolume:
    """Create a new sparse image of ``capacity_bytes`` data bytes."""
    if capacity_bytes % SECTOR_SIZE:
        raise AlignmentError(
            f"capacity {capacity_bytes} is not a multiple of {SECTOR_SIZE}")
    if capacity_bytes < MIN_CAPACITY:
        raise AlignmentError(f"capacity must be at least {MIN_CAPACITY} bytes")
    try:
        fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
    except FileExistsError as e:
        raise PathExistsError(f"{path} already exists") from e
    except OSError as e:
        raise StoreIOError(f"cannot create {path}: {e.strerror}") from e
    try:
        header = _HEADER.pack(MAGIC, capacity_bytes, FORMAT_VERSION,
                              HEADER_SIZE + capacity_bytes)
        os.pwrite(fd, header.ljust(HEADER_SIZE, b"\0"), 0)
        os.ftruncate(fd, HEADER_SIZE + capacity_bytes)
        os.fsync(fd)
    except OSError as e:
        os.close(fd)
        raise StoreIOError(f"cannot initialise {path}: {e.strerror}") from e
    return PhysicalVolume(path, capacity_bytes, fd)


def read_header_capacity(path: str | os.PathLike) -> int:
    """Physical capacity straight from the plaintext header, no key needed."""
    with PhysicalVolume.open(path) as vol:
        return vol.capacity_bytes


# -- device-mapper tuples ---------------------------------------------------


class MappingType(enum.Enum):
    LINEAR = "linear"
    THIN = "thin"
    NULL = "null"


class _NullSink:
    """Token returned when a sector resolves to the discard target."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL_SINK"

    def __reduce__(self):
        return (_NullSink, ())


NULL_SINK = _NullSink()


@dataclass(frozen=True)
class MappingTuple:
    """One ``<O_l, S_l, T, D_p, O_p>`` line of a mapping table, in sectors."""

    logical_offset: int
    length: int
    mapping_type: MappingType
    target_device: Hashable = None
    physical_offset: int = 0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("mapping length must be positive")

    @property
    def logical_end(self) -> int:
        return self.logical_offset + self.length

    def covers(self, sector: int) -> bool:
        return self.logical_offset <= sector < self.logical_end


def resolve_mapping(tuples: Sequence[MappingTuple], logical_sector: int):
    """Translate ``logical_sector`` to ``(target_device, physical_sector)``.

    Returns :data:`NULL_SINK` for sectors covered by a null mapping.
    """
    for t in tuples:
        if t.covers(logical_sector):
            if t.mapping_type is MappingType.NULL:
                return NULL_SINK
            return t.target_device, logical_sector - t.logical_offset + t.physical_offset
    raise UnmappedSectorError(f"logical sector {logical_sector} is not mapped")
