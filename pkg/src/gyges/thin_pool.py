"""Thin pool: exclusive chunk ownership over an encrypted device.

Device layout (byte offsets inside the encrypted device)::

    [0, 8192)            pool label: superblock sector + volume table
    data region          total_chunks * chunk_size, chunk-aligned
    metadata region      64 bytes per data chunk, best-fit placed

The metadata region holds one 64-byte record slot per physical chunk, so
its size is exactly ``(S_p / S_c) * 64``.
"""

from __future__ import annotations

import heapq
import struct
import threading
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

from .block_store import SECTOR_SIZE
from .errors import (
    AlreadyMappedError,
    BadChunkSizeError,
    DeviceTooSmallError,
    FormatError,
    PoolExhaustedError,
)

CHUNK_SIZE_DEFAULT = 64 * 1024
CHUNK_SIZE_MIN = 4 * 1024
CHUNK_SIZE_MAX = 1024 * 1024
MIN_CHUNKS = 16

RECORD_SIZE = 64
METADATA_BYTES_PER_CHUNK = RECORD_SIZE

LABEL_SIZE = 8192
TABLE_ENTRY_SIZE = 128
TABLE_FIRST_SECTOR = 1
TABLE_SECTORS = LABEL_SIZE // SECTOR_SIZE - TABLE_FIRST_SECTOR
TABLE_ENTRIES = TABLE_SECTORS * SECTOR_SIZE // TABLE_ENTRY_SIZE

POOL_MAGIC = b"GYGSPOOL"
POOL_VERSION = 1
# magic, version, chunk_size, total_chunks, data_offset, metadata_offset, metadata_size
_SUPER = struct.Struct("<8sIIQQQQ")
# volume_id, virtual_chunk, physical_chunk, flags
_RECORD = struct.Struct("<16sQQB")
_LIVE = 1

UNALLOCATED = None


def _align_up(value: int, align: int) -> int:
    return -(-value // align) * align


def metadata_size(data_bytes: int, chunk_size: int) -> int:
    """Metadata bytes needed for ``data_bytes`` of chunked pool data."""
    if data_bytes % chunk_size:
        raise ValueError("pool data size must be a whole number of chunks")
    return data_bytes // chunk_size * METADATA_BYTES_PER_CHUNK


def utilization(data_bytes: int, meta_bytes: int) -> float:
    return data_bytes / (data_bytes + meta_bytes)


def check_chunk_size(chunk_size: int) -> None:
    if (chunk_size & (chunk_size - 1) or not CHUNK_SIZE_MIN <= chunk_size <= CHUNK_SIZE_MAX):
        raise BadChunkSizeError(
            f"chunk size {chunk_size} must be a power of two in "
            f"[{CHUNK_SIZE_MIN}, {CHUNK_SIZE_MAX}]")


def best_fit(extents: Iterable[tuple[int, int]], size: int) -> Optional[tuple[int, int]]:
    """Smallest free extent ``(start, length)`` that can hold ``size`` bytes.

    Extents are ranked from big to small and the last one still large
    enough wins; equal lengths prefer the lower start.
    """
    ranked = sorted(extents, key=lambda e: (-e[1], -e[0]))
    chosen = None
    for extent in ranked:
        if extent[1] < size:
            break
        chosen = extent
    return chosen


class Layout(NamedTuple):
    chunk_size: int
    total_chunks: int
    data_offset: int
    metadata_offset: int
    metadata_size: int

    @property
    def data_size(self) -> int:
        return self.total_chunks * self.chunk_size


def plan_layout(device_bytes: int, chunk_size: int) -> Layout:
    """Largest chunk-aligned data region whose metadata still fits somewhere."""
    check_chunk_size(chunk_size)
    data_offset = _align_up(LABEL_SIZE, chunk_size)
    n = max(0, (device_bytes - LABEL_SIZE) // (chunk_size + METADATA_BYTES_PER_CHUNK))
    while n >= MIN_CHUNKS:
        data_end = data_offset + n * chunk_size
        if data_end <= device_bytes:
            meta = metadata_size(n * chunk_size, chunk_size)
            free = [(LABEL_SIZE, data_offset - LABEL_SIZE), (data_end, device_bytes - data_end)]
            spot = best_fit([e for e in free if e[1] > 0], _align_up(meta, SECTOR_SIZE))
            if spot is not None:
                return Layout(chunk_size, n, data_offset, spot[0], meta)
        n -= 1
    raise DeviceTooSmallError(
        f"{device_bytes} bytes cannot hold {MIN_CHUNKS} chunks of {chunk_size} plus metadata")


def device_bytes_for(data_bytes: int, chunk_size: int) -> int:
    """Smallest device capacity whose pool gets exactly ``data_bytes`` of data."""
    check_chunk_size(chunk_size)
    data_offset = _align_up(LABEL_SIZE, chunk_size)
    meta = _align_up(metadata_size(data_bytes, chunk_size), SECTOR_SIZE)
    tail = 0 if meta <= data_offset - LABEL_SIZE else meta
    return data_offset + data_bytes + tail


@dataclass(frozen=True)
class MetadataRecord:
    volume_id: bytes
    virtual_chunk: int
    physical_chunk: int

    def pack(self) -> bytes:
        return _RECORD.pack(self.volume_id, self.virtual_chunk, self.physical_chunk,
                            _LIVE).ljust(RECORD_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes) -> Optional["MetadataRecord"]:
        vid, vchunk, pchunk, flags = _RECORD.unpack_from(raw)
        if not flags & _LIVE:
            return None
        return cls(vid, vchunk, pchunk)


def pack_records(slots: list) -> bytes:
    """Serialise one record slot per physical chunk; ``None`` marks a free chunk."""
    empty = bytes(RECORD_SIZE)
    return b"".join(
        empty if s is None else MetadataRecord(s[0], s[1], i).pack()
        for i, s in enumerate(slots))


def unpack_records(raw: bytes, total_chunks: int) -> list:
    slots = []
    for i in range(total_chunks):
        rec = MetadataRecord.unpack(raw[i * RECORD_SIZE:(i + 1) * RECORD_SIZE])
        if rec is None:
            slots.append(None)
            continue
        if rec.physical_chunk != i:
            raise FormatError(f"metadata slot {i} names physical chunk {rec.physical_chunk}")
        slots.append((rec.volume_id, rec.virtual_chunk))
    return slots


class PoolStats(NamedTuple):
    total_chunks: int
    owned_chunks: int
    free_chunks: int
    eta: float


class ThinPool:
    """Chunk-granular resource pool; each physical chunk has at most one owner.

    Allocation and frees are serialised on an internal lock and written
    through to the metadata region before returning.
    """

    def __init__(self, device, layout: Layout, slots: list, label: bytearray):
        self.device = device
        self.layout = layout
        self.chunk_size = layout.chunk_size
        self.total_chunks = layout.total_chunks
        self.sectors_per_chunk = self.chunk_size // SECTOR_SIZE
        self._lock = threading.Lock()
        self._label = label
        self._slots = slots
        self._owner: dict[tuple[bytes, int], int] = {}
        self._free: list[int] = []
        for pchunk, key in enumerate(slots):
            if key is None:
                self._free.append(pchunk)
            elif key in self._owner:
                raise FormatError(f"virtual chunk {key[1]} mapped twice")
            else:
                self._owner[key] = pchunk
        heapq.heapify(self._free)
        meta_len = _align_up(layout.metadata_size, SECTOR_SIZE)
        self._meta = bytearray(pack_records(slots).ljust(meta_len, b"\0"))

    # -- sizes -------------------------------------------------------------

    @property
    def data_size_bytes(self) -> int:
        return self.layout.data_size

    @property
    def metadata_size_bytes(self) -> int:
        return self.layout.metadata_size

    def stats(self) -> PoolStats:
        owned = len(self._owner)
        return PoolStats(self.total_chunks, owned, self.total_chunks - owned,
                         utilization(self.data_size_bytes, self.metadata_size_bytes))

    # -- allocation --------------------------------------------------------

    def allocate(self, volume_id: bytes, virtual_chunk: int) -> int:
        key = (bytes(volume_id), virtual_chunk)
        with self._lock:
            if key in self._owner:
                raise AlreadyMappedError(f"virtual chunk {virtual_chunk} already mapped")
            if not self._free:
                raise PoolExhaustedError()
            pchunk = heapq.heappop(self._free)
            self._slots[pchunk] = key
            self._owner[key] = pchunk
            self._persist_slot(pchunk)
        return pchunk

    def lookup(self, volume_id: bytes, virtual_chunk: int) -> Optional[int]:
        return self._owner.get((bytes(volume_id), virtual_chunk), UNALLOCATED)

    def release(self, volume_id: bytes, virtual_chunk: int) -> int:
        """Return a chunk to the free set after zeroing its contents."""
        key = (bytes(volume_id), virtual_chunk)
        with self._lock:
            pchunk = self._owner.pop(key)
            self.device.write_sectors(self.chunk_sector(pchunk), bytes(self.chunk_size))
            self._slots[pchunk] = None
            self._persist_slot(pchunk)
            heapq.heappush(self._free, pchunk)
        return pchunk

    def chunks_of(self, volume_id: bytes) -> dict[int, int]:
        vid = bytes(volume_id)
        return {v: p for (owner, v), p in list(self._owner.items()) if owner == vid}

    def ownership(self) -> list:
        """Snapshot of the per-physical-chunk owner slots."""
        with self._lock:
            return list(self._slots)

    def chunk_sector(self, pchunk: int) -> int:
        return (self.layout.data_offset // SECTOR_SIZE) + pchunk * self.sectors_per_chunk

    def _persist_slot(self, pchunk: int) -> None:
        off = pchunk * RECORD_SIZE
        slot = self._slots[pchunk]
        raw = bytes(RECORD_SIZE) if slot is None else MetadataRecord(slot[0], slot[1], pchunk).pack()
        self._meta[off:off + RECORD_SIZE] = raw
        s = off // SECTOR_SIZE
        self.device.write_sectors(self.layout.metadata_offset // SECTOR_SIZE + s,
                                  bytes(self._meta[s * SECTOR_SIZE:(s + 1) * SECTOR_SIZE]))

    # -- volume table ------------------------------------------------------

    def table_entries(self) -> list[bytes]:
        base = TABLE_FIRST_SECTOR * SECTOR_SIZE
        return [bytes(self._label[base + i * TABLE_ENTRY_SIZE:base + (i + 1) * TABLE_ENTRY_SIZE])
                for i in range(TABLE_ENTRIES)]

    def write_table_entry(self, index: int, raw: bytes) -> None:
        if len(raw) != TABLE_ENTRY_SIZE or not 0 <= index < TABLE_ENTRIES:
            raise ValueError("bad volume table entry")
        off = TABLE_FIRST_SECTOR * SECTOR_SIZE + index * TABLE_ENTRY_SIZE
        with self._lock:
            self._label[off:off + TABLE_ENTRY_SIZE] = raw
            s = off // SECTOR_SIZE
            self.device.write_sectors(s, bytes(self._label[s * SECTOR_SIZE:(s + 1) * SECTOR_SIZE]))


def pool_create(dev, chunk_size: int = CHUNK_SIZE_DEFAULT) -> ThinPool:
    """Lay out a fresh pool on ``dev`` and write its label and empty metadata."""
    layout = plan_layout(dev.capacity_bytes, chunk_size)
    label = bytearray(LABEL_SIZE)
    label[:_SUPER.size] = _SUPER.pack(POOL_MAGIC, POOL_VERSION, *layout)
    pool = ThinPool(dev, layout, [None] * layout.total_chunks, label)
    dev.write_sectors(0, bytes(label))
    dev.write_sectors(layout.metadata_offset // SECTOR_SIZE, bytes(pool._meta))
    return pool


def pool_open(dev) -> ThinPool:
    label = bytearray(dev.read_sectors(0, LABEL_SIZE // SECTOR_SIZE))
    magic, version, *fields = _SUPER.unpack_from(label)
    if magic != POOL_MAGIC:
        raise FormatError("no thin pool on this device")
    if version != POOL_VERSION:
        raise FormatError(f"unsupported pool version {version}")
    layout = Layout(*fields)
    check_chunk_size(layout.chunk_size)
    if layout.metadata_size != metadata_size(layout.data_size, layout.chunk_size):
        raise FormatError("metadata size disagrees with data size")
    meta_len = _align_up(layout.metadata_size, SECTOR_SIZE)
    raw = dev.read_sectors(layout.metadata_offset // SECTOR_SIZE, meta_len // SECTOR_SIZE)
    return ThinPool(dev, layout, unpack_records(raw, layout.total_chunks), label)
