"""Virtual logical volumes carved from a :class:`~gyges.thin_pool.ThinPool`.

* The outer volume is labelled with the full physical capacity, however
  little of the pool actually backs it.
* Hidden volumes are found only by name, and the name is a truncated
  ``SHA-256(password || salt)``. Their payload is encrypted a second time
  under a per-volume key before it reaches the pool.
* Level 0 is a null sink. Once engaged, outer writes that cannot get a
  chunk are dropped but still counted, so the volume reports full at
  exactly ``used_before + recorded == label``.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from typing import Optional

from .block_store import NULL_SINK, SECTOR_SIZE, MappingTuple, MappingType, resolve_mapping
from .crypto import SectorCipher
from .errors import (
    NameCollisionError,
    NoOuterVolumeError,
    OuterExistsError,
    OutOfLabelRangeError,
    PoolExhaustedError,
    StorageFullError,
    UnknownVolumeError,
    VolumeTableFullError,
)
from .thin_pool import TABLE_ENTRY_SIZE, ThinPool

NAME_TRIM_DEFAULT = 16
NAME_TRIM_MIN = 8
NAME_TRIM_MAX = 64
OUTER_NAME = "outer"
LEVEL0_NAME = "level0"
POOL_DEVICE = "pool-data"

# name, kind, labeled_capacity, volume_id, aux0, aux1
_ENTRY = struct.Struct("<64sB7xQ16sQQ")


class VolumeKind(enum.IntEnum):
    OUTER = 1
    HIDDEN = 2
    NULL_SINK = 3


def derive_volume_name(password, salt: bytes, b: int = NAME_TRIM_DEFAULT) -> str:
    """First ``b`` hex characters of ``SHA-256(password || salt)``."""
    if isinstance(password, str):
        password = password.encode("utf-8")
    if not password:
        raise ValueError("password must be non-empty")
    if not NAME_TRIM_MIN <= b <= NAME_TRIM_MAX:
        raise ValueError(f"trim length must be in [{NAME_TRIM_MIN}, {NAME_TRIM_MAX}]")
    return hashlib.sha256(bytes(password) + bytes(salt)).hexdigest()[:b]


def derive_volume_key(password, salt: bytes) -> bytes:
    if isinstance(password, str):
        password = password.encode("utf-8")
    return hashlib.sha256(bytes(password) + bytes(salt) + b"key").digest()[:16]


@dataclass
class FillAccounting:
    level0_engaged: bool = False
    used_before_attack_bytes: int = 0
    attack_bytes_recorded: int = 0

    @property
    def total(self) -> int:
        return self.used_before_attack_bytes + self.attack_bytes_recorded


@dataclass
class _Entry:
    name: str
    kind: VolumeKind
    labeled_capacity: int
    volume_id: bytes
    aux0: int = 0
    aux1: int = 0

    def pack(self) -> bytes:
        return _ENTRY.pack(self.name.encode("ascii"), int(self.kind), self.labeled_capacity,
                           self.volume_id, self.aux0, self.aux1).ljust(TABLE_ENTRY_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes) -> Optional["_Entry"]:
        name, kind, cap, vid, aux0, aux1 = _ENTRY.unpack_from(raw)
        if kind == 0:
            return None
        return cls(name.rstrip(b"\0").decode("ascii"), VolumeKind(kind), cap, vid, aux0, aux1)


class VirtualLogicalVolume:
    """Byte-addressed thin volume; chunks are allocated on first write."""

    def __init__(self, manager: "VolumeManager", entry: _Entry,
                 volume_key: bytes | None = None, level: int | None = None):
        self._manager = manager
        self._pool = manager.pool
        self._entry = entry
        self.volume_key = volume_key
        self.level = level
        self._cipher = SectorCipher(volume_key) if volume_key else None
        self._lock = threading.Lock()
        # Virtual chunks whose writes went to the null sink.
        self._sunk: set[int] = set()

    @property
    def name(self) -> str:
        return self._entry.name

    @property
    def kind(self) -> VolumeKind:
        return self._entry.kind

    @property
    def labeled_capacity_bytes(self) -> int:
        return self._entry.labeled_capacity

    @property
    def volume_id(self) -> bytes:
        return self._entry.volume_id

    @property
    def chunk_size(self) -> int:
        return self._pool.chunk_size

    def committed_bytes(self) -> int:
        """Bytes of pool storage actually owned by this volume."""
        if self.kind is VolumeKind.NULL_SINK:
            return 0
        return len(self._pool.chunks_of(self.volume_id)) * self.chunk_size

    def reported_used_bytes(self) -> int:
        fill = self._manager.fill
        if self.kind is VolumeKind.OUTER and fill.level0_engaged:
            return fill.total
        return self.committed_bytes()

    # -- mapping -----------------------------------------------------------

    def chunk_mapping(self, vchunk: int) -> Optional[MappingTuple]:
        spc = self._pool.sectors_per_chunk
        if self.kind is VolumeKind.NULL_SINK or vchunk in self._sunk:
            return MappingTuple(vchunk * spc, spc, MappingType.NULL)
        p = self._pool.lookup(self.volume_id, vchunk)
        if p is None:
            return None
        return MappingTuple(vchunk * spc, spc, MappingType.THIN, POOL_DEVICE,
                            self._pool.chunk_sector(p))

    def mapping_table(self) -> list[MappingTuple]:
        """Current ``<O_l, S_l, T, D_p, O_p>`` table, adjacent tuples merged."""
        if self.kind is VolumeKind.NULL_SINK:
            return [MappingTuple(0, self.labeled_capacity_bytes // SECTOR_SIZE, MappingType.NULL)]
        vchunks = sorted(set(self._pool.chunks_of(self.volume_id)) | self._sunk)
        table: list[MappingTuple] = []
        for v in vchunks:
            t = self.chunk_mapping(v)
            if table:
                last = table[-1]
                if (last.mapping_type is t.mapping_type and last.logical_end == t.logical_offset
                        and (t.mapping_type is MappingType.NULL
                             or last.physical_offset + last.length == t.physical_offset)):
                    table[-1] = MappingTuple(last.logical_offset, last.length + t.length,
                                             t.mapping_type, t.target_device, last.physical_offset)
                    continue
            table.append(t)
        return table

    # -- IO ----------------------------------------------------------------

    def _check_range(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.labeled_capacity_bytes:
            raise OutOfLabelRangeError(
                f"[{offset}, {offset + length}) outside label of {self.labeled_capacity_bytes} bytes")

    def read(self, offset: int, length: int) -> bytes:
        self._check_range(offset, length)
        out = bytearray(length)
        if self.kind is VolumeKind.NULL_SINK or length == 0:
            return bytes(out)
        c = self.chunk_size
        run = None  # [device_sector, logical_sector, n_sectors]
        pieces = []
        for v in range(offset // c, (offset + length - 1) // c + 1):
            t = self.chunk_mapping(v)
            if t is None or t.mapping_type is MappingType.NULL:
                continue
            lo = max(offset, v * c)
            hi = min(offset + length, (v + 1) * c)
            s_lo, s_hi = lo // SECTOR_SIZE, -(-hi // SECTOR_SIZE)
            dev_sector = resolve_mapping([t], s_lo)[1]
            if run and run[0] + run[2] == dev_sector and run[1] + run[2] == s_lo:
                run[2] += s_hi - s_lo
            else:
                if run:
                    pieces.append(run)
                run = [dev_sector, s_lo, s_hi - s_lo]
        if run:
            pieces.append(run)
        for dev_sector, s_lo, count in pieces:
            plain = self._decrypt(s_lo, self._pool.device.read_sectors(dev_sector, count))
            base = s_lo * SECTOR_SIZE
            lo = max(offset, base)
            hi = min(offset + length, base + count * SECTOR_SIZE)
            out[lo - offset:hi - offset] = plain[lo - base:hi - base]
        return bytes(out)

    def write(self, offset: int, data) -> int:
        data = bytes(data)
        n = len(data)
        if self.kind is VolumeKind.NULL_SINK:
            self._check_range(offset, n)
            return n
        with self._lock:
            fill = self._manager.fill
            engaged = self.kind is VolumeKind.OUTER and fill.level0_engaged
            remaining = n
            if engaged:
                remaining = self.labeled_capacity_bytes - fill.total
                if remaining <= 0:
                    raise StorageFullError()
                # Running off the end of the label is a short write, like a full disk.
                self._check_range(offset, 0)
                remaining = min(remaining, self.labeled_capacity_bytes - offset)
            else:
                self._check_range(offset, n)
            accept = min(n, remaining)
            self._write_range(offset, data[:accept], sink=engaged)
            if engaged:
                fill.attack_bytes_recorded += accept
                self._manager._persist_fill()
                if accept < n:
                    raise StorageFullError(written=accept)
        return n

    def volume_io(self, op: str, offset: int, buf=None):
        if op == "read":
            return self.read(offset, buf if isinstance(buf, int) else len(buf))
        if op == "write":
            return self.write(offset, buf)
        raise ValueError(f"unknown op {op!r}")

    def _write_range(self, offset: int, data: bytes, sink: bool) -> None:
        c = self.chunk_size
        n = len(data)
        if n == 0:
            return
        ops: list[list] = []  # [device_sector, logical_sector, bytearray]

        def emit(dev_sector, s_lo, payload):
            if ops:
                last = ops[-1]
                k = len(last[2]) // SECTOR_SIZE
                if last[0] + k == dev_sector and last[1] + k == s_lo:
                    last[2] += payload
                    return
            ops.append([dev_sector, s_lo, bytearray(payload)])

        for v in range(offset // c, (offset + n - 1) // c + 1):
            lo = max(offset, v * c)
            hi = min(offset + n, (v + 1) * c)
            piece = data[lo - offset:hi - offset]
            t = self.chunk_mapping(v)
            if t is not None and t.mapping_type is MappingType.NULL:
                continue
            if t is None:
                try:
                    self._pool.allocate(self.volume_id, v)
                except PoolExhaustedError:
                    if sink:
                        self._sunk.add(v)
                        continue
                    self._flush(ops)
                    raise PoolExhaustedError(written=lo - offset) from None
                t = self.chunk_mapping(v)
                # A fresh chunk is written whole, so stale bytes never leak into reads.
                buf = bytearray(c)
                buf[lo - v * c:hi - v * c] = piece
                emit(resolve_mapping([t], v * c // SECTOR_SIZE)[1], v * c // SECTOR_SIZE, buf)
                continue
            s_lo, s_hi = lo // SECTOR_SIZE, -(-hi // SECTOR_SIZE)
            buf = bytearray((s_hi - s_lo) * SECTOR_SIZE)
            dev_lo = resolve_mapping([t], s_lo)[1]
            if lo % SECTOR_SIZE:
                buf[:SECTOR_SIZE] = self._read_sectors(dev_lo, s_lo, 1)
            if hi % SECTOR_SIZE and (s_hi - 1 != s_lo or not lo % SECTOR_SIZE):
                buf[-SECTOR_SIZE:] = self._read_sectors(dev_lo + s_hi - 1 - s_lo, s_hi - 1, 1)
            buf[lo - s_lo * SECTOR_SIZE:hi - s_lo * SECTOR_SIZE] = piece
            emit(dev_lo, s_lo, buf)
        self._flush(ops)

    def _flush(self, ops) -> None:
        for dev_sector, s_lo, payload in ops:
            self._pool.device.write_sectors(dev_sector, self._encrypt(s_lo, bytes(payload)))
        ops.clear()

    def _read_sectors(self, dev_sector: int, logical_sector: int, count: int) -> bytes:
        return self._decrypt(logical_sector, self._pool.device.read_sectors(dev_sector, count))

    def _encrypt(self, logical_sector: int, data: bytes) -> bytes:
        return self._cipher.encrypt(logical_sector, data) if self._cipher else data

    def _decrypt(self, logical_sector: int, data: bytes) -> bytes:
        return self._cipher.decrypt(logical_sector, data) if self._cipher else data

    def __repr__(self):
        return f"<{self.kind.name.lower()} volume {self.name} label={self.labeled_capacity_bytes}>"


class VolumeManager:
    """Volume table plus the level-0 fill accounting for one pool."""

    def __init__(self, pool: ThinPool, salt: bytes, name_trim: int = NAME_TRIM_DEFAULT):
        if not NAME_TRIM_MIN <= name_trim <= NAME_TRIM_MAX:
            raise ValueError(f"trim length must be in [{NAME_TRIM_MIN}, {NAME_TRIM_MAX}]")
        self.pool = pool
        self.salt = bytes(salt)
        self.name_trim = name_trim
        self._lock = threading.RLock()
        self._slots: dict[str, int] = {}
        self._entries: dict[str, _Entry] = {}
        self._volumes: dict[str, VirtualLogicalVolume] = {}
        for i, raw in enumerate(pool.table_entries()):
            entry = _Entry.unpack(raw)
            if entry is not None:
                self._slots[entry.name] = i
                self._entries[entry.name] = entry
        self.fill = FillAccounting()
        sink = self._entries.get(LEVEL0_NAME)
        if sink is not None:
            self.fill = FillAccounting(True, sink.aux0, sink.aux1)

    @classmethod
    def for_device(cls, pool: ThinPool, name_trim: int = NAME_TRIM_DEFAULT) -> "VolumeManager":
        """Manager salted with the crypto footer's KDF salt."""
        return cls(pool, pool.device.footer.kdf_salt, name_trim)

    # -- table plumbing ----------------------------------------------------

    def _store(self, entry: _Entry) -> None:
        with self._lock:
            slot = self._slots.get(entry.name)
            if slot is None:
                used = set(self._slots.values())
                free = [i for i in range(len(self.pool.table_entries())) if i not in used]
                if not free:
                    raise VolumeTableFullError("volume table is full")
                slot = free[0]
            self.pool.write_table_entry(slot, entry.pack())
            self._slots[entry.name] = slot
            self._entries[entry.name] = entry

    def _drop(self, name: str) -> None:
        with self._lock:
            slot = self._slots.pop(name)
            self._entries.pop(name)
            self._volumes.pop(name, None)
            self.pool.write_table_entry(slot, bytes(TABLE_ENTRY_SIZE))

    def names(self) -> list[str]:
        """Opaque names as an observer of the decrypted table would see them."""
        return sorted(self._entries)

    # -- outer -------------------------------------------------------------

    def create_outer(self, physical_capacity_bytes: int) -> VirtualLogicalVolume:
        with self._lock:
            if OUTER_NAME in self._entries:
                raise OuterExistsError("outer volume already exists")
            self._store(_Entry(OUTER_NAME, VolumeKind.OUTER, physical_capacity_bytes, os.urandom(16)))
            return self.outer()

    def has_outer(self) -> bool:
        return OUTER_NAME in self._entries

    def outer(self) -> VirtualLogicalVolume:
        with self._lock:
            if OUTER_NAME not in self._entries:
                raise NoOuterVolumeError("no outer volume")
            vol = self._volumes.get(OUTER_NAME)
            if vol is None:
                vol = self._volumes[OUTER_NAME] = VirtualLogicalVolume(self, self._entries[OUTER_NAME])
            return vol

    # -- hidden ------------------------------------------------------------

    def volume_name(self, password) -> str:
        return derive_volume_name(password, self.salt, self.name_trim)

    def create_hidden(self, password, level: int = 1, labeled_capacity_bytes: int | None = None,
                      salt: bytes | None = None) -> VirtualLogicalVolume:
        if level < 1:
            raise ValueError("hidden volumes have level >= 1")
        salt = self.salt if salt is None else salt
        name = derive_volume_name(password, salt, self.name_trim)
        if labeled_capacity_bytes is None:
            labeled_capacity_bytes = self.pool.data_size_bytes
        with self._lock:
            if name in self._entries:
                raise NameCollisionError("a volume with this name already exists")
            entry = _Entry(name, VolumeKind.HIDDEN, labeled_capacity_bytes, os.urandom(16))
            self._store(entry)
            vol = VirtualLogicalVolume(self, entry, derive_volume_key(password, salt), level)
            self._volumes[name] = vol
            return vol

    def find_hidden(self, password, name: str | None = None) -> Optional[VirtualLogicalVolume]:
        """The hidden volume behind ``password``, or ``None``."""
        name = self.volume_name(password) if name is None else name
        with self._lock:
            entry = self._entries.get(name)
            if entry is None or entry.kind is not VolumeKind.HIDDEN:
                return None
            vol = self._volumes.get(name)
            if vol is None:
                vol = VirtualLogicalVolume(self, entry, derive_volume_key(password, self.salt))
                self._volumes[name] = vol
            return vol

    def open_hidden(self, password) -> VirtualLogicalVolume:
        vol = self.find_hidden(password)
        if vol is None:
            raise UnknownVolumeError("volume not found")
        return vol

    def delete_hidden(self, password) -> int:
        """Drop a hidden volume and zero its chunks; returns chunks freed."""
        vol = self.open_hidden(password)
        with self._lock, vol._lock:
            chunks = self.pool.chunks_of(vol.volume_id)
            for v in chunks:
                self.pool.release(vol.volume_id, v)
            self._drop(vol.name)
        return len(chunks)

    # -- level 0 -----------------------------------------------------------

    def null_sink(self) -> VirtualLogicalVolume:
        entry = self._entries.get(LEVEL0_NAME) or _Entry(
            LEVEL0_NAME, VolumeKind.NULL_SINK, self.pool.data_size_bytes, bytes(16))
        return VirtualLogicalVolume(self, entry, level=0)

    def engage_level0(self) -> FillAccounting:
        outer = self.outer()
        with outer._lock, self._lock:
            if not self.fill.level0_engaged:
                self.fill = FillAccounting(True, outer.committed_bytes(), 0)
                self._persist_fill()
            return self.fill

    def disengage_level0(self) -> None:
        with self._lock:
            if LEVEL0_NAME in self._entries:
                self._drop(LEVEL0_NAME)
            self.fill = FillAccounting()
            if OUTER_NAME in self._volumes:
                self._volumes[OUTER_NAME]._sunk.clear()

    def _persist_fill(self) -> None:
        outer_label = self._entries[OUTER_NAME].labeled_capacity
        self._store(_Entry(LEVEL0_NAME, VolumeKind.NULL_SINK, outer_label, bytes(16),
                           self.fill.used_before_attack_bytes, self.fill.attack_bytes_recorded))
