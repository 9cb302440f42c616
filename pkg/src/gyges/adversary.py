"""Attacks against a deniable store, and a reserved-area baseline to compare with.

Two attacks are modelled:

``capacity_compare``
    Report 1 when the physical capacity exceeds what the outer volume
    claims, since the shortfall must be hiding something.
``fill_to_full``
    Write pseudo-random data into the outer volume until it reports full,
    then run the capacity comparison on ``used_before + audited``.

The baseline places its hidden volume at a password-derived offset inside
a reserved tail of the disk. The outer filesystem must stay below that
offset, so both attacks succeed against it.
"""

from __future__ import annotations

import enum
import hashlib
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .block_store import SECTOR_SIZE
from .errors import (
    InconsistentInputsError,
    OutOfRangeError,
    ReadOnlyTargetError,
    StorageFullError,
)

DEFAULT_BATCH = 4 * 1024 * 1024
MOBIFLAGE_KDF_ITERATIONS = 1000
DEFAULT_FS_OVERHEAD = 0.10
DEFAULT_FS_COUNT = 2


class Attack(str, enum.Enum):
    CAPACITY_COMPARE = "capacity_compare"
    FILL_TO_FULL = "fill_to_full"


@dataclass(frozen=True)
class AttackReport:
    attack: Attack
    verdict: int
    audited_bytes: Optional[int]
    elapsed: float
    used_before: Optional[int] = None

    def __post_init__(self):
        if self.verdict not in (0, 1):
            raise ValueError("verdict must be 0 or 1")
        if (self.audited_bytes is not None) != (self.attack is Attack.FILL_TO_FULL):
            raise ValueError("audited_bytes is present exactly for fill_to_full")

    def to_record(self) -> str:
        """One line of ``key=value`` fields."""
        fields = [f"attack={self.attack.value}", f"verdict={self.verdict}"]
        if self.audited_bytes is not None:
            fields.append(f"audited_bytes={self.audited_bytes}")
        if self.used_before is not None:
            fields.append(f"used_before={self.used_before}")
        fields.append(f"elapsed={self.elapsed:.6f}")
        return " ".join(fields)

    @classmethod
    def from_record(cls, line: str) -> "AttackReport":
        kv = dict(part.split("=", 1) for part in line.split())
        audited = kv.get("audited_bytes")
        used = kv.get("used_before")
        return cls(Attack(kv["attack"]), int(kv["verdict"]),
                   None if audited is None else int(audited), float(kv["elapsed"]),
                   None if used is None else int(used))


def attack_capacity_compare(physical_capacity: int, reported_capacity: int) -> int:
    """1 iff ``physical_capacity > reported_capacity``."""
    if physical_capacity <= 0 or reported_capacity <= 0:
        raise InconsistentInputsError("capacities must be positive")
    if reported_capacity > physical_capacity:
        raise InconsistentInputsError(
            f"reported capacity {reported_capacity} exceeds physical {physical_capacity}")
    return int(physical_capacity > reported_capacity)


def capacity_report(physical_capacity: int, reported_capacity: int) -> AttackReport:
    t0 = time.perf_counter()
    verdict = attack_capacity_compare(physical_capacity, reported_capacity)
    return AttackReport(Attack.CAPACITY_COMPARE, verdict, None, time.perf_counter() - t0)


def attack_fill_to_full(target, physical_capacity: int, *, batch_size: int = DEFAULT_BATCH,
                        seed: int = 0) -> AttackReport:
    """Fill ``target`` from its first free byte until it signals full storage.

    ``target`` needs ``labeled_capacity_bytes``, ``reported_used_bytes()``
    and ``write(offset, data)``. Used space is assumed to be a prefix, which
    is how the attacker's filesystem view lays out existing data.
    """
    if getattr(target, "read_only", False):
        raise ReadOnlyTargetError("target is read-only")
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    label = target.labeled_capacity_bytes
    used_before = target.reported_used_bytes()
    rng = np.random.default_rng(seed)
    audited = 0
    offset = used_before
    t0 = time.perf_counter()
    full = False
    while offset < label:
        n = min(batch_size, label - offset)
        try:
            target.write(offset, rng.bytes(n))
        except StorageFullError as e:
            audited += e.written
            full = True
            break
        audited += n
        offset += n
    if not full:
        # Every labelled byte was accepted; one byte past the label must now fail.
        try:
            target.write(label, b"\0")
        except (StorageFullError, OutOfRangeError):
            pass
    elapsed = time.perf_counter() - t0
    seen = min(audited + used_before, physical_capacity)
    verdict = int(physical_capacity > seen)
    return AttackReport(Attack.FILL_TO_FULL, verdict, audited, elapsed, used_before)


# -- reserved-area baseline ---------------------------------------------------


def _h(pwd, salt: bytes) -> int:
    if isinstance(pwd, str):
        pwd = pwd.encode("utf-8")
    digest = hashlib.pbkdf2_hmac("sha256", bytes(pwd), bytes(salt), MOBIFLAGE_KDF_ITERATIONS)
    return int.from_bytes(digest, "big")


def mobiflage_offset(pwd, salt: bytes, vlen: int, h: int | None = None) -> int:
    """Hidden-volume start sector: ``floor(3v/4) - (H mod floor(v/4))``.

    ``h`` overrides the password hash, for exercising edge cases.
    """
    if vlen < 8:
        raise ValueError("vlen must be at least 8 sectors")
    h = _h(pwd, salt) if h is None else h
    return (3 * vlen) // 4 - (h % (vlen // 4))


class ReservedAreaBaseline:
    """Capacity geometry of a reserved-area hidden volume design.

    The hidden volume occupies ``[offset, vlen)`` and the outer filesystem
    is confined to ``[0, offset)``. Writes are counted but not stored.
    """

    def __init__(self, vlen: int, offset: int):
        if not vlen // 2 < offset <= (3 * vlen) // 4:
            raise ValueError("offset outside the reserved band")
        self.vlen = vlen
        self.offset = offset
        self.used = 0
        self.read_only = False

    @classmethod
    def from_password(cls, vlen: int, pwd, salt: bytes) -> "ReservedAreaBaseline":
        return cls(vlen, mobiflage_offset(pwd, salt, vlen))

    @property
    def physical_capacity_bytes(self) -> int:
        return self.vlen * SECTOR_SIZE

    @property
    def outer_capacity(self) -> int:
        return self.offset * SECTOR_SIZE

    labeled_capacity_bytes = outer_capacity

    @property
    def reserved_bytes(self) -> int:
        return self.physical_capacity_bytes - self.outer_capacity

    def block_utilization(self) -> float:
        return self.outer_capacity / self.physical_capacity_bytes

    def reported_used_bytes(self) -> int:
        return self.used

    def preload(self, used_bytes: int) -> None:
        if not 0 <= used_bytes <= self.outer_capacity:
            raise ValueError("preload exceeds outer capacity")
        self.used = used_bytes

    def write(self, offset: int, data) -> int:
        n = len(data)
        room = max(0, self.outer_capacity - offset)
        if n > room:
            self.used = max(self.used, offset + room)
            raise StorageFullError(written=room)
        self.used = max(self.used, offset + n)
        return n


# -- utilization --------------------------------------------------------------


@dataclass(frozen=True)
class UtilizationRow:
    design: str
    block_eta: float
    composed_eta: float


def _block_eta(source) -> float:
    if isinstance(source, (int, float)):
        return float(source)
    if hasattr(source, "block_utilization"):
        return source.block_utilization()
    if hasattr(source, "eta"):
        return source.eta
    if hasattr(source, "stats"):
        return source.stats().eta
    raise TypeError(f"cannot derive utilization from {type(source).__name__}")


def utilization_compare(designs: Iterable[tuple[str, object]],
                        fs_overhead: float = DEFAULT_FS_OVERHEAD,
                        fs_count: int = DEFAULT_FS_COUNT) -> list[UtilizationRow]:
    """Block-layer utilization per design, with filesystem overheads deducted.

    Each filesystem layered on the design costs ``fs_overhead`` of the raw
    capacity, so the composed figure is ``eta - fs_count * fs_overhead``.
    """
    if not 0 <= fs_overhead < 1 or fs_count < 0:
        raise ValueError("bad filesystem overhead parameters")
    rows = []
    for name, source in designs:
        eta = _block_eta(source)
        rows.append(UtilizationRow(name, eta, max(0.0, eta - fs_count * fs_overhead)))
    return rows


def format_utilization(rows: list[UtilizationRow]) -> str:
    lines = [f"{'design':<16} {'block':>9} {'composed':>9}"]
    for r in rows:
        lines.append(f"{r.design:<16} {r.block_eta:>9.6f} {r.composed_eta:>9.6f}")
    return "\n".join(lines)
