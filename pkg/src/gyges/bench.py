"""dd-style throughput harness over each layer of the stack.

Four targets are compared on equal-sized scratch images: the raw image,
the image under FDE only, the outer volume, and a hidden volume. Only
ratios are meaningful; absolute numbers depend on the host.
"""

from __future__ import annotations

import csv
import enum
import io
import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .block_store import SECTOR_SIZE, create_physical
from .crypto import fde_init
from .errors import GygesError, TargetTooSmallError
from .thin_pool import pool_create
from .volumes import VolumeManager

MiB = 1024 * 1024
DEFAULT_TOTAL = 64 * MiB
DEFAULT_BLOCK = 4 * MiB
# Reference gap between hidden and outer sequential writes on the original
# phone hardware; printed for context, never asserted.
REFERENCE_HIDDEN_VS_OUTER = 0.97
SAMPLE_FRACTION = 0.01


class Workload(str, enum.Enum):
    SEQ_READ = "seq_read"
    SEQ_WRITE = "seq_write"
    RND_READ = "rnd_read"
    RND_WRITE = "rnd_write"

    @property
    def is_write(self) -> bool:
        return self in (Workload.SEQ_WRITE, Workload.RND_WRITE)

    @property
    def is_random(self) -> bool:
        return self in (Workload.RND_READ, Workload.RND_WRITE)


class Target(str, enum.Enum):
    RAW = "raw"
    FDE_ONLY = "fde_only"
    OUTER = "outer"
    HIDDEN = "hidden"


# Layer order, bottom first.
LAYERS = (Target.RAW, Target.FDE_ONLY, Target.OUTER, Target.HIDDEN)


class BenchVerifyError(GygesError):
    """Sampled readback after a write benchmark did not match."""


@dataclass(frozen=True)
class BenchResult:
    workload: Workload
    target: Target
    throughput: float
    trials: int
    stdev: float = 0.0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.throughput <= 0:
            raise ValueError("throughput must be positive")

    @property
    def mb_per_s(self) -> float:
        return self.throughput / MiB


class _SectorAdapter:
    """Byte IO over a sector device (raw or FDE), whole sectors only."""

    def __init__(self, kind: Target, dev, closer):
        self.kind = kind
        self._dev = dev
        self._closer = closer

    @property
    def free_bytes(self) -> int:
        return self._dev.capacity_bytes

    def write(self, offset: int, data: bytes) -> None:
        self._dev.write_sectors(offset // SECTOR_SIZE, data)

    def read(self, offset: int, length: int) -> bytes:
        return self._dev.read_sectors(offset // SECTOR_SIZE, length // SECTOR_SIZE)

    def flush(self) -> None:
        self._dev.flush()

    def close(self) -> None:
        self._closer()


class _VolumeAdapter:
    def __init__(self, kind: Target, vol, pool, closer):
        self.kind = kind
        self._vol = vol
        self._pool = pool
        self._closer = closer

    @property
    def free_bytes(self) -> int:
        pool_room = (self._pool.stats().free_chunks * self._pool.chunk_size
                     + self._vol.committed_bytes())
        return min(self._vol.labeled_capacity_bytes, pool_room)

    def write(self, offset: int, data: bytes) -> None:
        self._vol.write(offset, data)

    def read(self, offset: int, length: int) -> bytes:
        return self._vol.read(offset, length)

    def flush(self) -> None:
        self._pool.device.flush()

    def close(self) -> None:
        self._closer()


def _headroom(total_bytes: int) -> int:
    # Pool label, metadata and chunk alignment need a little room on top of the payload.
    need = total_bytes + total_bytes // 512 + 2 * MiB
    return -(-need // MiB) * MiB


def open_target(kind, directory: str, total_bytes: int = DEFAULT_TOTAL,
                kdf_iterations: int = 1000):
    """Create a fresh scratch image under ``directory`` and wrap it as ``kind``."""
    kind = Target(kind)
    size = _headroom(total_bytes)
    path = os.path.join(directory, f"bench-{kind.value}-{os.getpid()}-{time.monotonic_ns()}.img")
    vol = create_physical(path, size)

    def closer():
        vol.close()
        os.unlink(path)

    if kind is Target.RAW:
        return _SectorAdapter(kind, vol, closer)
    dev = fde_init(vol, b"bench", kdf_iterations=kdf_iterations)
    if kind is Target.FDE_ONLY:
        return _SectorAdapter(kind, dev, closer)
    pool = pool_create(dev)
    manager = VolumeManager.for_device(pool)
    outer = manager.create_outer(size)
    if kind is Target.OUTER:
        return _VolumeAdapter(kind, outer, pool, closer)
    hidden = manager.create_hidden(b"bench-hidden", 1)
    return _VolumeAdapter(kind, hidden, pool, closer)


def _offsets(total_bytes: int, block_size: int, shuffle: bool, rng) -> np.ndarray:
    offs = np.arange(total_bytes // block_size, dtype=np.int64) * block_size
    if shuffle:
        rng.shuffle(offs)
    return offs


def _verify(adapter, blocks: dict[int, bytes], rng) -> None:
    keys = sorted(blocks)
    k = max(1, int(round(len(keys) * SAMPLE_FRACTION)))
    for off in rng.choice(keys, size=k, replace=False):
        off = int(off)
        if adapter.read(off, len(blocks[off])) != blocks[off]:
            raise BenchVerifyError(f"readback mismatch at offset {off}")


def run_bench(target, workload, total_bytes: int = DEFAULT_TOTAL, block_size: int = DEFAULT_BLOCK,
              trials: int = 3, seed: int = 0) -> BenchResult:
    """Mean throughput of ``workload`` on ``target`` over ``trials`` trials.

    Writes use fresh pseudo-random data each trial and are flushed before the
    clock stops. Every write trial is followed by a readback of 1% of its
    blocks, chosen at random.
    """
    workload = Workload(workload)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if block_size <= 0 or block_size % SECTOR_SIZE or total_bytes % block_size or total_bytes <= 0:
        raise ValueError("block size must be a sector multiple dividing total_bytes")
    if total_bytes > target.free_bytes:
        raise TargetTooSmallError(
            f"{total_bytes} bytes requested but target has {target.free_bytes} free")
    rng = np.random.default_rng(seed)
    rates = []
    if not workload.is_write:
        # Reads need something real underneath; laid down outside the clock.
        for off in _offsets(total_bytes, block_size, False, rng):
            target.write(int(off), rng.bytes(block_size))
        target.flush()
    for _ in range(trials):
        offsets = _offsets(total_bytes, block_size, workload.is_random, rng)
        if workload.is_write:
            payload = {int(off): rng.bytes(block_size) for off in offsets}
            t0 = time.perf_counter()
            for off in offsets:
                target.write(int(off), payload[int(off)])
            target.flush()
            elapsed = time.perf_counter() - t0
            _verify(target, payload, rng)
        else:
            t0 = time.perf_counter()
            for off in offsets:
                target.read(int(off), block_size)
            elapsed = time.perf_counter() - t0
        rates.append(total_bytes / max(elapsed, 1e-9))
    stdev = statistics.stdev(rates) if len(rates) > 1 else 0.0
    return BenchResult(workload, Target(target.kind), statistics.fmean(rates), trials, stdev)


def bench_matrix(directory: str, workloads=tuple(Workload), targets=LAYERS,
                 total_bytes: int = DEFAULT_TOTAL, block_size: int = DEFAULT_BLOCK,
                 trials: int = 3, seed: int = 0) -> list[BenchResult]:
    results = []
    for kind in targets:
        adapter = open_target(kind, directory, total_bytes)
        try:
            for w in workloads:
                results.append(run_bench(adapter, w, total_bytes, block_size, trials, seed))
        finally:
            adapter.close()
    return results


def ratio_rows(results: list[BenchResult]) -> list[tuple[str, str, float, float | None]]:
    """(workload, target, MB/s, ratio vs raw) for each result."""
    raw = {r.workload: r.throughput for r in results if r.target is Target.RAW}
    rows = []
    for r in results:
        base = raw.get(r.workload)
        rows.append((r.workload.value, r.target.value, r.mb_per_s,
                     r.throughput / base if base else None))
    return rows


def hidden_vs_outer(results: list[BenchResult]) -> float | None:
    by = {(r.workload, r.target): r.throughput for r in results}
    h = by.get((Workload.SEQ_WRITE, Target.HIDDEN))
    o = by.get((Workload.SEQ_WRITE, Target.OUTER))
    return h / o if h and o else None


def format_table(results: list[BenchResult]) -> str:
    lines = [f"{'workload':<10} {'target':<9} {'MB/s':>10} {'ratio-vs-raw':>13}"]
    for w, t, mbs, ratio in ratio_rows(results):
        r = "-" if ratio is None else f"{ratio:.3f}"
        lines.append(f"{w:<10} {t:<9} {mbs:>10.1f} {r:>13}")
    hv = hidden_vs_outer(results)
    if hv is not None:
        lines.append(f"hidden/outer seq_write = {hv:.3f} "
                     f"(reference on phone hardware: {REFERENCE_HIDDEN_VS_OUTER:.2f})")
    return "\n".join(lines)


def format_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workload", "target", "MB/s", "ratio-vs-raw"])
    for wl, t, mbs, ratio in ratio_rows(results):
        w.writerow([wl, t, f"{mbs:.3f}", "" if ratio is None else f"{ratio:.4f}"])
    return buf.getvalue()


def monotone_violations(results: list[BenchResult], sigmas: float = 3.0) -> list[tuple]:
    """Layer pairs where the upper layer writes faster than the one beneath it
    by more than ``sigmas`` combined standard deviations."""
    by = {(r.workload, r.target): r for r in results}
    bad = []
    for w in (Workload.SEQ_WRITE, Workload.RND_WRITE):
        for lower, upper in zip(LAYERS, LAYERS[1:]):
            lo, up = by.get((w, lower)), by.get((w, upper))
            if lo is None or up is None:
                continue
            noise = sigmas * (lo.stdev ** 2 + up.stdev ** 2) ** 0.5
            if up.throughput > lo.throughput + noise:
                bad.append((w.value, lower.value, upper.value))
    return bad
