"""Full-disk encryption over a :class:`~gyges.block_store.PhysicalVolume`.

Every 512-byte sector is encrypted independently with AES-CBC. The IV is
ESSIV:SHA256: the little-endian sector number, as one 16-byte block,
encrypted under ``SHA256(key)``. The master key is random and is stored
only wrapped under a PBKDF2-HMAC-SHA256 key-encryption key in the footer.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .block_store import FOOTER_SIZE, SECTOR_SIZE, PhysicalVolume
from .errors import (
    AlignmentError,
    BadPasswordError,
    CorruptFooterError,
    FooterPresentError,
    GygesError,
)

DEFAULT_KDF_ITERATIONS = 10_000
KEY_SIZES = (16, 32)

FOOTER_MAGIC = b"GYGSFDE\0"
FOOTER_VERSION = 1
# magic, version, key_bytes, kdf_iterations, reserved, salt, wrapped key (slot of 32)
_FOOTER = struct.Struct("<8sIIII16s32s")
CHECK_OFFSET = _FOOTER.size
# Known-plaintext sector for the check value. Its sector number lies above
# any data sector, so its IV is never shared with real data.
CHECK_SECTOR = (1 << 64) - 1
CHECK_PLAINTEXT = (b"gyges key check\n" * (SECTOR_SIZE // 16))

_BLOCKS_PER_SECTOR = SECTOR_SIZE // 16
# Below this many sectors the per-sector CBC call beats the vectorised path.
_VECTOR_THRESHOLD = 4


class SectorCipher:
    """AES-CBC-ESSIV:SHA256 over runs of consecutive sectors.

    CBC chaining is sequential only inside a sector, so a run of ``n``
    sectors is encrypted as 32 rounds of one ECB call over ``n`` blocks.
    """

    def __init__(self, key: bytes):
        if len(key) not in KEY_SIZES:
            raise ValueError(f"key must be one of {KEY_SIZES} bytes")
        self._key = bytes(key)
        self._ecb = Cipher(algorithms.AES(self._key), modes.ECB())
        self._essiv = Cipher(algorithms.AES(hashlib.sha256(self._key).digest()), modes.ECB())

    def ivs(self, start: int, count: int) -> np.ndarray:
        """ESSIV blocks for sectors ``start .. start + count - 1``, shape (count, 16)."""
        idx = np.zeros((count, 2), dtype="<u8")
        idx[:, 0] = np.uint64(start) + np.arange(count, dtype=np.uint64)
        enc = self._essiv.encryptor()
        return np.frombuffer(enc.update(idx.tobytes()), dtype=np.uint8).reshape(count, 16)

    def iv(self, sector: int) -> bytes:
        return self.ivs(sector, 1).tobytes()

    def encrypt(self, start: int, data: bytes) -> bytes:
        count = self._count(data)
        if count == 0:
            return b""
        ivs = self.ivs(start, count)
        if count <= _VECTOR_THRESHOLD:
            out = []
            for i in range(count):
                enc = Cipher(algorithms.AES(self._key), modes.CBC(ivs[i].tobytes())).encryptor()
                out.append(enc.update(data[i * SECTOR_SIZE:(i + 1) * SECTOR_SIZE]))
            return b"".join(out)
        # Each 16-byte block is handled as two u64 lanes; round j does block j of every sector.
        plain = np.frombuffer(data, dtype=np.uint64).reshape(count, _BLOCKS_PER_SECTOR, 2)
        out = np.empty_like(plain)
        scratch = np.empty((count, 2), dtype=np.uint64)
        sink = bytearray(count * 16 + 16)
        ct = np.frombuffer(sink, dtype=np.uint64, count=count * 2).reshape(count, 2)
        enc = self._ecb.encryptor()
        prev = ivs.view(np.uint64)
        for j in range(_BLOCKS_PER_SECTOR):
            np.bitwise_xor(plain[:, j, :], prev, out=scratch)
            enc.update_into(scratch, sink)
            out[:, j, :] = ct
            prev = ct
        return out.tobytes()

    def decrypt(self, start: int, data: bytes) -> bytes:
        count = self._count(data)
        if count == 0:
            return b""
        ivs = self.ivs(start, count)
        cipher = np.frombuffer(data, dtype=np.uint8).reshape(count, _BLOCKS_PER_SECTOR, 16)
        dec = self._ecb.decryptor()
        raw = np.frombuffer(dec.update(bytes(data)), dtype=np.uint8).reshape(cipher.shape)
        plain = np.empty_like(raw)
        plain[:, 0, :] = raw[:, 0, :] ^ ivs
        plain[:, 1:, :] = raw[:, 1:, :] ^ cipher[:, :-1, :]
        return plain.tobytes()

    @staticmethod
    def _count(data: bytes) -> int:
        if len(data) % SECTOR_SIZE:
            raise AlignmentError("cipher input must be whole sectors")
        return len(data) // SECTOR_SIZE


@dataclass(frozen=True)
class CryptoFooter:
    kdf_salt: bytes
    kdf_iterations: int
    wrapped_master_key: bytes
    check_value: bytes

    @property
    def key_bytes(self) -> int:
        return len(self.wrapped_master_key)

    def pack(self) -> bytes:
        head = _FOOTER.pack(FOOTER_MAGIC, FOOTER_VERSION, self.key_bytes,
                            self.kdf_iterations, 0, self.kdf_salt,
                            self.wrapped_master_key.ljust(32, b"\0"))
        return (head + self.check_value).ljust(FOOTER_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes) -> "CryptoFooter":
        if raw is None or len(raw) != FOOTER_SIZE:
            raise CorruptFooterError("crypto footer missing")
        magic, version, key_bytes, iterations, _, salt, wrapped = _FOOTER.unpack_from(raw)
        if magic != FOOTER_MAGIC:
            raise CorruptFooterError("crypto footer magic mismatch")
        if version != FOOTER_VERSION or key_bytes not in KEY_SIZES or iterations < 1:
            raise CorruptFooterError("crypto footer fields out of range")
        check = raw[CHECK_OFFSET:CHECK_OFFSET + SECTOR_SIZE]
        return cls(salt, iterations, wrapped[:key_bytes], check)


def _kek(password: bytes, salt: bytes, iterations: int, length: int) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password, salt, iterations, dklen=length)


def _ecb(key: bytes, data: bytes, decrypt: bool = False) -> bytes:
    c = Cipher(algorithms.AES(key), modes.ECB())
    ctx = c.decryptor() if decrypt else c.encryptor()
    return ctx.update(data) + ctx.finalize()


def _as_bytes(password) -> bytes:
    if isinstance(password, str):
        password = password.encode("utf-8")
    if not password:
        raise ValueError("password must be non-empty")
    return bytes(password)


class EncryptedDevice:
    """Transparent sector encryption over ``inner``; the key lives in memory only."""

    sector_size = SECTOR_SIZE

    def __init__(self, inner: PhysicalVolume, master_key: bytes, footer: CryptoFooter):
        self.inner = inner
        self.footer = footer
        self._master_key = master_key
        self._cipher = SectorCipher(master_key)

    @property
    def master_key(self) -> bytes:
        return self._master_key

    @property
    def capacity_bytes(self) -> int:
        return self.inner.capacity_bytes

    @property
    def num_sectors(self) -> int:
        return self.inner.num_sectors

    def read_sectors(self, start: int, count: int) -> bytes:
        return self._cipher.decrypt(start, self.inner.read_sectors(start, count))

    def write_sectors(self, start: int, data: bytes) -> None:
        # Range is validated before any cipher work.
        self.inner._check_range(start, len(data) // SECTOR_SIZE)
        self.inner.write_sectors(start, self._cipher.encrypt(start, data))

    def read_sector(self, index: int) -> bytes:
        return self.read_sectors(index, 1)

    def write_sector(self, index: int, buf: bytes) -> None:
        if len(buf) != SECTOR_SIZE:
            raise AlignmentError(f"sector buffer must be {SECTOR_SIZE} bytes")
        self.write_sectors(index, buf)

    def crypt_sector(self, op: str, index: int, buf: bytes | None = None):
        if op == "read":
            return self.read_sector(index)
        if op == "write":
            return self.write_sector(index, buf)
        raise ValueError(f"unknown op {op!r}")

    def flush(self) -> None:
        self.inner.flush()

    def close(self) -> None:
        self.inner.close()


def fde_init(vol: PhysicalVolume, password, *, kdf_iterations: int = DEFAULT_KDF_ITERATIONS,
             key_bytes: int = 16) -> EncryptedDevice:
    """Generate a master key for ``vol`` and write its wrapped form to the footer."""
    password = _as_bytes(password)
    if key_bytes not in KEY_SIZES:
        raise ValueError(f"key_bytes must be one of {KEY_SIZES}")
    if vol.has_footer():
        raise FooterPresentError(f"{vol.backing_path} already carries a crypto footer")
    try:
        master_key = os.urandom(key_bytes)
        salt = os.urandom(16)
    except (OSError, NotImplementedError) as e:
        raise GygesError(f"random source failed: {e}") from e
    wrapped = _ecb(_kek(password, salt, kdf_iterations, key_bytes), master_key)
    check = SectorCipher(master_key).encrypt(CHECK_SECTOR, CHECK_PLAINTEXT)
    footer = CryptoFooter(salt, kdf_iterations, wrapped, check)
    vol.write_footer(footer.pack())
    return EncryptedDevice(vol, master_key, footer)


def fde_open(vol: PhysicalVolume, password) -> EncryptedDevice:
    """Unwrap the master key with ``password``; :class:`BadPasswordError` if wrong."""
    password = _as_bytes(password)
    footer = CryptoFooter.unpack(vol.read_footer())
    kek = _kek(password, footer.kdf_salt, footer.kdf_iterations, footer.key_bytes)
    master_key = _ecb(kek, footer.wrapped_master_key, decrypt=True)
    check = SectorCipher(master_key).encrypt(CHECK_SECTOR, CHECK_PLAINTEXT)
    if not hmac.compare_digest(check, footer.check_value):
        raise BadPasswordError("wrong password")
    return EncryptedDevice(vol, master_key, footer)
