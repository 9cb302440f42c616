"""Dynamic mounting of hidden volumes.

A mount request must carry a bearer token (HMAC-SHA256 over the app id and
expiry) before the password is even looked at. A mounted session carries a
deadline, and a cooperative tick unmounts every session whose deadline is
at or before the tick instant. Mounting never reopens the pool or re-runs
the FDE unlock; it only looks up a name in the already-open volume table.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import os
import secrets
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import (
    AlreadyMountedError,
    ConfigError,
    InvalidTokenError,
    StaleHandleError,
    UnknownVolumeError,
)
from .volumes import VirtualLogicalVolume, VolumeManager

DEFAULT_TIMEOUT = 300.0
SECRET_ENV = "GYGES_SECRET"
MAC_SIZE = hashlib.sha256().digest_size
_EXPIRY = struct.Struct(">Q")


@dataclass(frozen=True)
class AccessToken:
    app_id: str
    expiry: int
    mac: bytes

    def encode(self) -> str:
        """Wire form: base64(app_id || expiry_u64_be || mac)."""
        raw = self.app_id.encode("utf-8") + _EXPIRY.pack(self.expiry) + self.mac
        return base64.b64encode(raw).decode("ascii")

    @classmethod
    def decode(cls, wire: str) -> "AccessToken":
        try:
            raw = base64.b64decode(wire, validate=True)
        except (binascii.Error, ValueError) as e:
            raise InvalidTokenError("invalid token") from e
        if len(raw) < _EXPIRY.size + MAC_SIZE:
            raise InvalidTokenError("invalid token")
        mac = raw[-MAC_SIZE:]
        (expiry,) = _EXPIRY.unpack(raw[-MAC_SIZE - _EXPIRY.size:-MAC_SIZE])
        try:
            app_id = raw[:-MAC_SIZE - _EXPIRY.size].decode("utf-8")
        except UnicodeDecodeError as e:
            raise InvalidTokenError("invalid token") from e
        return cls(app_id, expiry, mac)


def _mac(secret: bytes, app_id: str, expiry: int) -> bytes:
    return hmac.new(secret, app_id.encode("utf-8") + _EXPIRY.pack(expiry), hashlib.sha256).digest()


def _secret_bytes(secret) -> bytes:
    if isinstance(secret, str):
        secret = secret.encode("utf-8")
    if not secret:
        raise ConfigError("service secret is empty")
    return bytes(secret)


def issue_token(secret, app_id: str, ttl: float, now: float | None = None) -> AccessToken:
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    now = time.time() if now is None else now
    expiry = int(now + ttl)
    return AccessToken(app_id, expiry, _mac(_secret_bytes(secret), app_id, expiry))


def verify_token(secret, token: AccessToken, now: float | None = None) -> bool:
    now = time.time() if now is None else now
    good = hmac.compare_digest(_mac(_secret_bytes(secret), token.app_id, token.expiry), token.mac)
    return good and token.expiry > now


def secret_from_env(env=None) -> bytes:
    env = os.environ if env is None else env
    value = env.get(SECRET_ENV)
    if not value:
        raise ConfigError(f"{SECRET_ENV} is not set")
    return value.encode("utf-8")


@dataclass
class MountState:
    volume_name: str
    state: str
    deadline: Optional[float]
    handle: str


class SessionHandle:
    """The only path to a mounted volume's IO. Goes stale on unmount."""

    def __init__(self, registry: "MountRegistry", handle_id: str):
        self._registry = registry
        self.id = handle_id

    def read(self, offset: int, length: int) -> bytes:
        return self._registry._volume(self.id).read(offset, length)

    def write(self, offset: int, data) -> int:
        return self._registry._volume(self.id).write(offset, data)

    @property
    def labeled_capacity_bytes(self) -> int:
        return self._registry._volume(self.id).labeled_capacity_bytes

    def __repr__(self):
        return f"SessionHandle({self.id})"


class MountRegistry:
    """Mount state for hidden volumes of one open :class:`VolumeManager`.

    ``clock`` is the monotonic time source for deadlines; ``wall`` is the
    wall clock used for token expiry. Both are injectable for tests.
    """

    def __init__(self, manager: VolumeManager, secret, clock: Callable[[], float] = time.monotonic,
                 wall: Callable[[], float] = time.time, default_timeout: float = DEFAULT_TIMEOUT):
        self.manager = manager
        self._secret = _secret_bytes(secret)
        self._clock = clock
        self._wall = wall
        self.default_timeout = default_timeout
        self._lock = threading.Lock()
        self._sessions: dict[str, tuple[str, float, VirtualLogicalVolume]] = {}
        self._by_name: dict[str, str] = {}

    def mount_hidden(self, password, token, timeout: float | None = None,
                     now: float | None = None) -> SessionHandle:
        # The token is checked before the password is touched in any way.
        self.check_token(token)
        timeout = self.default_timeout if timeout is None else timeout
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        vol = self.manager.find_hidden(password)
        if vol is None:
            raise UnknownVolumeError("volume not found")
        now = self._clock() if now is None else now
        with self._lock:
            if vol.name in self._by_name:
                raise AlreadyMountedError("volume is already mounted")
            hid = secrets.token_hex(16)
            self._sessions[hid] = (vol.name, now + timeout, vol)
            self._by_name[vol.name] = hid
        return SessionHandle(self, hid)

    def check_token(self, token) -> AccessToken:
        if isinstance(token, str):
            token = AccessToken.decode(token)
        if not isinstance(token, AccessToken) or not verify_token(self._secret, token, self._wall()):
            raise InvalidTokenError("invalid token")
        return token

    def unmount(self, handle) -> None:
        hid = handle.id if isinstance(handle, SessionHandle) else handle
        with self._lock:
            session = self._sessions.pop(hid, None)
            if session is None:
                raise StaleHandleError("stale handle")
            del self._by_name[session[0]]

    def auto_unmount_tick(self, now: float | None = None) -> list[str]:
        now = self._clock() if now is None else now
        with self._lock:
            expired = [hid for hid, (_, deadline, _) in self._sessions.items() if deadline <= now]
            names = []
            for hid in expired:
                name, _, _ = self._sessions.pop(hid)
                del self._by_name[name]
                names.append(name)
        return sorted(names)

    def list_mounts(self) -> list[MountState]:
        with self._lock:
            return [MountState(name, "mounted", deadline, hid)
                    for hid, (name, deadline, _) in sorted(self._sessions.items(),
                                                            key=lambda kv: kv[1][1])]

    def is_mounted(self, handle) -> bool:
        hid = handle.id if isinstance(handle, SessionHandle) else handle
        with self._lock:
            return hid in self._sessions

    def handle(self, hid: str) -> SessionHandle:
        if not self.is_mounted(hid):
            raise StaleHandleError("stale handle")
        return SessionHandle(self, hid)

    def _volume(self, hid: str) -> VirtualLogicalVolume:
        with self._lock:
            session = self._sessions.get(hid)
        if session is None:
            raise StaleHandleError("stale handle")
        return session[2]


class TickDriver:
    """Background thread calling ``auto_unmount_tick`` every ``interval`` seconds."""

    def __init__(self, registry: MountRegistry, interval: float = 1.0):
        self.registry = registry
        self.interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="gyges-tick", daemon=True)

    def _run(self):
        while not self._stop.wait(self.interval):
            self.registry.auto_unmount_tick()

    def start(self) -> "TickDriver":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
