"""Command-line front end.

Passwords never travel in argv. The device password comes from
``GYGES_PASSWORD``, and a hidden-volume password from the variable named
by ``--hv-password-env`` (default ``GYGES_HV_PASSWORD``). Either one
falls back to a terminal prompt. The token secret comes from
``GYGES_SECRET``.
"""

from __future__ import annotations

import argparse
import getpass
import os
import shlex
import sys
import tempfile

from . import adversary, bench
from .block_store import PhysicalVolume, create_physical, read_header_capacity
from .config import Config, load_config, parse_size
from .crypto import fde_init, fde_open
from .errors import ConfigError, GygesError, StaleHandleError
from .mount_service import MountRegistry, TickDriver, issue_token, secret_from_env
from .thin_pool import pool_create, pool_open
from .volumes import VolumeManager

PASSWORD_ENV = "GYGES_PASSWORD"
HV_PASSWORD_ENV = "GYGES_HV_PASSWORD"
USAGE_EXIT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        if message:
            self._print_message(message, sys.stderr)
        raise _HelpExit(status)


class _HelpExit(Exception):
    def __init__(self, status):
        self.status = status


class Streams:
    def __init__(self, stdin=None, stdout=None, stderr=None, env=None):
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.env = os.environ if env is None else env

    def out(self, line: str) -> None:
        print(line, file=self.stdout)

    def err(self, line: str) -> None:
        print(line, file=self.stderr)

    def write_bytes(self, data: bytes) -> None:
        buf = getattr(self.stdout, "buffer", None)
        if buf is None:
            self.out(data.hex())
        else:
            self.stdout.flush()
            buf.write(data)
            buf.flush()

    def read_bytes(self) -> bytes:
        buf = getattr(self.stdin, "buffer", None)
        return buf.read() if buf is not None else self.stdin.read().encode("utf-8")

    def password(self, var: str, what: str) -> bytes:
        value = self.env.get(var)
        if value:
            return value.encode("utf-8")
        if hasattr(self.stdin, "isatty") and self.stdin.isatty():
            value = getpass.getpass(f"{what}: ")
            if value:
                return value.encode("utf-8")
        raise ConfigError(f"{what} required (set {var})")


class Store:
    """One unlocked image: FDE, pool, volume table and mount registry."""

    def __init__(self, path: str, cfg: Config, io: Streams):
        self.path = path
        self.cfg = cfg
        self.io = io
        self.vol = PhysicalVolume.open(path)
        try:
            self.dev = fde_open(self.vol, io.password(PASSWORD_ENV, "device password"))
            self.pool = pool_open(self.dev)
        except BaseException:
            self.vol.close()
            raise
        self.manager = VolumeManager.for_device(self.pool, cfg.name_trim_b)
        self._registry = None

    @property
    def registry(self) -> MountRegistry:
        if self._registry is None:
            self._registry = MountRegistry(self.manager, secret_from_env(self.io.env),
                                           default_timeout=self.cfg.mount_timeout)
        return self._registry

    def ensure_outer(self):
        if not self.manager.has_outer():
            self.manager.create_outer(self.vol.capacity_bytes)
        return self.manager.outer()

    def close(self) -> None:
        try:
            self.dev.flush()
        finally:
            self.vol.close()


class Context:
    """Resolves which store a command runs against.

    One-shot invocations open and close a store per command; ``serve``
    pins a single store for the life of the session.
    """

    def __init__(self, cfg: Config, io: Streams):
        self.cfg = cfg
        self.io = io
        self.pinned: Store | None = None

    def image(self, args) -> str:
        path = getattr(args, "image", None) or (self.pinned.path if self.pinned else None) \
            or self.cfg.image_path
        if not path:
            raise UsageError("gyges: an image path is required")
        return path

    def store(self, args) -> Store:
        if self.pinned is not None:
            return self.pinned
        return Store(self.image(args), self.cfg, self.io)

    def release(self, store: Store) -> None:
        if store is not self.pinned:
            store.close()


# -- subcommands --------------------------------------------------------------


def cmd_init(ctx: Context, args) -> None:
    io = ctx.io
    path = ctx.image(args)
    cfg = ctx.cfg.merged(chunk_size=args.chunk_size, kdf_iterations=args.kdf_iterations)
    password = io.password(PASSWORD_ENV, "device password")
    vol = create_physical(path, args.size)
    try:
        dev = fde_init(vol, password, kdf_iterations=cfg.kdf_iterations)
        pool = pool_create(dev, cfg.chunk_size)
        dev.flush()
        s = pool.stats()
        io.out(f"initialised {path}: capacity={vol.capacity_bytes} chunk_size={pool.chunk_size} "
               f"total_chunks={s.total_chunks} eta={s.eta:.6f}")
    finally:
        vol.close()


def cmd_unlock(ctx, args) -> None:
    store = ctx.store(args)
    try:
        outer = store.ensure_outer()
        ctx.io.out(f"unlocked {store.path}: outer label={outer.labeled_capacity_bytes} "
                   f"used={outer.reported_used_bytes()}")
    finally:
        ctx.release(store)


def cmd_hv(ctx, args) -> None:
    store = ctx.store(args)
    try:
        password = ctx.io.password(args.hv_password_env, "hidden volume password")
        if args.hv_action == "create":
            store.manager.create_hidden(password, args.level, args.size)
            ctx.io.out(f"hidden volume created (level {args.level})")
        else:
            freed = store.manager.delete_hidden(password)
            ctx.io.out(f"hidden volume deleted ({freed} chunks zeroed)")
    finally:
        ctx.release(store)


def _mount(store: Store, args, io: Streams):
    registry = store.registry
    registry.check_token(args.token)
    password = io.password(args.hv_password_env, "hidden volume password")
    return registry.mount_hidden(password, args.token, args.timeout or store.cfg.mount_timeout)


def cmd_mount(ctx, args) -> None:
    store = ctx.store(args)
    try:
        handle = _mount(store, args, ctx.io)
        ctx.io.out(f"mounted handle={handle.id} timeout={args.timeout or store.cfg.mount_timeout:g}")
    finally:
        ctx.release(store)


def cmd_unmount(ctx, args) -> None:
    store = ctx.store(args)
    try:
        store.registry.unmount(args.handle)
        ctx.io.out("unmounted")
    finally:
        ctx.release(store)


def cmd_mounts(ctx, args) -> None:
    store = ctx.store(args)
    try:
        for m in store.registry.list_mounts():
            ctx.io.out(f"{m.handle} {m.volume_name} deadline={m.deadline:.3f}")
    finally:
        ctx.release(store)


def cmd_tick(ctx, args) -> None:
    store = ctx.store(args)
    try:
        gone = store.registry.auto_unmount_tick()
        ctx.io.out(f"unmounted {len(gone)}")
    finally:
        ctx.release(store)


def _volume_for_io(store: Store, args, io: Streams):
    """Returns ``(target, cleanup)``; hidden one-shots mount for the call only."""
    if args.volume == "outer":
        return store.manager.outer(), None
    if args.volume == "hidden":
        if not args.token:
            raise UsageError("gyges: --token is required for hidden volume IO")
        handle = _mount(store, args, io)
        return handle, lambda: store.registry.unmount(handle)
    if store._registry is None:
        raise StaleHandleError("stale handle")
    return store.registry.handle(args.volume), None


def cmd_write(ctx, args) -> None:
    io = ctx.io
    if args.data_hex is not None:
        data = bytes.fromhex(args.data_hex)
    elif args.input:
        with open(args.input, "rb") as fh:
            data = fh.read()
    else:
        data = io.read_bytes()
    store = ctx.store(args)
    try:
        target, cleanup = _volume_for_io(store, args, io)
        try:
            target.write(args.offset, data)
        finally:
            if cleanup:
                cleanup()
        store.dev.flush()
        io.out(f"wrote {len(data)} bytes at {args.offset}")
    finally:
        ctx.release(store)


def cmd_read(ctx, args) -> None:
    io = ctx.io
    store = ctx.store(args)
    try:
        target, cleanup = _volume_for_io(store, args, io)
        try:
            data = target.read(args.offset, args.length)
        finally:
            if cleanup:
                cleanup()
    finally:
        ctx.release(store)
    if args.output:
        with open(args.output, "wb") as fh:
            fh.write(data)
    elif args.hex or ctx.pinned is not None:
        io.out(data.hex())
    else:
        io.write_bytes(data)


def cmd_level0(ctx, args) -> None:
    store = ctx.store(args)
    try:
        m = store.manager
        if args.level0_action == "engage":
            fill = m.engage_level0()
            ctx.io.out(f"level0 engaged used_before={fill.used_before_attack_bytes}")
        elif args.level0_action == "disengage":
            m.disengage_level0()
            ctx.io.out("level0 disengaged")
        else:
            f = m.fill
            ctx.io.out(f"level0 engaged={int(f.level0_engaged)} "
                       f"used_before={f.used_before_attack_bytes} "
                       f"recorded={f.attack_bytes_recorded}")
    finally:
        ctx.release(store)


def cmd_attack(ctx, args) -> None:
    path = ctx.image(args)
    physical = read_header_capacity(path) if ctx.pinned is None else ctx.pinned.vol.capacity_bytes
    store = ctx.store(args)
    try:
        outer = store.manager.outer()
        if args.attack_kind == "capacity":
            report = adversary.capacity_report(physical, outer.labeled_capacity_bytes)
        else:
            report = adversary.attack_fill_to_full(outer, physical, batch_size=args.batch,
                                                   seed=args.seed)
            store.dev.flush()
        ctx.io.out(report.to_record())
    finally:
        ctx.release(store)


def cmd_bench(ctx, args) -> None:
    workloads = args.workload or list(bench.Workload)
    targets = args.target or list(bench.LAYERS)
    with tempfile.TemporaryDirectory(dir=args.dir) as d:
        results = bench.bench_matrix(d, workloads, targets, args.size, args.block_size,
                                     args.trials, args.seed)
    ctx.io.out(bench.format_csv(results).rstrip("\n") if args.csv else bench.format_table(results))


def cmd_stats(ctx, args) -> None:
    store = ctx.store(args)
    try:
        pool = store.pool
        s = pool.stats()
        lines = [
            f"physical_capacity={store.vol.capacity_bytes}",
            f"chunk_size={pool.chunk_size}",
            f"total_chunks={s.total_chunks}",
            f"data_bytes={pool.data_size_bytes}",
            f"metadata_bytes={pool.metadata_size_bytes}",
            f"eta={s.eta:.6f}",
        ]
        if store.manager.has_outer():
            outer = store.manager.outer()
            lines.append(f"outer_label={outer.labeled_capacity_bytes}")
            lines.append(f"outer_used={outer.reported_used_bytes()}")
        for line in lines:
            ctx.io.out(line)
    finally:
        ctx.release(store)


def cmd_token(ctx, args) -> None:
    token = issue_token(secret_from_env(ctx.io.env), args.app_id, args.ttl)
    ctx.io.out(token.encode())


def cmd_serve(ctx, args) -> None:
    io = ctx.io
    ctx.pinned = Store(ctx.image(args), ctx.cfg, io)
    driver = TickDriver(ctx.pinned.registry, args.tick_interval).start()
    try:
        for line in io.stdin:
            argv = shlex.split(line)
            if not argv:
                continue
            if argv[0] in ("quit", "exit"):
                break
            if argv[0] in ("serve", "init"):
                io.err(f"error: {argv[0]} is not available inside serve")
                io.out(f"status={USAGE_EXIT}")
                continue
            code = dispatch(argv, ctx)
            io.out(f"status={code}")
            io.stdout.flush()
    finally:
        driver.stop()
        store, ctx.pinned = ctx.pinned, None
        store.close()


# -- parser -------------------------------------------------------------------


def _size(text: str) -> int:
    try:
        return parse_size(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _positive(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gyges", description="Deniable thin-provisioned storage on an image file.")
    p.add_argument("--config", help="key=value settings file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def image(sp):
        sp.add_argument("image", nargs="?", help="image path (default: config image_path)")

    def hv_pw(sp):
        sp.add_argument("--hv-password-env", default=HV_PASSWORD_ENV,
                        help="environment variable holding the hidden volume password")

    sp = sub.add_parser("init", help="create an encrypted image with an empty pool")
    image(sp)
    sp.add_argument("--size", type=_size, required=True)
    sp.add_argument("--chunk-size", type=_size)
    sp.add_argument("--kdf-iterations", type=int)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("unlock", help="open the image and create the outer volume if absent")
    image(sp)
    sp.set_defaults(func=cmd_unlock)

    sp = sub.add_parser("hv", help="hidden volume management")
    hv = sp.add_subparsers(dest="hv_action", required=True, parser_class=_Parser)
    c = hv.add_parser("create")
    image(c)
    c.add_argument("--level", type=int, default=1)
    c.add_argument("--size", type=_size, help="labelled capacity (default: pool data size)")
    hv_pw(c)
    d = hv.add_parser("delete")
    image(d)
    hv_pw(d)
    sp.set_defaults(func=cmd_hv)

    sp = sub.add_parser("mount", help="mount a hidden volume")
    image(sp)
    sp.add_argument("--token", required=True)
    sp.add_argument("--timeout", type=_positive)
    hv_pw(sp)
    sp.set_defaults(func=cmd_mount)

    sp = sub.add_parser("unmount")
    image(sp)
    sp.add_argument("--handle", required=True)
    sp.set_defaults(func=cmd_unmount)

    sp = sub.add_parser("mounts", help="list mounted sessions")
    image(sp)
    sp.set_defaults(func=cmd_mounts)

    sp = sub.add_parser("tick", help="run one auto-unmount pass now")
    image(sp)
    sp.set_defaults(func=cmd_tick)

    for name, func in (("write", cmd_write), ("read", cmd_read)):
        sp = sub.add_parser(name)
        image(sp)
        sp.add_argument("--volume", required=True, help="outer, hidden, or a session handle")
        sp.add_argument("--offset", type=_size, default=0)
        sp.add_argument("--token", help="required for --volume hidden")
        sp.add_argument("--timeout", type=_positive)
        hv_pw(sp)
        if name == "write":
            sp.add_argument("--input", help="file to write (default: stdin)")
            sp.add_argument("--data-hex")
        else:
            sp.add_argument("--length", type=_size, required=True)
            sp.add_argument("--output")
            sp.add_argument("--hex", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("level0", help="null-sink defence against fill attacks")
    sp.add_argument("level0_action", choices=("engage", "disengage", "status"))
    image(sp)
    sp.set_defaults(func=cmd_level0)

    sp = sub.add_parser("attack", help="run an attack against the outer volume")
    sp.add_argument("attack_kind", choices=("capacity", "fill"))
    image(sp)
    sp.add_argument("--batch", type=_size, default=adversary.DEFAULT_BATCH)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("bench", help="throughput of each layer on scratch images")
    sp.add_argument("--workload", action="append", choices=[w.value for w in bench.Workload])
    sp.add_argument("--target", action="append", choices=[t.value for t in bench.Target])
    sp.add_argument("--size", type=_size, default=bench.DEFAULT_TOTAL)
    sp.add_argument("--block-size", type=_size, default=bench.DEFAULT_BLOCK)
    sp.add_argument("--trials", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", action="store_true")
    sp.add_argument("--dir", help="directory for scratch images")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("stats")
    image(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("token", help="bearer tokens for mount requests")
    tk = sp.add_subparsers(dest="token_action", required=True, parser_class=_Parser)
    t = tk.add_parser("issue")
    t.add_argument("--app-id", required=True)
    t.add_argument("--ttl", type=_positive, default=3600.0)
    sp.set_defaults(func=cmd_token)

    sp = sub.add_parser("serve", help="read commands from stdin against one open image")
    image(sp)
    sp.add_argument("--tick-interval", type=_positive, default=1.0)
    sp.set_defaults(func=cmd_serve)
    return p


def dispatch(argv, ctx: Context) -> int:
    io = ctx.io
    try:
        args = build_parser().parse_args(argv)
        if ctx.pinned is None and args.config:
            ctx.cfg = load_config(args.config)
        args.func(ctx, args)
        return 0
    except UsageError as e:
        io.err(str(e))
        return USAGE_EXIT
    except _HelpExit as e:
        return e.status
    except GygesError as e:
        io.err(f"error: {e}")
        return e.exit_code
    except ValueError as e:
        io.err(f"error: {e}")
        return ConfigError.exit_code
    except OSError as e:
        io.err(f"error: {e.strerror or e}")
        return GygesError.exit_code


def main(argv=None, *, stdin=None, stdout=None, stderr=None, env=None) -> int:
    io = Streams(stdin, stdout, stderr, env)
    ctx = Context(Config(), io)
    return dispatch(sys.argv[1:] if argv is None else list(argv), ctx)


if __name__ == "__main__":
    sys.exit(main())
