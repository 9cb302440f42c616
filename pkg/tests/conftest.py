import os
import tempfile
from collections import namedtuple

import pytest

from gyges.block_store import create_physical
from gyges.crypto import fde_init
from gyges.thin_pool import pool_create
from gyges.volumes import VolumeManager

MiB = 1 << 20
# Low PBKDF2 cost keeps tests fast; production default is exercised separately.
FAST_KDF = 1000

Stack = namedtuple("Stack", "path vol dev pool manager")


def build_stack(directory, capacity=64 * MiB, password=b"device-pw", chunk_size=64 * 1024,
                name="img"):
    path = os.path.join(directory, name)
    vol = create_physical(path, capacity)
    dev = fde_init(vol, password, kdf_iterations=FAST_KDF)
    pool = pool_create(dev, chunk_size)
    return Stack(path, vol, dev, pool, VolumeManager.for_device(pool))


@pytest.fixture
def make_stack(tmp_path):
    opened = []

    def factory(**kw):
        kw.setdefault("name", f"img{len(opened)}")
        s = build_stack(str(tmp_path), **kw)
        opened.append(s)
        return s

    yield factory
    for s in opened:
        s.vol.close()


@pytest.fixture
def scratch_dir():
    with tempfile.TemporaryDirectory() as d:
        yield d


# -- acceptance line reporting ------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


class CriterionRecorder:
    def __init__(self, number, title):
        self.number = number
        self.title = title

    def __enter__(self):
        _CRITERIA[self.number] = ("FAIL", self.title)
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        _CRITERIA[self.number] = (status, self.title)
        print(f"criterion {self.number:>2}: {status}  {self.title}")
        return False


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")
