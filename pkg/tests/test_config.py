import pytest

from gyges.config import Config, load_config, parse_config, parse_size
from gyges.errors import ConfigError


@pytest.mark.parametrize("text,value", [
    ("512", 512), ("64KiB", 65536), ("64k", 65536), ("64MiB", 64 << 20), ("1 GiB", 1 << 30),
    ("2MB", 2_000_000),
])
def test_parse_size(text, value):
    assert parse_size(text) == value


@pytest.mark.parametrize("bad", ["", "MiB", "-1", "3.5MiB", "7 furlongs"])
def test_parse_size_rejects(bad):
    with pytest.raises(ValueError):
        parse_size(bad)


def test_defaults():
    c = Config()
    assert (c.chunk_size, c.name_trim_b, c.mount_timeout, c.kdf_iterations) == (
        65536, 16, 300.0, 10000)


def test_file_then_flags(tmp_path):
    p = tmp_path / "gyges.conf"
    p.write_text("# comment\nimage_path = /tmp/x.img\nchunk_size=16KiB\nmount_timeout=5\n")
    c = load_config(str(p))
    assert (c.image_path, c.chunk_size, c.mount_timeout, c.kdf_iterations) == (
        "/tmp/x.img", 16384, 5.0, 10000)
    c2 = c.merged(chunk_size=4096, mount_timeout=None)
    assert (c2.chunk_size, c2.mount_timeout) == (4096, 5.0)


@pytest.mark.parametrize("text", ["nonsense", "colour=blue", "name_trim_b=abc"])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent"))
