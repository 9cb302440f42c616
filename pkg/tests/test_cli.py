import io
import os
import subprocess
import sys

import pytest

from gyges.cli import main

ENV = {"GYGES_PASSWORD": "device", "GYGES_HV_PASSWORD": "hidden", "GYGES_SECRET": "s3"}


def run(*argv, env=None, stdin=""):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdin=io.StringIO(stdin), stdout=out, stderr=err,
                env=dict(ENV if env is None else env))
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def image(tmp_path):
    path = str(tmp_path / "img")
    code, out, _ = run("init", path, "--size", "64MiB", "--kdf-iterations", "1000")
    assert code == 0, out
    return path


def _token():
    code, out, _ = run("token", "issue", "--app-id", "calc", "--ttl", "600")
    assert code == 0
    return out.strip()


def test_init_then_stats(image):
    code, out, _ = run("stats", image)
    assert code == 0
    fields = dict(line.split("=") for line in out.split())
    assert fields["total_chunks"] == "1022"
    assert fields["eta"] == "0.999024"
    assert "free_chunks" not in fields and "owned_chunks" not in fields


def test_unlock_creates_outer_and_capacity_attack(image):
    assert run("attack", "capacity", image)[0] != 0
    code, out, _ = run("unlock", image)
    assert code == 0 and "outer label=67108864" in out
    code, out, _ = run("attack", "capacity", image)
    assert code == 0 and "verdict=0" in out


def test_outer_write_read(image):
    run("unlock", image)
    assert run("write", image, "--volume", "outer", "--offset", "4096", stdin="abc")[0] == 0
    code, out, _ = run("read", image, "--volume", "outer", "--offset", "4096", "--length", "3")
    assert code == 0 and out.strip() == b"abc".hex()


def test_hidden_flow(image):
    run("unlock", image)
    assert run("hv", "create", image, "--level", "1", "--size", "8MiB")[0] == 0
    tok = _token()
    code, out, _ = run("mount", image, "--token", tok, "--timeout", "30")
    assert code == 0 and out.startswith("mounted handle=")
    assert run("write", image, "--volume", "hidden", "--token", tok, "--data-hex", "beef")[0] == 0
    code, out, _ = run("read", image, "--volume", "hidden", "--token", tok, "--length", "2")
    assert out.strip() == "beef"


def test_wrong_password_and_missing_volume_identical(tmp_path, image):
    run("unlock", image)
    run("hv", "create", image)
    tok = _token()
    wrong = run("mount", image, "--token", tok, env={**ENV, "GYGES_HV_PASSWORD": "other"})
    empty = str(tmp_path / "empty")
    run("init", empty, "--size", "64MiB", "--kdf-iterations", "1000")
    run("unlock", empty)
    missing = run("mount", empty, "--token", tok)
    assert wrong == missing
    assert wrong[0] == 13 and wrong[2] == "error: volume not found\n"


def test_bad_token(image):
    run("unlock", image)
    run("hv", "create", image)
    good = run("mount", image, "--token", "BAD")
    bad = run("mount", image, "--token", "BAD", env={**ENV, "GYGES_HV_PASSWORD": "x"})
    assert good == bad == (12, "", "error: invalid token\n")


def test_wrong_device_password(image):
    code, _, err = run("stats", image, env={**ENV, "GYGES_PASSWORD": "nope"})
    assert code == 11 and err == "error: wrong password\n"


def test_missing_password_is_diagnosed(image):
    code, _, err = run("stats", image, env={})
    assert code == 19 and "GYGES_PASSWORD" in err


def test_usage_errors():
    assert run()[0] == 2
    assert run("frobnicate")[0] == 2
    assert run("init", "x", "--size", "lots")[0] == 2
    assert run("mount", "x")[0] == 2


def test_exit_codes_are_distinct_families(tmp_path, image):
    assert run("init", image, "--size", "64MiB")[0] == 16
    assert run("init", str(tmp_path / "tiny"), "--size", "1000")[0] == 15
    assert run("stats", str(tmp_path / "nowhere"))[0] == 10
    run("unlock", image)
    assert run("read", image, "--volume", "cafebabe", "--length", "1")[0] == 17


def test_level0_and_fill(tmp_path):
    path = str(tmp_path / "small")
    run("init", path, "--size", "4MiB", "--kdf-iterations", "1000")
    run("unlock", path)
    run("write", path, "--volume", "outer", "--data-hex", "00" * 5000)
    code, out, _ = run("level0", "engage", path)
    assert code == 0 and "used_before=65536" in out
    code, out, _ = run("attack", "fill", path, "--batch", "1MiB")
    assert code == 0
    fields = dict(kv.split("=") for kv in out.split())
    assert int(fields["audited_bytes"]) + int(fields["used_before"]) == 4 << 20
    assert fields["verdict"] == "0"


def test_config_file_supplies_image(tmp_path, image):
    cfg = tmp_path / "g.conf"
    cfg.write_text(f"image_path={image}\nmount_timeout=7\n")
    code, out, _ = run("--config", str(cfg), "stats")
    assert code == 0 and "total_chunks=1022" in out


def test_serve_session(image):
    run("unlock", image)
    run("hv", "create", image)
    tok = _token()
    script = f"mount --token {tok} --timeout 60\nmounts\nquit\n"
    code, out, _ = run("serve", image, stdin=script)
    assert code == 0
    lines = out.splitlines()
    handle = lines[0].split("handle=")[1].split()[0]
    assert lines[1] == "status=0"
    assert lines[2].startswith(handle)


def test_module_entry_point(image):
    env = {**os.environ, **ENV}
    p = subprocess.run([sys.executable, "-m", "gyges", "stats", image], env=env,
                       capture_output=True, text=True)
    assert p.returncode == 0 and "total_chunks=1022" in p.stdout
