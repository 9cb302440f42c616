import pytest

from gyges import bench
from gyges.bench import (
    BenchResult,
    Target,
    Workload,
    format_csv,
    format_table,
    monotone_violations,
    open_target,
    run_bench,
)
from gyges.errors import TargetTooSmallError

MiB = 1 << 20


@pytest.mark.parametrize("kind", list(Target))
def test_every_target_round_trips(scratch_dir, kind):
    t = open_target(kind, scratch_dir, 2 * MiB)
    try:
        r = run_bench(t, Workload.SEQ_WRITE, 2 * MiB, 256 * 1024, trials=2)
        assert r.target is kind and r.trials == 2 and r.throughput > 0
        r = run_bench(t, Workload.RND_READ, 2 * MiB, 256 * 1024, trials=1)
        assert r.workload is Workload.RND_READ
    finally:
        t.close()


def test_zero_trials_rejected(scratch_dir):
    t = open_target(Target.RAW, scratch_dir, MiB)
    try:
        with pytest.raises(ValueError):
            run_bench(t, Workload.SEQ_WRITE, MiB, 64 * 1024, trials=0)
    finally:
        t.close()
    with pytest.raises(ValueError):
        BenchResult(Workload.SEQ_WRITE, Target.RAW, 1.0, 0)


def test_target_too_small(scratch_dir):
    t = open_target(Target.OUTER, scratch_dir, MiB)
    try:
        with pytest.raises(TargetTooSmallError):
            run_bench(t, Workload.SEQ_WRITE, 64 * MiB, MiB, trials=1)
    finally:
        t.close()


def test_readback_catches_corruption(scratch_dir, monkeypatch):
    t = open_target(Target.RAW, scratch_dir, MiB)
    try:
        real = t.read
        monkeypatch.setattr(t, "read", lambda off, n: bytes(n) if n else real(off, n))
        with pytest.raises(bench.BenchVerifyError):
            run_bench(t, Workload.SEQ_WRITE, MiB, 64 * 1024, trials=1)
    finally:
        t.close()


def test_ratio_table_and_csv():
    results = [
        BenchResult(Workload.SEQ_WRITE, Target.RAW, 100 * MiB, 3, 1.0),
        BenchResult(Workload.SEQ_WRITE, Target.OUTER, 50 * MiB, 3, 1.0),
        BenchResult(Workload.SEQ_WRITE, Target.HIDDEN, 40 * MiB, 3, 1.0),
    ]
    table = format_table(results)
    assert "ratio-vs-raw" in table and "0.500" in table
    assert "hidden/outer seq_write = 0.800" in table and "0.97" in table
    csv = format_csv(results).splitlines()
    assert csv[0] == "workload,target,MB/s,ratio-vs-raw"
    assert csv[2] == "seq_write,outer,50.000,0.5000"


def test_monotone_violation_detection():
    ok = [BenchResult(Workload.SEQ_WRITE, Target.RAW, 100.0, 3, 1.0),
          BenchResult(Workload.SEQ_WRITE, Target.FDE_ONLY, 101.0, 3, 1.0)]
    assert monotone_violations(ok) == []
    bad = [BenchResult(Workload.SEQ_WRITE, Target.RAW, 100.0, 3, 1.0),
           BenchResult(Workload.SEQ_WRITE, Target.FDE_ONLY, 200.0, 3, 1.0)]
    assert monotone_violations(bad) == [("seq_write", "raw", "fde_only")]


def test_matrix_small(scratch_dir):
    results = bench.bench_matrix(scratch_dir, [Workload.SEQ_WRITE], total_bytes=MiB,
                                 block_size=128 * 1024, trials=1)
    assert [r.target for r in results] == list(bench.LAYERS)
