import hashlib
import os

import pytest
from hypothesis import given, settings, strategies as st

from gyges.block_store import NULL_SINK, PhysicalVolume, MappingType, resolve_mapping
from gyges.crypto import fde_open
from gyges.errors import (
    NameCollisionError,
    NoOuterVolumeError,
    OuterExistsError,
    OutOfLabelRangeError,
    PoolExhaustedError,
    StorageFullError,
    UnknownVolumeError,
)
from gyges.thin_pool import pool_open
from gyges.volumes import (
    POOL_DEVICE,
    VolumeKind,
    VolumeManager,
    derive_volume_name,
)

MiB = 1 << 20
C = 64 * 1024


def test_name_matches_sha256_oracle():
    # Frozen from `printf alpha | cat - <16 zero bytes> | sha256sum`.
    assert derive_volume_name("alpha", bytes(16)) == "6487ee764ff5d508"
    full = "6487ee764ff5d508c0dc122cd2c54f907984b555a0168d7d823d2a9fa6420d68"
    assert derive_volume_name(b"alpha", bytes(16), 64) == full


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=40), st.binary(min_size=16, max_size=16),
       st.integers(8, 64))
def test_name_is_truncated_hash(pw, salt, b):
    name = derive_volume_name(pw, salt, b)
    assert name == hashlib.sha256(pw + salt).hexdigest()[:b]
    assert derive_volume_name(pw, salt, b) == name


def test_name_trim_bounds():
    with pytest.raises(ValueError):
        derive_volume_name("x", b"", 7)
    with pytest.raises(ValueError):
        derive_volume_name("", b"salt")


def test_outer_label_is_physical_capacity(make_stack):
    s = make_stack()
    outer = s.manager.create_outer(s.vol.capacity_bytes)
    assert outer.labeled_capacity_bytes == 64 * MiB
    assert outer.labeled_capacity_bytes > s.pool.data_size_bytes
    with pytest.raises(OuterExistsError):
        s.manager.create_outer(s.vol.capacity_bytes)


def test_no_outer(make_stack):
    with pytest.raises(NoOuterVolumeError):
        make_stack(capacity=4 * MiB).manager.outer()


def test_unaligned_round_trips(make_stack):
    s = make_stack(capacity=8 * MiB)
    outer = s.manager.create_outer(s.vol.capacity_bytes)
    hidden = s.manager.create_hidden("pw", 1, 4 * MiB)
    for vol in (outer, hidden):
        vol.write(100, b"hello")
        data = os.urandom(3 * C + 77)
        vol.write(C - 13, data)
        assert vol.read(100, 5) == b"hello"
        assert vol.read(C - 13, len(data)) == data
        assert vol.read(5 * C, 1000) == bytes(1000)
        vol.write(101, b"E")
        assert vol.read(99, 8) == b"\0hEllo\0\0"


def test_label_range(make_stack):
    s = make_stack(capacity=4 * MiB)
    hidden = s.manager.create_hidden("pw", 1, MiB)
    with pytest.raises(OutOfLabelRangeError):
        hidden.write(MiB - 2, b"abc")
    with pytest.raises(OutOfLabelRangeError):
        hidden.read(MiB, 1)


def test_hidden_payload_doubly_encrypted(make_stack):
    s = make_stack(capacity=4 * MiB)
    hidden = s.manager.create_hidden("pw", 1)
    payload = b"secret!!" * 64
    hidden.write(0, payload)
    t = hidden.chunk_mapping(0)
    assert t.mapping_type is MappingType.THIN and t.target_device == POOL_DEVICE
    # Below the volume layer only FDE has been peeled off; the volume key remains.
    below = s.dev.read_sectors(t.physical_offset, 1)
    assert below != payload


def test_mapping_table_merges_adjacent(make_stack):
    s = make_stack(capacity=4 * MiB)
    outer = s.manager.create_outer(s.vol.capacity_bytes)
    outer.write(0, bytes(3 * C))
    outer.write(10 * C, b"x")
    table = outer.mapping_table()
    assert [(t.logical_offset, t.length) for t in table] == [(0, 3 * 128), (10 * 128, 128)]
    dev, sector = resolve_mapping(table, 129)
    assert dev == POOL_DEVICE and sector == table[0].physical_offset + 129


def test_hidden_found_only_by_password_after_reopen(make_stack):
    s = make_stack(capacity=8 * MiB)
    s.manager.create_outer(s.vol.capacity_bytes).write(0, b"decoy")
    h = s.manager.create_hidden("right", 2, 2 * MiB)
    h.write(12345, b"payload")
    s.vol.close()
    with PhysicalVolume.open(s.path) as vol:
        m = VolumeManager.for_device(pool_open(fde_open(vol, b"device-pw")))
        assert m.find_hidden("wrong") is None
        with pytest.raises(UnknownVolumeError):
            m.open_hidden("wrong")
        again = m.open_hidden("right")
        assert again.kind is VolumeKind.HIDDEN
        assert again.read(12345, 7) == b"payload"
        assert m.outer().read(0, 5) == b"decoy"


def test_name_collision(make_stack):
    s = make_stack(capacity=4 * MiB)
    s.manager.create_hidden("pw")
    with pytest.raises(NameCollisionError):
        s.manager.create_hidden("pw")


def test_delete_hidden_frees_chunks(make_stack):
    s = make_stack(capacity=4 * MiB)
    h = s.manager.create_hidden("pw")
    h.write(0, os.urandom(2 * C))
    before = s.pool.stats().free_chunks
    assert s.manager.delete_hidden("pw") == 2
    assert s.pool.stats().free_chunks == before + 2
    assert s.manager.find_hidden("pw") is None


def test_pool_exhaustion_without_level0(make_stack):
    s = make_stack(capacity=2 * MiB)
    outer = s.manager.create_outer(s.vol.capacity_bytes)
    room = s.pool.total_chunks * C
    with pytest.raises(PoolExhaustedError) as e:
        outer.write(0, bytes(room + 100))
    assert e.value.written == room
    assert outer.read(room - 4, 4) == bytes(4)


def test_level0_counts_and_sinks(make_stack):
    s = make_stack(capacity=2 * MiB)
    outer = s.manager.create_outer(s.vol.capacity_bytes)
    outer.write(0, b"a" * (C + 1))
    fill = s.manager.engage_level0()
    assert fill.used_before_attack_bytes == 2 * C
    assert outer.reported_used_bytes() == 2 * C
    label = outer.labeled_capacity_bytes
    remaining = label - 2 * C
    outer.write(2 * C, os.urandom(remaining - 10))
    with pytest.raises(StorageFullError) as e:
        outer.write(label - 10, bytes(11))
    assert e.value.written == 10
    assert s.manager.fill.total == label
    with pytest.raises(StorageFullError) as e:
        outer.write(0, b"x")
    assert e.value.written == 0
    # Sunk chunks map to the null target and read back as zeros.
    sunk = [t for t in outer.mapping_table() if t.mapping_type is MappingType.NULL]
    assert sunk and resolve_mapping(sunk, sunk[0].logical_offset) is NULL_SINK
    assert outer.read(label - C, C) == bytes(C)
    assert outer.read(0, 4) == b"aaaa"


def test_level0_persists_and_disengages(make_stack):
    s = make_stack(capacity=4 * MiB)
    outer = s.manager.create_outer(s.vol.capacity_bytes)
    outer.write(0, bytes(C))
    s.manager.engage_level0()
    outer.write(C, bytes(1000))
    s.vol.close()
    with PhysicalVolume.open(s.path) as vol:
        m = VolumeManager.for_device(pool_open(fde_open(vol, b"device-pw")))
        assert m.fill.level0_engaged
        assert (m.fill.used_before_attack_bytes, m.fill.attack_bytes_recorded) == (C, 1000)
        m.disengage_level0()
        assert not m.fill.level0_engaged
        assert m.outer().reported_used_bytes() == 2 * C


def test_null_sink_volume(make_stack):
    s = make_stack(capacity=4 * MiB)
    sink = s.manager.null_sink()
    assert sink.write(0, b"gone") == 4
    assert sink.read(0, 4) == bytes(4)
    assert sink.mapping_table()[0].mapping_type is MappingType.NULL


# -- shadow model ---------------------------------------------------------------

_ops = st.lists(
    st.tuples(st.sampled_from(["outer", "h1", "h2"]), st.integers(0, 2 * MiB - 1),
              st.integers(1, 3 * C), st.integers(0, 255)),
    min_size=1, max_size=40)


@settings(max_examples=15, deadline=None)
@given(_ops)
def test_volumes_match_shadow(tmp_path_factory, ops):
    from conftest import build_stack
    s = build_stack(str(tmp_path_factory.mktemp("vol")), capacity=8 * MiB)
    try:
        vols = {"outer": s.manager.create_outer(s.vol.capacity_bytes),
                "h1": s.manager.create_hidden("one", 1, 2 * MiB + 3 * C),
                "h2": s.manager.create_hidden("two", 2, 2 * MiB + 3 * C)}
        shadow = {k: bytearray(2 * MiB + 3 * C) for k in vols}
        for name, off, n, fill in ops:
            data = bytes([fill]) * n
            vols[name].write(off, data)
            shadow[name][off:off + n] = data
        for name, vol in vols.items():
            assert vol.read(0, len(shadow[name])) == bytes(shadow[name])
    finally:
        s.vol.close()
