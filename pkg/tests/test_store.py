"""Record store: layout, roll-around, durability and recovery tests."""
from __future__ import annotations

import os
import random
import struct

import pytest

from ltss import datasets
from ltss.schema import SchemaError, StampedRecord, parse_schema
from ltss.store import (
    BLOCK,
    CorruptStore,
    ReadOutOfWindow,
    StoreError,
    StoreSegment,
)

SEISMIC = datasets.builtin_schema("seismic")
T0 = 1_425_168_000_000_000  # 2015-03-01T00:00:00Z


def make_slots(n, start_us=T0, gap=1_000, schema=SEISMIC):
    out = []
    for i in range(n):
        t = start_us + i * gap
        wire = schema.encode((t, float(i), 0.0, 0.0, 0.0, 1.0))
        out.append(schema.decode_datagram(wire))
    return out


def make_store(tmp_path, capacity=100, name="s.db", **kw):
    return StoreSegment.create(str(tmp_path / name), SEISMIC, capacity, **kw)


def test_create_layout_arithmetic(tmp_path):
    st = make_store(tmp_path, capacity=10, rolling_count=3)
    # header + 3 metadata copies + log region rounded up to 4096
    assert st.log_offset == BLOCK * 4
    assert st.log_length == BLOCK  # 10 * 28 = 280 -> one block
    assert os.path.getsize(st.path) == BLOCK * 5
    st.close()


def test_create_rejects_bad_args(tmp_path):
    with pytest.raises(StoreError):
        StoreSegment.create(str(tmp_path / "x.db"), SEISMIC, 0)
    with pytest.raises(OSError):
        StoreSegment.create(str(tmp_path / "nodir" / "x.db"), SEISMIC, 10)


def test_default_rolling_count_is_three(tmp_path):
    st = make_store(tmp_path)
    assert st.rolling_count == 3
    st.close()


def test_append_and_read_back(tmp_path):
    st = make_store(tmp_path, capacity=2_000)
    slots = make_slots(1_000)
    first = st.append_batch(slots)
    assert first == 0
    assert st.total == 1_000
    for i in (0, 1, 499, 999):
        assert st.read_at(i) == slots[i].data
    assert st.min_time == slots[0].epoch
    assert st.max_time == slots[-1].epoch
    st.close()


def test_append_empty_batch_is_noop(tmp_path):
    st = make_store(tmp_path)
    gen = st.generation
    assert st.append_batch([]) == 0
    assert st.generation == gen
    st.close()


def test_append_rejects_unsorted_or_backwards(tmp_path):
    st = make_store(tmp_path)
    a, b = make_slots(2)
    with pytest.raises(StoreError):
        st.append_batch([b, a])
    st.append_batch([a, b])
    with pytest.raises(StoreError):
        st.append_batch([a])  # older than the stored max
    st.close()


def test_roll_around_keeps_newest(tmp_path):
    st = make_store(tmp_path, capacity=10)
    slots = make_slots(15, gap=1_000_000)
    st.append_batch(slots[:8])
    st.append_batch(slots[8:])
    assert st.wrapped
    assert st.head == 5
    assert st.live_window() == (5, 15)
    live = [st.read_at(i) for i in range(5, 15)]
    assert live == [s.data for s in slots[5:]]
    with pytest.raises(ReadOutOfWindow):
        st.read_at(4)  # overwritten
    with pytest.raises(ReadOutOfWindow):
        st.read_at(15)  # not yet written
    assert st.min_time == slots[5].epoch
    assert st.max_time == slots[14].epoch
    st.close()


def test_single_batch_larger_than_capacity(tmp_path):
    st = make_store(tmp_path, capacity=10)
    slots = make_slots(25)
    st.append_batch(slots)
    assert st.live_window() == (15, 25)
    assert [st.read_at(i) for i in range(15, 25)] == [s.data for s in slots[15:]]
    st.close()


def test_read_fresh_store_out_of_range(tmp_path):
    st = make_store(tmp_path)
    with pytest.raises(ReadOutOfWindow):
        st.read_at(0)
    st.close()


def test_iter_live_order_across_wrap(tmp_path):
    st = make_store(tmp_path, capacity=16)
    slots = make_slots(40)
    for k in range(0, 40, 7):
        st.append_batch(slots[k : k + 7])
    epochs = [SEISMIC.read_field(d, "time") for _, d in st.iter_live()]
    assert epochs == sorted(epochs)
    assert len(epochs) == 16
    st.close()


def test_recover_round_trip(tmp_path):
    st = make_store(tmp_path, capacity=50)
    slots = make_slots(120)
    for k in range(0, 120, 30):
        st.append_batch(slots[k : k + 30])
    want = (st.total, st.generation, st.min_time, st.max_time, st.head, st.wrapped)
    path = st.path
    st.close()

    rec = StoreSegment.recover(path)
    got = (rec.total, rec.generation, rec.min_time, rec.max_time, rec.head, rec.wrapped)
    assert got == want
    assert rec.schema is not None and rec.schema.record_size == 28
    # immediately appendable
    more = make_slots(5, start_us=T0 + 10_000_000_000)
    rec.append_batch(more)
    assert rec.read_at(rec.total - 1) == more[-1].data
    rec.close()


def test_recovered_min_max_match_scan(tmp_path):
    rng = random.Random(31)
    st = make_store(tmp_path, capacity=64)
    t = T0
    for _ in range(12):
        n = rng.randrange(1, 30)
        slots = make_slots(n, start_us=t)
        st.append_batch(slots)
        t += n * 1_000 + rng.randrange(1, 5_000)
    path = st.path
    st.close()
    rec = StoreSegment.recover(path)
    times = [SEISMIC.read_field(d, "time") for _, d in rec.iter_live()]
    assert rec.min_time == min(times)
    assert rec.max_time == max(times)
    rec.close()


def corrupt_block(path: str, block_index: int) -> None:
    with open(path, "r+b") as fh:
        fh.seek(BLOCK * block_index + 100)
        fh.write(b"\xde\xad\xbe\xef")


def test_recovery_falls_back_a_generation(tmp_path):
    st = make_store(tmp_path, capacity=100, rolling_count=3)
    batches = [make_slots(10, start_us=T0 + k * 1_000_000_000) for k in range(4)]
    for b in batches[:3]:
        st.append_batch(b)
    gen_before = st.generation
    st.append_batch(batches[3])
    newest_copy = st.generation % st.rolling_count
    path = st.path
    st.close()

    corrupt_block(path, 1 + newest_copy)
    rec = StoreSegment.recover(path)
    assert rec.generation == gen_before
    # at most the final batch is invisible
    assert rec.total == 30
    assert rec.max_time == batches[2][-1].epoch
    rec.close()


def test_recovery_fails_when_all_copies_corrupt(tmp_path):
    st = make_store(tmp_path, capacity=10, rolling_count=3)
    st.append_batch(make_slots(3))
    path = st.path
    st.close()
    for c in range(3):
        corrupt_block(path, 1 + c)
    with pytest.raises(CorruptStore):
        StoreSegment.recover(path)


def test_recover_schema_hash_mismatch(tmp_path):
    st = make_store(tmp_path)
    path = st.path
    st.close()
    other = parse_schema("schema other\nfield t time\nprimary_time t\n")
    with pytest.raises(SchemaError):
        StoreSegment.recover(path, schema=other)


def test_durability_batch_visible_after_recover(tmp_path):
    st = make_store(tmp_path, capacity=100)
    st.append_batch(make_slots(7))
    path = st.path
    # no close(): simulate losing the in-memory state
    rec = StoreSegment.recover(path)
    assert rec.total == 7
    rec.close()
    st.close()


def test_capacity_law_random_batches(tmp_path):
    rng = random.Random(9)
    st = make_store(tmp_path, capacity=37)
    appended = 0
    t = T0
    for _ in range(20):
        n = rng.randrange(0, 25)
        st.append_batch(make_slots(n, start_us=t))
        t += n * 1_000 + 1
        appended += n
        assert st.live_count == min(appended, 37)
        lo, hi = st.live_window()
        assert hi - lo == st.live_count
    st.close()


def test_commit_history_tracking(tmp_path):
    st = make_store(tmp_path)
    st.track_commits()
    st.append_batch(make_slots(4))
    st.append_batch(make_slots(2, start_us=T0 + 10_000_000))
    assert len(st.commit_history) == 2
    wall, first, count, mn, mx = st.commit_history[0]
    assert (first, count) == (0, 4)
    assert mn <= mx


def test_on_commit_hook_counts(tmp_path):
    st = make_store(tmp_path)
    seen = []
    st.on_commit.append(seen.append)
    st.append_batch(make_slots(3))
    st.append_batch(make_slots(1, start_us=T0 + 1_000_000_000))
    assert seen == [3, 4]
    st.close()
