"""Directory index tests: run lists, interval tree, narrow vs. scan oracle."""
from __future__ import annotations

import random

import pytest

from ltss import ctime, datasets
from ltss.index import (
    GRANULARITIES,
    DirectoryIndex,
    IndexError_,
    IntervalTree,
    seek_time_range,
)
from ltss.schema import StampedRecord
from ltss.store import StoreSegment

SEISMIC = datasets.builtin_schema("seismic")


def slots_at(epochs):
    out = []
    for t in epochs:
        wire = SEISMIC.encode((t, 0.0, 0.0, 0.0, 0.0, 1.0))
        out.append(SEISMIC.decode_datagram(wire))
    return out


def build_store(tmp_path, epochs, capacity=None, name="idx.db", batch=512):
    st = StoreSegment.create(
        str(tmp_path / name), SEISMIC, capacity or max(len(epochs), 1)
    )
    idx = DirectoryIndex(st)
    st.index = idx
    all_slots = slots_at(epochs)
    for k in range(0, len(all_slots), batch):
        st.append_batch(all_slots[k : k + batch])
    return st, idx


def ep(iso: str) -> int:
    return ctime.to_epoch(ctime.from_iso8601(iso))


# -- interval tree -------------------------------------------------------


def test_interval_tree_matches_naive():
    rng = random.Random(4)
    starts, ends = [], []
    cursor = 0
    for _ in range(500):  # disjoint sorted runs, like index entries
        cursor += rng.randrange(1, 50)
        length = rng.randrange(1, 80)
        starts.append(cursor)
        ends.append(cursor + length)
        cursor += length
    tree = IntervalTree(starts, ends)
    for _ in range(300):
        lo = rng.randrange(0, cursor + 100)
        hi = lo + rng.randrange(0, 300)
        want = [i for i in range(500) if starts[i] < hi and ends[i] > lo]
        assert tree.overlapping(lo, hi) == want


def test_interval_tree_arbitrary_overlaps():
    rng = random.Random(12)
    starts = [rng.randrange(0, 1000) for _ in range(200)]
    ends = [s + rng.randrange(1, 200) for s in starts]
    order = sorted(range(200), key=lambda i: starts[i])
    starts = [starts[i] for i in order]
    ends = [ends[i] for i in order]
    tree = IntervalTree(starts, ends)
    for _ in range(200):
        lo = rng.randrange(0, 1200)
        hi = lo + rng.randrange(1, 400)
        want = [i for i in range(200) if starts[i] < hi and ends[i] > lo]
        assert tree.overlapping(lo, hi) == want


def test_interval_tree_empty():
    assert IntervalTree([], []).overlapping(0, 100) == []


# -- run list append rule --------------------------------------------------


def test_entry_per_value_change(tmp_path):
    st, idx = build_store(
        tmp_path, [ep("2015-01-01T00:00:00Z"), ep("2016-01-01T00:00:00Z")]
    )
    counts = idx.entry_counts()
    assert counts["year"] == 2
    # month is 1 in both records: the value never changes, so one run only
    assert counts["month"] == 1
    st.close()


def test_same_month_value_across_years_still_narrows_exactly(tmp_path):
    st, idx = build_store(
        tmp_path, [ep("2015-06-01T00:00:00Z"), ep("2016-06-01T00:00:00Z")]
    )
    lo, hi = st.live_window()
    assert idx.narrow([("year", "=", 15), ("month", "=", 6)], lo, hi) == [(0, 1)]
    assert idx.narrow([("year", "=", 16), ("month", "=", 6)], lo, hi) == [(1, 2)]
    st.close()


def test_hundred_records_one_second_single_sec_entry(tmp_path):
    base = ep("2015-03-01T10:20:30Z")
    st, idx = build_store(tmp_path, [base + i * 1_000 for i in range(100)])
    counts = idx.entry_counts()
    assert counts == {g: 1 for g in GRANULARITIES}
    st.close()


def test_month_rollover_touches_month_and_year(tmp_path):
    st, idx = build_store(
        tmp_path, [ep("2015-12-31T23:59:59Z"), ep("2016-01-01T00:00:00Z")]
    )
    counts = idx.entry_counts()
    assert counts["year"] == 2
    assert counts["month"] == 2
    assert counts["day"] == 2
    st.close()


def test_memory_bound_runs_not_records(tmp_path):
    base = ep("2015-03-02T00:00:00Z")
    n = 20_000
    st, idx = build_store(tmp_path, [base + i * 500 for i in range(n)])  # 0.5ms apart
    counts = idx.entry_counts()
    assert counts["year"] == counts["month"] == counts["day"] == 1
    assert counts["hour"] <= 24
    assert counts["sec"] <= (n * 500) // 1_000_000 + 1
    st.close()


def test_extend_rejects_out_of_order_append():
    idx = DirectoryIndex()
    rec = StampedRecord(b"", 0, ctime.from_iso8601("2015-01-01T00:00:00Z"))
    idx.extend(0, [rec])
    with pytest.raises(IndexError_):
        idx.extend(5, [rec])


# -- narrow vs. linear scan -------------------------------------------------


def scan_oracle(epochs, constraints, lo, hi):
    """Row indices in [lo,hi) whose calendar fields satisfy every constraint."""
    import operator

    ops = {
        "=": operator.eq,
        "!=": operator.ne,
        "<": operator.lt,
        "<=": operator.le,
        ">": operator.gt,
        ">=": operator.ge,
    }
    out = []
    for i in range(lo, hi):
        ct = ctime.from_epoch(epochs[i])
        if all(ops[op](ctime.extract(ct, g), val) for g, op, val in constraints):
            out.append(i)
    return out


def ranges_to_indices(ranges):
    out = []
    for lo, hi in ranges:
        out.extend(range(lo, hi))
    return out


def gen_epochs(rng, n):
    """Multi-year epoch walk with uneven gaps (minutes to days)."""
    t = ep("2014-01-01T00:00:00Z") + rng.randrange(0, 10**6)
    out = []
    for _ in range(n):
        out.append(t)
        gap = rng.choice((1_000, 60_000_000, 3_600_000_000, 86_400_000_000))
        t += rng.randrange(1, 3) * gap + rng.randrange(0, 999)
    return out


def gen_constraints(rng):
    limits = {"year": 18, "month": 12, "day": 28, "hour": 23, "min": 59, "sec": 59}
    k = rng.randrange(1, 4)
    grans = rng.sample(list(limits), k)
    out = []
    for g in grans:
        op = rng.choice(("=", "=", "!=", "<", "<=", ">", ">="))
        base = 14 if g == "year" else (rng.randrange(1, limits[g]) if g in ("month", "day") else rng.randrange(0, limits[g]))
        if g == "year":
            base = rng.randrange(14, 19)
        out.append((g, op, base))
    return out


def test_narrow_matches_scan_oracle(tmp_path):
    rng = random.Random(2026)
    epochs = gen_epochs(rng, 4_000)
    st, idx = build_store(tmp_path, epochs, batch=257)
    lo, hi = st.live_window()
    for trial in range(120):
        cons = gen_constraints(rng)
        got = ranges_to_indices(idx.narrow(cons, lo, hi))
        want = scan_oracle(epochs, cons, lo, hi)
        assert got == want, (trial, cons)
    st.close()


def test_narrow_no_constraints_is_live_window(tmp_path):
    st, idx = build_store(tmp_path, [ep("2015-01-01T00:00:00Z") + i * 10**6 for i in range(50)])
    lo, hi = st.live_window()
    assert idx.narrow([], lo, hi) == [(0, 50)]
    st.close()


def test_narrow_absent_value_empty(tmp_path):
    st, idx = build_store(tmp_path, [ep("2015-01-01T00:00:00Z")])
    lo, hi = st.live_window()
    assert idx.narrow([("year", "=", 30)], lo, hi) == []
    st.close()


def test_narrow_returns_one_range_per_run(tmp_path):
    # hour=9 on two different days -> two ranges
    epochs = (
        [ep("2015-05-01T09:00:00Z") + i * 10**6 for i in range(10)]
        + [ep("2015-05-01T10:00:00Z") + i * 10**6 for i in range(10)]
        + [ep("2015-05-02T09:00:00Z") + i * 10**6 for i in range(10)]
    )
    st, idx = build_store(tmp_path, epochs)
    lo, hi = st.live_window()
    got = idx.narrow([("hour", "=", 9)], lo, hi)
    assert got == [(0, 10), (20, 30)]
    st.close()


def test_narrow_drilldown_year_month(tmp_path):
    epochs = []
    for month, n in ((1, 30), (3, 40), (7, 20)):
        base = ep(f"2015-{month:02d}-05T00:00:00Z")
        epochs.extend(base + i * 10**6 for i in range(n))
    base16 = ep("2016-03-05T00:00:00Z")
    epochs.extend(base16 + i * 10**6 for i in range(25))
    st, idx = build_store(tmp_path, epochs)
    lo, hi = st.live_window()
    got = idx.narrow([("year", "=", 15), ("month", "=", 3)], lo, hi)
    assert got == [(30, 70)]
    st.close()


def test_narrow_clips_to_live_window_after_rollaround(tmp_path):
    epochs = [ep("2015-01-01T00:00:00Z") + i * 10**6 for i in range(100)]
    st, idx = build_store(tmp_path, epochs, capacity=40, batch=10)
    lo, hi = st.live_window()
    assert (lo, hi) == (60, 100)
    got = idx.narrow([], lo, hi)
    assert got == [(60, 100)]
    scan = scan_oracle(epochs, [("min", "=", 1)], lo, hi)
    assert ranges_to_indices(idx.narrow([("min", "=", 1)], lo, hi)) == scan
    st.close()


def test_compaction_preserves_results(tmp_path):
    rng = random.Random(8)
    epochs = gen_epochs(rng, 3_000)
    st, idx = build_store(tmp_path, epochs, capacity=500, batch=100)
    lo, hi = st.live_window()
    want = scan_oracle(epochs, [("hour", ">=", 12)], lo, hi)
    idx.compact(lo)
    idx.publish()
    got = ranges_to_indices(idx.narrow([("hour", ">=", 12)], lo, hi))
    assert got == want
    st.close()


# -- sub-second seek ---------------------------------------------------------


def test_seek_time_range_vs_scan(tmp_path):
    rng = random.Random(77)
    base = ep("2015-03-01T10:00:00Z")
    epochs = sorted(base + rng.randrange(0, 1_000_000) for _ in range(1_000))
    st, _ = build_store(tmp_path, epochs)
    t_lo, t_hi = base + 250_000, base + 750_000
    lo2, hi2 = seek_time_range(st, 0, 1_000, t_lo, t_hi)
    want = [i for i, t in enumerate(epochs) if t_lo <= t < t_hi]
    assert list(range(lo2, hi2)) == want
    # window covering everything -> unchanged
    assert seek_time_range(st, 0, 1_000, base - 1, base + 10**7) == (0, 1_000)
    # empty window
    assert seek_time_range(st, 0, 1_000, t_lo, t_lo) == (0, 0)
    st.close()


# -- snapshots ---------------------------------------------------------------


def test_snapshot_load_equivalence(tmp_path):
    rng = random.Random(13)
    epochs = gen_epochs(rng, 2_500)
    st, idx = build_store(tmp_path, epochs, batch=333)
    snap = str(tmp_path / "idx.snap")
    idx.snapshot(snap)
    # more data arrives after the snapshot
    extra = [epochs[-1] + (i + 1) * 10**6 for i in range(200)]
    st.append_batch(slots_at(extra))
    all_epochs = epochs + extra

    loaded = DirectoryIndex.load_snapshot(snap, st)
    lo, hi = st.live_window()
    for _ in range(100):
        cons = gen_constraints(rng)
        assert loaded.narrow(cons, lo, hi) == idx.narrow(cons, lo, hi), cons
        assert ranges_to_indices(loaded.narrow(cons, lo, hi)) == scan_oracle(
            all_epochs, cons, lo, hi
        )
    st.close()


def test_snapshot_empty_store(tmp_path):
    st = StoreSegment.create(str(tmp_path / "e.db"), SEISMIC, 10)
    idx = DirectoryIndex(st)
    snap = str(tmp_path / "e.snap")
    idx.snapshot(snap)
    loaded = DirectoryIndex.load_snapshot(snap, st)
    assert loaded.entry_counts() == {g: 0 for g in GRANULARITIES}
    assert loaded.narrow([], 0, 0) == []
    st.close()


def test_stale_snapshot_triggers_rebuild(tmp_path):
    epochs = [ep("2015-01-01T00:00:00Z") + i * 10**6 for i in range(30)]
    st, idx = build_store(tmp_path, epochs[:10], capacity=10)
    snap = str(tmp_path / "s.snap")
    idx.snapshot(snap)
    st.append_batch(slots_at(epochs[10:]))  # live window rolls past snapshot
    loaded = DirectoryIndex.load_snapshot(snap, st)
    lo, hi = st.live_window()
    assert (lo, hi) == (20, 30)
    assert loaded.narrow([], lo, hi) == [(20, 30)]
    got = ranges_to_indices(loaded.narrow([("sec", ">=", 25)], lo, hi))
    assert got == scan_oracle(epochs, [("sec", ">=", 25)], lo, hi)
    st.close()
