"""Query layer: plan split, cursors, pushdown soundness, prefetch, callbacks."""
from __future__ import annotations

import random

import pytest

from ltss import ctime, datasets
from ltss.query import Constraint, Cursor, QueryError, best_index, open_cursor
from tests.conftest import build_table


def C(col, op, val):
    return Constraint(col, op, val)


def test_best_index_consumes_hour_range(taxi_table):
    table, _ = taxi_table
    plan = best_index(table, [C("ctime_pickup_hour", ">=", 20)])
    assert [c.column for c in plan.consumed] == ["ctime_pickup_hour"]
    assert plan.residual == []
    assert plan.granularity_constraints == [("hour", ">=", 20)]


def test_best_index_non_time_is_residual(taxi_table):
    table, _ = taxi_table
    plan = best_index(table, [C("medallion", "=", "X")])
    assert plan.consumed == []
    assert [c.column for c in plan.residual] == ["medallion"]


def test_best_index_split_rule(taxi_table):
    table, _ = taxi_table
    plan = best_index(
        table,
        [
            C("ctime_pickup_year", "=", 13),
            C("ctime_pickup_month", "=", 11),
            C("passenger_count", ">", 2),
        ],
    )
    assert [c.column for c in plan.consumed] == [
        "ctime_pickup_year",
        "ctime_pickup_month",
    ]
    assert [c.column for c in plan.residual] == ["passenger_count"]


def test_best_index_wday_and_usec_stay_residual(taxi_table):
    table, _ = taxi_table
    plan = best_index(
        table, [C("ctime_pickup_wday", "=", 0), C("ctime_pickup_usec", ">", 10)]
    )
    assert plan.consumed == []
    assert len(plan.residual) == 2


def test_best_index_timestamp_bounds(energy_table):
    table, rows = energy_table
    t0 = rows[100][0]
    t1 = rows[200][0]
    plan = best_index(table, [C("timestamp", ">=", t0), C("timestamp", "<", t1)])
    assert (plan.t_lo, plan.t_hi) == (t0, t1)
    assert plan.residual == []


def test_best_index_cost_decreases_with_finer_constraints(taxi_table):
    table, _ = taxi_table
    base = best_index(table, []).estimated_cost
    year = best_index(table, [C("ctime_pickup_year", "=", 13)]).estimated_cost
    ym = best_index(
        table, [C("ctime_pickup_year", "=", 13), C("ctime_pickup_month", "=", 11)]
    ).estimated_cost
    ymd = best_index(
        table,
        [
            C("ctime_pickup_year", "=", 13),
            C("ctime_pickup_month", "=", 11),
            C("ctime_pickup_day", "=", 25),
        ],
    ).estimated_cost
    assert base > year > ym > ymd


def test_best_index_unknown_column(taxi_table):
    table, _ = taxi_table
    with pytest.raises(QueryError):
        best_index(table, [C("no_such", "=", 1)])


def scan_rows(table, rows, pred):
    return [r for r in rows if pred(r)]


def test_pushdown_equals_full_scan_random(taxi_table):
    """Oracle equivalence: cursor rows == scan + residual-only filtering."""
    table, rows = taxi_table
    schema = table.schema
    rng = random.Random(55)
    ops = {
        "=": lambda a, b: a == b,
        "!=": lambda a, b: a != b,
        "<": lambda a, b: a < b,
        "<=": lambda a, b: a <= b,
        ">": lambda a, b: a > b,
        ">=": lambda a, b: a >= b,
    }
    limits = {"year": (13, 14), "month": (1, 13), "day": (1, 29), "hour": (0, 24)}
    for _ in range(60):
        cons = []
        for gran in rng.sample(list(limits), rng.randrange(1, 3)):
            lo, hi = limits[gran]
            cons.append(
                C(f"ctime_pickup_{gran}", rng.choice(list(ops)), rng.randrange(lo, hi))
            )
        if rng.random() < 0.4:
            cons.append(C("passenger_count", ">=", rng.randrange(1, 6)))
        plan = best_index(table, cons)
        got = []
        cur = Cursor(plan)
        while not cur.eof():
            got.append(cur.column("pickup_datetime"))
            cur.next()

        def matches(row):
            ct = ctime.from_epoch(row[2])
            for c in cons:
                gran = table.time_granularity(c.column)
                if gran:
                    v = ctime.extract(ct, gran)
                elif c.column == "passenger_count":
                    v = row[4]
                else:
                    raise AssertionError(c)
                if not ops[c.op](v, c.value):
                    return False
            return True

        want = sorted(r[2] for r in rows if matches(r))
        assert sorted(got) == want, cons


def test_cursor_append_vs_sort_merge(tmp_path):
    table, rows = build_table(tmp_path, "seismic", 400, seed=3, partitions=2)
    plan = best_index(table, [])
    merged = [c for c in iter_epochs(open_cursor(plan, "sort-merge"))]
    assert merged == sorted(merged)
    appended = [c for c in iter_epochs(open_cursor(plan, "append"))]
    assert sorted(appended) == merged
    # append exhausts partition 0 first
    p0 = table.partitions[0].live_count
    assert appended[:p0] == sorted(appended[:p0])
    for st in table.partitions:
        st.close()


def iter_epochs(cur):
    out = []
    while not cur.eof():
        out.append(cur.epoch())
        cur.next()
    return out


def test_cursor_single_partition_modes_identical(seismic_table):
    table, _ = seismic_table
    plan = best_index(table, [])
    a = iter_epochs(open_cursor(plan, "append"))
    b = iter_epochs(open_cursor(plan, "sort-merge"))
    assert a == b


def test_cursor_column_and_rowid(seismic_table):
    table, rows = seismic_table
    plan = best_index(table, [])
    cur = open_cursor(plan)
    n = 0
    while not cur.eof():
        ct_hour = cur.column("CTIME_hour")
        ts = cur.column("TIMESTAMP")
        assert ct_hour == ctime.extract(ctime.from_epoch(ts), "hour")
        assert cur.rowid() == n  # partition 0: plain index
        n += 1
        cur.next()
    assert n == len(rows)
    with pytest.raises(QueryError):
        cur.column("value")  # exhausted


def test_cursor_newest_first_limit_path(seismic_table):
    table, rows = seismic_table
    plan = best_index(table, [])
    cur = Cursor(plan, newest_first=True)
    got = iter_epochs(cur)
    assert got == sorted((r[0] for r in rows), reverse=True)


def test_residual_filter_only_matching_rows(taxi_table):
    table, rows = taxi_table
    target = datasets.BENCH_MEDALLION
    plan = best_index(table, [C("medallion", "=", target)])
    cur = Cursor(plan)
    n = 0
    while not cur.eof():
        assert cur.column("medallion") == target
        n += 1
        cur.next()
    assert n == sum(1 for r in rows if r[0] == target)
    assert n > 0


def test_prefetch_second_run_touches_no_storage(seismic_table):
    table, _ = seismic_table
    store = table.partitions[0]
    plan = best_index(table, [C("ctime_hour", "=", 0)])
    baseline = iter_epochs(open_cursor(plan))
    table.prefetch(plan, budget_bytes=1 << 24)
    before = store.read_count
    cached_run = iter_epochs(open_cursor(plan))
    assert store.read_count == before  # served from cache
    assert cached_run == baseline


def test_prefetch_budget_zero_no_cache(seismic_table):
    table, _ = seismic_table
    plan = best_index(table, [])
    assert table.prefetch(plan, 0) is None
    store = table.partitions[0]
    before = store.read_count
    iter_epochs(open_cursor(plan))
    assert store.read_count > before


def test_prefetch_invalidated_by_rollaround(tmp_path):
    table, rows = build_table(tmp_path, "seismic", 100, seed=5, capacity=100)
    store = table.partitions[0]
    plan = best_index(table, [])
    table.prefetch(plan, 1 << 20)
    assert table.cached_entry(plan) is not None
    fresh = list(datasets.gen_seismic(40, seed=9, start="2016-01-01T00:00:00Z"))
    from tests.conftest import ingest_rows

    ingest_rows(store, table.schema, fresh)  # wraps, overwriting cached rows
    assert table.cached_entry(plan) is None
    store.close()


def test_update_callbacks(tmp_path):
    table, _ = build_table(tmp_path, "seismic", 10, seed=2, capacity=100_000)
    store = table.partitions[0]
    calls = []
    sub = table.register_update_callback(1_000, calls.append)
    t0 = 1_470_000_000_000_000
    from tests.conftest import ingest_rows

    for k in range(5):  # 5 batches of 500: crossings at 1000*k
        rows = list(datasets.gen_seismic(500, seed=k, start="2016-08-01T00:00:00Z"))
        rows = [(t0 + k * 10**9 + i * 1000, *r[1:]) for i, r in enumerate(rows)]
        ingest_rows(store, table.schema, rows, batch_size=500)
    assert len(calls) == 2  # crossed 1000 and 2000 past the initial 10
    sub.cancel()
    rows = [(t0 + 10**10 + i, 0.0, 0.0, 0.0, 0.0, 0.0) for i in range(2_000)]
    ingest_rows(store, table.schema, rows, batch_size=500)
    assert len(calls) == 2  # unsubscribed: no more invocations
    store.close()


def test_update_callback_batch_coalescing(tmp_path):
    table, _ = build_table(tmp_path, "seismic", 0, seed=2, capacity=10_000)
    store = table.partitions[0]
    calls = []
    table.register_update_callback(1, calls.append)
    rows = list(datasets.gen_seismic(10, seed=3))
    from tests.conftest import ingest_rows

    ingest_rows(store, table.schema, rows, batch_size=10)  # one batch of 10
    assert calls == [10]  # one invocation carrying the count
    store.close()
