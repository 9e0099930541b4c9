"""Read-only query side: logical tables, constraint pushdown and cursors.

A store segment (or several, one per ingest pipeline) is exposed as a
LogicalTable whose columns are the schema fields plus derived columns:
``TIMESTAMP`` (primary time as epoch microseconds) and one ``CTIME_*``
column per calendar granularity of the primary time field (``CTIME_hour``,
or ``CTIME_pickup_hour`` when the field is named ``pickup_datetime``).

Planning mirrors the virtual-table split: calendar and timestamp
predicates are consumed by the directory index / time binary search, the
rest stays residual and is filtered per record while iterating.  Cursors
combine partitions either by appending (exhaust partition 0, then 1, ...)
or by a time-ordered sort-merge.
"""
from __future__ import annotations

import heapq
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

from . import ctime
from .index import GRANULARITIES, seek_time_range
from .schema import Schema
from .store import ReadOutOfWindow, StoreSegment

COMPARISON_OPS = ("=", "==", "!=", "<>", "<", "<=", ">", ">=")
PARTITION_SHIFT = 48  # rowid = partition << 48 | record index

_EQ = ("=", "==")
_COST_FACTOR = {
    "year": 1 / 4,
    "month": 1 / 12,
    "day": 1 / 28,
    "hour": 1 / 24,
    "min": 1 / 60,
    "sec": 1 / 60,
}


class QueryError(ValueError):
    """Unknown column, bad op, or cursor misuse."""


@dataclass(frozen=True)
class Constraint:
    column: str  # canonical lower-case name
    op: str
    value: Any


@dataclass
class QueryPlan:
    table: "LogicalTable"
    consumed: list[Constraint] = field(default_factory=list)
    residual: list[Constraint] = field(default_factory=list)
    consumed_mask: list[bool] = field(default_factory=list)
    granularity_constraints: list[tuple[str, str, int]] = field(default_factory=list)
    t_lo: Optional[int] = None  # inclusive epoch-us bound
    t_hi: Optional[int] = None  # exclusive epoch-us bound
    estimated_cost: float = 0.0
    ordered_by_time: bool = True

    def cache_key(self) -> tuple:
        return (
            self.table.name,
            tuple(sorted((c.column, c.op, c.value) for c in self.consumed)),
            self.t_lo,
            self.t_hi,
        )


class LogicalTable:
    """Schema columns plus derived time columns over 1..N partitions."""

    def __init__(self, name: str, schema: Schema, partitions: Sequence[StoreSegment]):
        if not partitions:
            raise QueryError("a logical table needs at least one partition")
        self.name = name
        self.schema = schema
        self.partitions = list(partitions)
        self.ctime_prefix = _ctime_prefix(schema.time_field)
        self._accessors: dict[str, Callable[[bytes], Any]] = {}
        self._column_order: list[str] = []
        for f in schema.fields:
            self._accessors[f.name.lower()] = _field_accessor(schema, f.name)
            self._column_order.append(f.name)
        ts_off = schema.primary_offset
        self._accessors["timestamp"] = _timestamp_accessor(ts_off)
        self._column_order.append("TIMESTAMP")
        for gran in ("year", "month", "day", "wday", "hour", "min", "sec", "usec"):
            col = self.ctime_column(gran)
            self._accessors[col.lower()] = _ctime_accessor(ts_off, gran)
            self._column_order.append(col)
        self._cache: dict[tuple, _CacheEntry] = {}
        self._cache_lock = threading.Lock()

    def ctime_column(self, gran: str) -> str:
        if self.ctime_prefix:
            return f"CTIME_{self.ctime_prefix}_{gran}"
        return f"CTIME_{gran}"

    def column_names(self) -> list[str]:
        return list(self._column_order)

    def has_column(self, name: str) -> bool:
        return name.lower() in self._accessors

    def accessor(self, name: str) -> Callable[[bytes], Any]:
        try:
            return self._accessors[name.lower()]
        except KeyError:
            raise QueryError(f"no column {name!r} in table {self.name}") from None

    def live_count(self) -> int:
        return sum(p.live_count for p in self.partitions)

    def total_inserted(self) -> int:
        return sum(p.total for p in self.partitions)

    # granularity of a CTIME_* column, or None for everything else
    def time_granularity(self, column: str) -> Optional[str]:
        low = column.lower()
        prefix = f"ctime_{self.ctime_prefix}_" if self.ctime_prefix else "ctime_"
        if not low.startswith(prefix):
            return None
        gran = low[len(prefix):]
        if gran in ("year", "month", "day", "wday", "hour", "min", "sec", "usec"):
            return gran
        return None

    # -- prefetch cache ----------------------------------------------------

    def prefetch(self, plan: QueryPlan, budget_bytes: int) -> Optional[tuple]:
        """Materialize up to budget_bytes of the plan's candidate ranges.

        Returns the cache key, or None when the budget is zero.  Later
        cursors with an identical plan recompute the (cheap) index ranges
        but read cached record bytes instead of touching storage; an entry
        drops itself once roll-around overwrites any record it holds.
        """
        if budget_bytes <= 0:
            return None
        key = plan.cache_key()
        entry = _CacheEntry()
        spent = 0
        for store in self.partitions:
            rows: dict[int, tuple[int, bytes]] = {}
            for lo, hi in _candidate_ranges(store, plan):
                if spent >= budget_bytes:
                    break
                for i in range(lo, hi):
                    if spent + store.record_size > budget_bytes:
                        break
                    try:
                        data = store.read_at(i)
                    except ReadOutOfWindow:
                        continue
                    rows[i] = (_epoch_of(store, data), data)
                    spent += store.record_size
            entry.partitions.append(rows)
            entry.floor.append(min(rows, default=1 << 62))
        with self._cache_lock:
            self._cache[key] = entry
        return key

    def cached_entry(self, plan: QueryPlan) -> Optional["_CacheEntry"]:
        with self._cache_lock:
            entry = self._cache.get(plan.cache_key())
            if entry is None:
                return None
            for pidx, store in enumerate(self.partitions):
                live_lo, _ = store.live_window()
                if entry.floor[pidx] < live_lo:  # rolled over: stale
                    del self._cache[plan.cache_key()]
                    return None
            return entry

    def register_update_callback(
        self, every_n: int, action: Callable[[int], None]
    ) -> "UpdateSubscription":
        """Invoke ``action(total_inserts)`` as insert counts cross multiples
        of every_n, coalesced to at most one call per append batch."""
        return UpdateSubscription(self, every_n, action)


class _CacheEntry:
    __slots__ = ("partitions", "floor")

    def __init__(self):
        # per partition: {absolute record index: (epoch, record bytes)}
        self.partitions: list[dict[int, tuple[int, bytes]]] = []
        self.floor: list[int] = []


class UpdateSubscription:
    def __init__(self, table: LogicalTable, every_n: int, action: Callable[[int], None]):
        if every_n < 1:
            raise QueryError("every_n must be >= 1")
        self.table = table
        self.every_n = every_n
        self.action = action
        self._lock = threading.Lock()
        self._marker = table.total_inserted()
        self._hooks: list[tuple[StoreSegment, Callable]] = []
        for store in table.partitions:
            hook = self._on_commit
            store.on_commit.append(hook)
            self._hooks.append((store, hook))

    def _on_commit(self, _store_total: int) -> None:
        with self._lock:
            total = self.table.total_inserted()
            if total // self.every_n > self._marker // self.every_n:
                self._marker = total
                fire = True
            else:
                self._marker = max(self._marker, total)
                fire = False
        if fire:
            self.action(total)

    def cancel(self) -> None:
        for store, hook in self._hooks:
            try:
                store.on_commit.remove(hook)
            except ValueError:
                pass
        self._hooks.clear()


def best_index(table: LogicalTable, constraints: Sequence[Constraint]) -> QueryPlan:
    """Split constraints into index-consumed and residual sets.

    Calendar-granularity equality/range/inequality predicates and
    TIMESTAMP bounds are consumed; wday/usec (not indexed) and every other
    column stay residual.  The cost estimate shrinks with each consumed
    predicate, more for finer granularities.
    """
    plan = QueryPlan(table=table)
    cost = float(max(table.live_count(), 1))
    for c in constraints:
        if not table.has_column(c.column):
            raise QueryError(f"no column {c.column!r} in table {table.name}")
        if c.op not in COMPARISON_OPS:
            raise QueryError(f"unsupported constraint op {c.op!r}")
        gran = table.time_granularity(c.column)
        consumed = False
        if gran in _COST_FACTOR and isinstance(c.value, int) and not isinstance(c.value, bool):
            plan.granularity_constraints.append((gran, c.op, c.value))
            consumed = True
            cost *= _COST_FACTOR[gran] if c.op in _EQ else 0.5
        elif c.column.lower() == "timestamp" and isinstance(c.value, int):
            if c.op in _EQ:
                plan.t_lo = _max_opt(plan.t_lo, c.value)
                plan.t_hi = _min_opt(plan.t_hi, c.value + 1)
                consumed = True
            elif c.op in (">", ">="):
                plan.t_lo = _max_opt(plan.t_lo, c.value + (1 if c.op == ">" else 0))
                consumed = True
            elif c.op in ("<", "<="):
                plan.t_hi = _min_opt(plan.t_hi, c.value + (1 if c.op == "<=" else 0))
                consumed = True
            if consumed:
                cost *= 0.25
        if consumed:
            plan.consumed.append(c)
        else:
            plan.residual.append(c)
        plan.consumed_mask.append(consumed)
    # most-significant granularity first, as the index drill-down expects
    order = {g: i for i, g in enumerate(GRANULARITIES)}
    plan.granularity_constraints.sort(key=lambda g: order[g[0]])
    plan.estimated_cost = cost
    return plan


def _candidate_ranges(store: StoreSegment, plan: QueryPlan) -> list[tuple[int, int]]:
    view = store.index.view if store.index is not None else None
    total = store.total
    live_lo = total - store.capacity
    if live_lo < 0:
        live_lo = 0
    if view is None:
        ranges = [(live_lo, total)] if live_lo < total else []
    else:
        ranges = store.index.narrow(
            plan.granularity_constraints, live_lo, total, view=view
        )
    if plan.t_lo is not None or plan.t_hi is not None:
        t_lo = plan.t_lo if plan.t_lo is not None else 0
        t_hi = plan.t_hi if plan.t_hi is not None else 1 << 62
        ranges = [
            seek_time_range(store, lo, hi, t_lo, t_hi) for lo, hi in ranges
        ]
        ranges = [(lo, hi) for lo, hi in ranges if lo < hi]
    return ranges


def _scan_partition(
    store: StoreSegment, plan: QueryPlan, pidx: int, reverse: bool,
    cached: Optional[_CacheEntry],
) -> Iterator[tuple[int, int, int, bytes]]:
    """Yield (epoch, partition, abs index, record bytes) in log order."""
    t_lo, t_hi = plan.t_lo, plan.t_hi
    rows = cached.partitions[pidx] if cached is not None else None
    ranges = _candidate_ranges(store, plan)
    seq: Iterable[tuple[int, int]] = reversed(ranges) if reverse else ranges
    for lo, hi in seq:
        idxs = range(hi - 1, lo - 1, -1) if reverse else range(lo, hi)
        for i in idxs:
            if rows is not None and i in rows:
                epoch, data = rows[i]
            else:
                try:
                    data = store.read_at(i)
                except ReadOutOfWindow:
                    continue
                epoch = _epoch_of(store, data)
            # revalidate pushed time bounds (cheap; guards wrap races)
            if t_lo is not None and epoch < t_lo:
                continue
            if t_hi is not None and epoch >= t_hi:
                continue
            yield (epoch, pidx, i, data)


class Cursor:
    """Iterator over a plan's matching records.

    combine='append' exhausts partition 0, then 1, ...; 'sort-merge'
    interleaves partitions in non-decreasing primary time.  With
    newest_first=True the scan runs in reverse log order (the
    LIMIT-without-ORDER path).
    """

    def __init__(
        self,
        plan: QueryPlan,
        combine: str = "sort-merge",
        newest_first: bool = False,
        use_cache: bool = True,
    ):
        if combine not in ("append", "sort-merge"):
            raise QueryError(f"unknown combine mode {combine!r}")
        table = plan.table
        self.plan = plan
        self.table = table
        cached = table.cached_entry(plan) if use_cache else None
        residual_pred = _residual_predicate(table, plan.residual)
        scans = [
            _scan_partition(store, plan, pidx, newest_first, cached)
            for pidx, store in enumerate(table.partitions)
        ]
        if combine == "append" and not newest_first:
            merged: Iterator = itertools.chain(*scans)
        else:
            merged = heapq.merge(
                *scans, key=lambda t: (t[0], t[1], t[2]), reverse=newest_first
            )
        if residual_pred is not None:
            merged = (t for t in merged if residual_pred(t[3]))
        self._iter = merged
        self._row: Optional[tuple[int, int, int, bytes]] = None
        self._eof = False
        self.next()

    def eof(self) -> bool:
        return self._eof

    def next(self) -> None:
        try:
            self._row = next(self._iter)
        except StopIteration:
            self._row = None
            self._eof = True

    def _current(self) -> tuple[int, int, int, bytes]:
        if self._row is None:
            raise QueryError("cursor is exhausted")
        return self._row

    def column(self, name: str) -> Any:
        return self.table.accessor(name)(self._current()[3])

    def rowid(self) -> int:
        _, pidx, idx, _ = self._current()
        return (pidx << PARTITION_SHIFT) | idx

    def epoch(self) -> int:
        return self._current()[0]

    def record(self) -> bytes:
        return self._current()[3]

    def __iter__(self) -> Iterator[bytes]:
        while not self._eof:
            yield self._current()[3]
            self.next()


def open_cursor(
    plan: QueryPlan, combine: str = "sort-merge", newest_first: bool = False
) -> Cursor:
    return Cursor(plan, combine=combine, newest_first=newest_first)


# -- helpers ----------------------------------------------------------------


def _ctime_prefix(time_field: str) -> str:
    base = time_field.lower()
    for suffix in ("_datetime", "_time", "datetime", "time"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return base.strip("_")


def _field_accessor(schema: Schema, name: str) -> Callable[[bytes], Any]:
    return lambda data: schema.read_field(data, name)


def _timestamp_accessor(primary_offset: int) -> Callable[[bytes], int]:
    to_epoch = ctime.to_epoch_trusted
    off = primary_offset

    def get(data: bytes) -> int:
        return to_epoch(int.from_bytes(data[off : off + 8], "little"))

    return get


def _ctime_accessor(primary_offset: int, gran: str) -> Callable[[bytes], int]:
    shift, mask = ctime.FIELD_SHIFTS[gran]
    off = primary_offset

    def get(data: bytes) -> int:
        return (int.from_bytes(data[off : off + 8], "little") >> shift) & mask

    return get


def _epoch_of(store: StoreSegment, data: bytes) -> int:
    off = store.primary_offset
    return ctime.to_epoch_trusted(int.from_bytes(data[off : off + 8], "little"))


def _residual_predicate(
    table: LogicalTable, residual: Sequence[Constraint]
) -> Optional[Callable[[bytes], bool]]:
    if not residual:
        return None
    import operator

    ops = {
        "=": operator.eq,
        "==": operator.eq,
        "!=": operator.ne,
        "<>": operator.ne,
        "<": operator.lt,
        "<=": operator.le,
        ">": operator.gt,
        ">=": operator.ge,
    }
    compiled = [(table.accessor(c.column), ops[c.op], c.value) for c in residual]

    def pred(data: bytes) -> bool:
        for get, op, val in compiled:
            if not op(get(data), val):
                return False
        return True

    return pred


def _max_opt(a: Optional[int], b: int) -> int:
    return b if a is None else max(a, b)


def _min_opt(a: Optional[int], b: int) -> int:
    return b if a is None else min(a, b)
