"""Calendar directory index: per-field offset runs plus interval trees.

For each calendar granularity (year down to second) the index keeps one
entry per *run* of equal field values in the log: ``(value, first record
index)``.  Memory therefore grows with the number of value changes, not
with the record count.  An interval tree over the run extents locates the
runs intersecting a candidate record range, which is how a coarse match
(say year=2015) narrows the search for the next constraint (month=3)
without scanning.

Sub-second predicates fall through to a binary search over the
time-sorted log (`seek_time_range`).

The writer (one sorter thread) appends entries and publishes immutable
views; readers only ever navigate a published view, so queries never lock
against ingest.
"""
from __future__ import annotations

import os
import struct
from array import array
from typing import Callable, NamedTuple, Optional, Sequence

from . import ctime
from .schema import StampedRecord

GRANULARITIES = ("year", "month", "day", "hour", "min", "sec")

_SHIFTS = {
    "year": (ctime.YEAR_SHIFT, 31),
    "month": (ctime.MONTH_SHIFT, 15),
    "day": (ctime.DAY_SHIFT, 31),
    "hour": (ctime.HOUR_SHIFT, 31),
    "min": (ctime.MIN_SHIFT, 63),
    "sec": (ctime.SEC_SHIFT, 63),
}
# Bits above (and including) the seconds field: when unchanged between
# consecutive records, no granularity list can change either.
_ABOVE_USEC = ~((1 << 20) - 1)

SNAPSHOT_MAGIC = b"LTSI"
SNAPSHOT_VERSION = 1


class IndexError_(Exception):
    """Index misuse (out-of-order append, snapshot mismatch)."""


class IntervalTree:
    """Static interval tree over half-open intervals, CLRS style.

    Nodes are the intervals themselves, arranged as a balanced BST on the
    start coordinate (midpoint recursion), each node augmented with the
    maximum end in its subtree.  Built once per published batch of entries
    and queried read-only.
    """

    __slots__ = ("starts", "ends", "left", "right", "maxend", "root")

    def __init__(self, starts: Sequence[int], ends: Sequence[int]):
        n = len(starts)
        self.starts = starts
        self.ends = ends
        self.left = array("l", [-1] * n)
        self.right = array("l", [-1] * n)
        self.maxend = array("q", [0] * n)
        self.root = self._build(0, n)

    def _build(self, lo: int, hi: int) -> int:
        if lo >= hi:
            return -1
        mid = (lo + hi) // 2
        left = self._build(lo, mid)
        right = self._build(mid + 1, hi)
        self.left[mid] = left
        self.right[mid] = right
        m = self.ends[mid]
        if left >= 0 and self.maxend[left] > m:
            m = self.maxend[left]
        if right >= 0 and self.maxend[right] > m:
            m = self.maxend[right]
        self.maxend[mid] = m
        return mid

    def overlapping(self, lo: int, hi: int) -> list[int]:
        """Indices of intervals intersecting [lo, hi), ascending by start."""
        out: list[int] = []
        if self.root < 0 or lo >= hi:
            return out
        stack = [self.root]
        starts, ends = self.starts, self.ends
        left, right, maxend = self.left, self.right, self.maxend
        while stack:
            node = stack.pop()
            if maxend[node] <= lo:
                continue  # nothing in this subtree ends past lo
            l = left[node]
            if l >= 0:
                stack.append(l)
            if starts[node] < hi:
                if ends[node] > lo:
                    out.append(node)
                r = right[node]
                if r >= 0:
                    stack.append(r)
        out.sort()
        return out


class _GranList:
    """Append-only (value, first_record_index) run list for one field."""

    __slots__ = ("granularity", "values", "starts")

    def __init__(self, granularity: str):
        self.granularity = granularity
        self.values = array("B")
        self.starts = array("Q")

    def __len__(self) -> int:
        return len(self.values)


class IndexView(NamedTuple):
    """Immutable reader snapshot: per-granularity (values, starts, count)."""

    lists: tuple[tuple[array, array, int], ...]
    base: int  # absolute index of the first indexed record
    high_water: int  # absolute index one past the last indexed record
    epoch: int  # compaction epoch, part of the tree-cache key


class DirectoryIndex:
    """Single-writer, multi-reader index over one store segment's log."""

    def __init__(self, store=None):
        self.store = store
        self._lists = tuple(_GranList(g) for g in GRANULARITIES)
        self._last_ct: int = -1
        self._base = 0
        self._high_water = 0
        self._epoch = 0
        self.view = IndexView(
            tuple((l.values, l.starts, 0) for l in self._lists), 0, 0, 0
        )
        self._trees: dict[tuple[int, int, int], IntervalTree] = {}

    # -- writer side -------------------------------------------------------

    def extend(self, first_index: int, batch: Sequence[StampedRecord]) -> None:
        """Append index entries for one store batch (log-append order)."""
        if first_index != self._high_water:
            raise IndexError_(
                f"append at {first_index}, expected {self._high_water}"
            )
        last_ct = self._last_ct
        lists = self._lists
        idx = first_index
        for slot in batch:
            ct = slot.ct
            # fast path: same second (and above) as the previous record
            if last_ct < 0 or (ct & _ABOVE_USEC) != (last_ct & _ABOVE_USEC):
                for li, g in enumerate(GRANULARITIES):
                    shift, mask = _SHIFTS[g]
                    v = (ct >> shift) & mask
                    gl = lists[li]
                    if last_ct < 0 or v != ((last_ct >> shift) & mask):
                        gl.values.append(v)
                        gl.starts.append(idx)
                last_ct = ct
            idx += 1
        self._last_ct = last_ct
        self._high_water = idx
        if self.store is not None:
            self._maybe_compact()

    def publish(self) -> None:
        """Swap in a new immutable reader view (RCU discipline)."""
        self.view = IndexView(
            tuple((l.values, l.starts, len(l.values)) for l in self._lists),
            self._base,
            self._high_water,
            self._epoch,
        )

    def _maybe_compact(self) -> None:
        live_lo, _ = self.store.live_window()
        if live_lo <= self._base:
            return
        total_entries = sum(len(l) for l in self._lists)
        if total_entries < 4096:
            return
        dead = 0
        for gl in self._lists:
            # entries strictly before the last run covering live_lo are dead
            starts = gl.starts
            n = len(starts)
            k = 0
            while k + 1 < n and starts[k + 1] <= live_lo:
                k += 1
            dead += k
        if dead * 2 < total_entries:
            return
        self.compact(live_lo)

    def compact(self, live_lo: int) -> None:
        """Drop entries wholly below the live window; clamp the boundary run."""
        for gl in self._lists:
            starts, values = gl.starts, gl.values
            n = len(starts)
            k = 0
            while k + 1 < n and starts[k + 1] <= live_lo:
                k += 1
            if k == 0 and (n == 0 or starts[0] >= live_lo):
                continue
            new_vals = array("B", values[k:])
            new_starts = array("Q", starts[k:])
            if len(new_starts) and new_starts[0] < live_lo:
                new_starts[0] = live_lo
            gl.values = new_vals
            gl.starts = new_starts
        self._base = live_lo
        self._epoch += 1
        self._trees.clear()

    # -- reader side -------------------------------------------------------

    def narrow(
        self,
        constraints: Sequence[tuple[str, str, int]],
        live_lo: int,
        live_hi: int,
        view: Optional[IndexView] = None,
    ) -> list[tuple[int, int]]:
        """Minimal contiguous record-index ranges that can satisfy the
        conjunction of (granularity, op, value) constraints.

        Ranges are clipped to [live_lo, live_hi) and to the view's indexed
        extent.  Unknown record ranges (beyond the view) are excluded; the
        caller is expected to query against a view published with the
        batch that made those records live.
        """
        v = self.view if view is None else view
        lo = max(live_lo, v.base)
        hi = min(live_hi, v.high_water)
        if lo >= hi:
            return []
        ranges = [(lo, hi)]
        by_gran: dict[str, list[Callable[[int], bool]]] = {}
        for gran, op, value in constraints:
            if gran not in _SHIFTS:
                raise IndexError_(f"not an indexed granularity: {gran!r}")
            by_gran.setdefault(gran, []).append(_predicate(op, value))
        for gi, gran in enumerate(GRANULARITIES):  # most significant first
            preds = by_gran.get(gran)
            if not preds or not ranges:
                continue
            values, starts, count = v.lists[gi]
            tree = self._tree_for(gi, v)
            new_ranges: list[tuple[int, int]] = []
            for rlo, rhi in ranges:
                for e in tree.overlapping(rlo, rhi):
                    val = values[e]
                    if all(p(val) for p in preds):
                        e_lo = starts[e]
                        e_hi = starts[e + 1] if e + 1 < count else v.high_water
                        new_ranges.append((max(e_lo, rlo), min(e_hi, rhi)))
            ranges = _merge_ranges(new_ranges)
        return ranges

    def _tree_for(self, gran_index: int, view: IndexView) -> IntervalTree:
        values, starts, count = view.lists[gran_index]
        key = (gran_index, count, view.epoch)
        tree = self._trees.get(key)
        if tree is None:
            # the newest run keeps growing until the value changes, so its
            # extent is open-ended here; ranges are clipped to high_water
            # when emitted from narrow()
            ends = array("Q", starts[1:count])
            ends.append(1 << 62)
            tree = IntervalTree(starts[:count], ends)
            self._trees[key] = tree
        return tree

    # -- persistence -------------------------------------------------------

    def snapshot(self, path: str) -> None:
        """Write a point-in-time copy of the entry arrays (atomic rename)."""
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(
                struct.pack(
                    "<BxxxQQQ", SNAPSHOT_VERSION, self._base, self._high_water, self._epoch
                )
            )
            for gl in self._lists:
                vals = gl.values.tobytes()
                starts = gl.starts.tobytes()
                fh.write(struct.pack("<Q", len(gl.values)))
                fh.write(vals)
                fh.write(starts)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load_snapshot(cls, path: str, store) -> "DirectoryIndex":
        """Rebuild an index from a snapshot plus the store's newer records.

        Falls back to a full rebuild when the snapshot predates the live
        window (roll-around outran it).
        """
        idx = cls(store)
        with open(path, "rb") as fh:
            if fh.read(4) != SNAPSHOT_MAGIC:
                raise IndexError_(f"{path}: not an index snapshot")
            version, base, high_water, epoch = struct.unpack("<BxxxQQQ", fh.read(28))
            if version != SNAPSHOT_VERSION:
                raise IndexError_(f"{path}: unsupported snapshot version {version}")
            lists = []
            for g in GRANULARITIES:
                (count,) = struct.unpack("<Q", fh.read(8))
                gl = _GranList(g)
                gl.values = array("B")
                gl.values.frombytes(fh.read(count))
                gl.starts = array("Q")
                gl.starts.frombytes(fh.read(count * 8))
                lists.append(gl)
        live_lo, live_hi = store.live_window()
        if high_water < live_lo or base > live_lo:
            return cls.rebuild(store)  # stale beyond replay reach
        idx._lists = tuple(lists)
        idx._base = base
        idx._high_water = high_water
        idx._epoch = epoch
        idx._last_ct = _last_ct_from_lists(lists) if high_water > base else -1
        idx._reindex_tail(live_hi)
        idx.publish()
        return idx

    @classmethod
    def rebuild(cls, store) -> "DirectoryIndex":
        """Index the whole live window by scanning the log."""
        idx = cls(store)
        live_lo, live_hi = store.live_window()
        idx._base = live_lo
        idx._high_water = live_lo
        idx._reindex_tail(live_hi)
        idx.publish()
        return idx

    def _reindex_tail(self, live_hi: int) -> None:
        batch = []
        pos = self._high_water
        for i in range(pos, live_hi):
            ct = self.store.primary_ct_at(i)
            batch.append(StampedRecord(b"", 0, ct))
            if len(batch) == 4096:
                self.extend(pos, batch)
                pos += len(batch)
                batch = []
        if batch:
            self.extend(pos, batch)

    def entry_counts(self) -> dict[str, int]:
        return {g: len(l) for g, l in zip(GRANULARITIES, self._lists)}


def seek_time_range(store, lo: int, hi: int, t_lo: int, t_hi: int) -> tuple[int, int]:
    """Binary-search a time-sorted record range down to [t_lo, t_hi) µs.

    Returns the maximal subrange of [lo, hi) whose primary times satisfy
    t_lo <= t < t_hi.
    """
    if t_lo >= t_hi or lo >= hi:
        return (lo, lo)
    return (
        _lower_bound(store, lo, hi, t_lo),
        _lower_bound(store, lo, hi, t_hi),
    )


def _lower_bound(store, lo: int, hi: int, t: int) -> int:
    while lo < hi:
        mid = (lo + hi) // 2
        if store.primary_epoch_at(mid) < t:
            lo = mid + 1
        else:
            hi = mid
    return lo


def _predicate(op: str, value: int) -> Callable[[int], bool]:
    if op in ("=", "=="):
        return lambda v: v == value
    if op in ("!=", "<>"):
        return lambda v: v != value
    if op == "<":
        return lambda v: v < value
    if op == "<=":
        return lambda v: v <= value
    if op == ">":
        return lambda v: v > value
    if op == ">=":
        return lambda v: v >= value
    raise IndexError_(f"unsupported constraint op {op!r}")


def _merge_ranges(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of half-open ranges as a minimal sorted list."""
    out: list[tuple[int, int]] = []
    for lo, hi in sorted(r for r in ranges if r[0] < r[1]):
        if out and lo <= out[-1][1]:
            if hi > out[-1][1]:
                out[-1] = (out[-1][0], hi)
        else:
            out.append((lo, hi))
    return out


def _last_ct_from_lists(lists: Sequence[_GranList]) -> int:
    """Reconstruct a packed word carrying each granularity's last value.

    Only the six indexed fields matter for change detection; the rest stay
    zero (usec differences never create entries).
    """
    ct = 0
    for g, gl in zip(GRANULARITIES, lists):
        if not len(gl.values):
            return -1
        shift, _ = _SHIFTS[g]
        ct |= gl.values[-1] << shift
    return ct
