"""In-flight record ordering: quantum buckets, delinquent drop, insertion sort.

Arriving records are staged into fixed-duration time windows ("quantum
buckets") keyed by the floor of their timestamp.  A bucket closes once the
stream clock - the high-watermark of observed record timestamps - passes
``start + (linger + 1) * quantum``; closed buckets are insertion-sorted and
appended to the store as one batch.  Records whose window already closed
are delinquent: dropped and counted, never stored.

The stream clock (rather than the wall clock) drives expiry so that a
record delayed by less than ``linger * quantum`` can never be delinquent
and so that historical replays order correctly; the owning pipeline adds a
wall-clock idle flush so a stalled source cannot hold buckets open forever.
"""
from __future__ import annotations

from bisect import bisect_right, insort
from typing import Callable, Sequence

from .schema import StampedRecord

DEFAULT_LINGER = 2
DEFAULT_MAX_OPEN = 16


def bucket_start(t: int, quantum: int) -> int:
    """Window start for a timestamp: floor(t / quantum) * quantum."""
    if quantum <= 0:
        raise ValueError("quantum must be positive")
    return t - t % quantum


class QuantumBucket:
    __slots__ = ("start", "quantum", "records", "closed")

    def __init__(self, start: int, quantum: int):
        self.start = start
        self.quantum = quantum
        self.records: list[StampedRecord] = []
        self.closed = False

    def __len__(self) -> int:
        return len(self.records)


class OrderingState:
    """Single-threaded bucket queue for one pipeline."""

    def __init__(
        self,
        quantum: int,
        linger: int = DEFAULT_LINGER,
        max_open: int = DEFAULT_MAX_OPEN,
    ):
        if quantum <= 0:
            raise ValueError("quantum must be positive")
        if linger < 0 or max_open < 1:
            raise ValueError("linger must be >= 0 and max_open >= 1")
        self.quantum = quantum
        self.linger = linger
        self.max_open = max_open
        self.watermark = 0  # records below this are delinquent
        self.stream_clock = 0  # greatest record timestamp observed
        self.delinquent_count = 0
        self._buckets: dict[int, QuantumBucket] = {}
        self._starts: list[int] = []  # sorted open-bucket starts

    @property
    def open_count(self) -> int:
        return len(self._starts)

    def route(self, slot: StampedRecord) -> bool:
        """Place a record into its bucket; False when delinquent."""
        t = slot.epoch
        if t > self.stream_clock:
            self.stream_clock = t
        start = t - t % self.quantum
        if start < self.watermark:
            self.delinquent_count += 1
            return False
        bucket = self._buckets.get(start)
        if bucket is None:
            bucket = QuantumBucket(start, self.quantum)
            self._buckets[start] = bucket
            insort(self._starts, start)
        bucket.records.append(slot)
        return True

    def expire(self, now: int | None = None) -> list[QuantumBucket]:
        """Close every bucket the clock has passed, oldest first.

        ``now`` defaults to the stream clock; passing a wall-clock reading
        implements the idle flush.  The watermark advances to the end of
        the newest closed window and never moves backwards.
        """
        clock = self.stream_clock if now is None else now
        horizon = clock - (self.linger + 1) * self.quantum
        closed: list[QuantumBucket] = []
        while self._starts and (
            self._starts[0] <= horizon or len(self._starts) > self.max_open
        ):
            closed.append(self._close_oldest())
        return closed

    def flush(self) -> list[QuantumBucket]:
        """Close every open bucket (shutdown / idle path)."""
        closed = []
        while self._starts:
            closed.append(self._close_oldest())
        return closed

    def _close_oldest(self) -> QuantumBucket:
        start = self._starts.pop(0)
        bucket = self._buckets.pop(start)
        bucket.closed = True
        end = start + self.quantum
        if end > self.watermark:
            self.watermark = end
        return bucket


def insertion_sort(items: Sequence, key: Callable) -> list:
    """Stable insertion sort, ascending by key.

    An already-ordered input costs one comparison per element (the tail
    guard); an out-of-place element is positioned by binary search and
    spliced in, so nearly-ordered inputs stay cheap.  Ties keep arrival
    order.
    """
    keys: list = []
    out: list = []
    append_k, append_o = keys.append, out.append
    for item in items:
        k = key(item)
        if not keys or k >= keys[-1]:
            append_k(k)
            append_o(item)
        else:
            i = bisect_right(keys, k)
            keys.insert(i, k)
            out.insert(i, item)
    return out


def sort_and_store(bucket: QuantumBucket, store) -> int:
    """Sort a closed bucket by primary time and append it to the store.

    Returns the number of records appended.  Store failures propagate;
    the caller still owns the slots.
    """
    if not bucket.closed:
        raise ValueError("bucket is still open")
    if not bucket.records:
        return 0
    batch = insertion_sort(bucket.records, key=_epoch_of)
    store.append_batch(batch)
    return len(batch)


def _epoch_of(slot: StampedRecord) -> int:
    return slot.epoch
