"""Bounded queues and the record slot slab for the ingest data plane.

SpscQueue relies on the CPython GIL for atomic index updates (one producer
thread, one consumer thread, no locks on the datapath).  MpmcQueue wraps
the same ring with a mutex for the shared-socket deployment where several
receiver threads feed one ordering thread.  Enqueue never blocks: a full
queue is a counted backpressure outcome, not an error.

The Slab preallocates StampedRecord slots.  A slot has exactly one owner
at a time: the producer until it is enqueued, the consumer afterwards, and
it must be released exactly once.
"""
from __future__ import annotations

import threading
from typing import Optional

from .schema import StampedRecord


class SpscQueue:
    """Bounded single-producer/single-consumer ring buffer."""

    def __init__(self, capacity: int):
        if capacity < 2 or capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two >= 2")
        self._buf: list[object | None] = [None] * capacity
        self._mask = capacity - 1
        self._head = 0  # next slot to read (consumer-owned)
        self._tail = 0  # next slot to write (producer-owned)
        self.capacity = capacity

    def try_put(self, item) -> bool:
        tail = self._tail
        if tail - self._head > self._mask:
            return False  # full
        self._buf[tail & self._mask] = item
        self._tail = tail + 1
        return True

    def try_get(self) -> Optional[object]:
        head = self._head
        if head == self._tail:
            return None
        item = self._buf[head & self._mask]
        self._buf[head & self._mask] = None
        self._head = head + 1
        return item

    def __len__(self) -> int:
        return self._tail - self._head


class MpmcQueue:
    """Bounded multi-producer/multi-consumer queue (mutex-guarded ring)."""

    def __init__(self, capacity: int):
        if capacity < 2 or capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two >= 2")
        self._buf: list[object | None] = [None] * capacity
        self._mask = capacity - 1
        self._head = 0
        self._tail = 0
        self._lock = threading.Lock()
        self.capacity = capacity

    def try_put(self, item) -> bool:
        with self._lock:
            tail = self._tail
            if tail - self._head > self._mask:
                return False
            self._buf[tail & self._mask] = item
            self._tail = tail + 1
            return True

    def try_get(self) -> Optional[object]:
        with self._lock:
            head = self._head
            if head == self._tail:
                return None
            item = self._buf[head & self._mask]
            self._buf[head & self._mask] = None
            self._head = head + 1
            return item

    def __len__(self) -> int:
        return self._tail - self._head


class Slab:
    """Fixed pool of StampedRecord slots with a free list.

    acquire() returns None on exhaustion (the caller counts it as
    backpressure).  append/pop on the underlying list are single bytecode
    operations, so producer/consumer threads may share the slab without a
    lock under the GIL.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("slab capacity must be >= 1")
        self.capacity = capacity
        self._free: list[StampedRecord] = [StampedRecord() for _ in range(capacity)]

    def acquire(self) -> Optional[StampedRecord]:
        try:
            return self._free.pop()
        except IndexError:
            return None

    def release(self, slot: StampedRecord) -> None:
        slot.clear()
        self._free.append(slot)

    @property
    def free_count(self) -> int:
        return len(self._free)


def make_queue(capacity: int, discipline: str = "spsc"):
    if discipline == "spsc":
        return SpscQueue(capacity)
    if discipline == "mpmc":
        return MpmcQueue(capacity)
    raise ValueError(f"unknown queue discipline {discipline!r}")
