"""Queue discipline and slab ownership tests."""
from __future__ import annotations

import threading

import pytest

from ltss.queues import MpmcQueue, Slab, SpscQueue, make_queue


@pytest.mark.parametrize("cls", [SpscQueue, MpmcQueue])
def test_put_get_single(cls):
    q = cls(8)
    assert q.try_put("a")
    assert q.try_get() == "a"
    assert q.try_get() is None


@pytest.mark.parametrize("cls", [SpscQueue, MpmcQueue])
def test_bounded_rejects_when_full(cls):
    q = cls(4)
    for i in range(4):
        assert q.try_put(i)
    assert not q.try_put(99)
    assert len(q) == 4
    assert q.try_get() == 0
    assert q.try_put(99)


@pytest.mark.parametrize("cls", [SpscQueue, MpmcQueue])
def test_capacity_must_be_power_of_two(cls):
    with pytest.raises(ValueError):
        cls(6)
    with pytest.raises(ValueError):
        cls(1)


def test_fifo_order_across_threads():
    q = SpscQueue(1024)
    n = 10_000
    got: list[int] = []

    def consume():
        while len(got) < n:
            item = q.try_get()
            if item is not None:
                got.append(item)

    t = threading.Thread(target=consume)
    t.start()
    i = 1
    while i <= n:
        if q.try_put(i):
            i += 1
    t.join()
    assert got == list(range(1, n + 1))


def test_mpmc_multiple_producers_no_loss():
    q = MpmcQueue(2048)
    per_producer = 5_000
    got: list[int] = []
    done = threading.Event()

    def produce(base):
        i = 0
        while i < per_producer:
            if q.try_put(base + i):
                i += 1

    def consume():
        while not done.is_set() or len(q):
            item = q.try_get()
            if item is not None:
                got.append(item)

    c = threading.Thread(target=consume)
    c.start()
    producers = [threading.Thread(target=produce, args=(k * per_producer,)) for k in range(3)]
    for p in producers:
        p.start()
    for p in producers:
        p.join()
    done.set()
    c.join()
    assert sorted(got) == list(range(3 * per_producer))


def test_slab_exhaustion_and_release():
    slab = Slab(4)
    slots = [slab.acquire() for _ in range(4)]
    assert all(s is not None for s in slots)
    assert slab.acquire() is None
    assert slab.free_count == 0
    for s in slots:
        s.data = b"xyz"
        slab.release(s)
    assert slab.free_count == 4
    s = slab.acquire()
    assert s.data == b""  # cleared on release


def test_make_queue_dispatch():
    assert isinstance(make_queue(8, "spsc"), SpscQueue)
    assert isinstance(make_queue(8, "mpmc"), MpmcQueue)
    with pytest.raises(ValueError):
        make_queue(8, "weird")
