"""UDP ingest service: receivers, per-pipeline ordering and store writers.

Datagrams are partitioned across N independent pipelines.  Two partition
modes exist: ``hash`` (one shared socket; a hash of a configured key field
or of the sender address picks the pipeline; queues run MPMC) and
``ports`` (one socket per pipeline on consecutive ports, so the OS does
the partitioning and each queue stays strictly SPSC).

Per pipeline the flow is::

    receiver thread -> bounded queue -> ordering thread -> sorter thread

The receiver decodes (which converts epoch to composite time exactly once,
at ingest) into a slab slot and enqueues the slot; a full queue or an
exhausted slab is a counted backpressure drop, never a block.  The
ordering thread buckets records and hands expired buckets to the sorter,
which insertion-sorts and appends to that pipeline's store segment - the
only writer that segment ever sees.  Each counter is owned by exactly one
thread, so the datapath takes no locks.
"""
from __future__ import annotations

import socket
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import ctime
from .ordering import OrderingState, sort_and_store
from .queues import Slab, make_queue
from .query import LogicalTable
from .schema import MalformedDatagram, Schema
from .store import StoreSegment

SO_RCVBUFFORCE = 33  # linux; falls back to SO_RCVBUF when unavailable

DEFAULT_QUEUE_CAPACITY = 65536
DEFAULT_PORT = 4510


@dataclass
class PipelineConfig:
    pipelines: int = 1
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    slab_capacity: int = 0  # 0 -> 2x queue_capacity
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    mode: str = "hash"  # hash | ports
    partition_field: Optional[str] = None  # fallback: sender address
    quantum_us: int = 100_000
    linger: int = 2
    max_open: int = 16
    idle_flush_us: int = 250_000
    recv_buffer: int = 1 << 26
    snapshot_path: Optional[str] = None  # per-pipeline suffix .p<i> added
    snapshot_every_batches: int = 1024

    def __post_init__(self):
        if self.pipelines < 1:
            raise ValueError("pipelines must be >= 1")
        if self.mode not in ("hash", "ports"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.slab_capacity == 0:
            self.slab_capacity = 2 * self.queue_capacity
        if self.queue_capacity > self.slab_capacity:
            raise ValueError("queue_capacity must not exceed slab_capacity")


@dataclass
class IngestCounters:
    received: int = 0
    malformed: int = 0
    out_of_range: int = 0
    delinquent: int = 0
    stored: int = 0
    dropped_backpressure: int = 0

    def __add__(self, other: "IngestCounters") -> "IngestCounters":
        return IngestCounters(
            self.received + other.received,
            self.malformed + other.malformed,
            self.out_of_range + other.out_of_range,
            self.delinquent + other.delinquent,
            self.stored + other.stored,
            self.dropped_backpressure + other.dropped_backpressure,
        )

    def conserved(self) -> bool:
        return self.received == (
            self.malformed
            + self.out_of_range
            + self.delinquent
            + self.stored
            + self.dropped_backpressure
        )

    def as_dict(self) -> dict:
        return {
            "received": self.received,
            "malformed": self.malformed,
            "out_of_range": self.out_of_range,
            "delinquent": self.delinquent,
            "stored": self.stored,
            "dropped_backpressure": self.dropped_backpressure,
        }


def partition_of(
    schema: Schema,
    config: PipelineConfig,
    data: bytes,
    sender: Optional[tuple] = None,
) -> int:
    """Deterministic pipeline assignment for one datagram.

    Hashes the configured key field's raw bytes; falls back to the sender
    address when no key field is configured.
    """
    n = config.pipelines
    if n == 1:
        return 0
    if config.partition_field:
        f = schema.field(config.partition_field)
        key = data[f.offset : f.offset + f.ftype.size]
    else:
        key = repr(sender).encode()
    return zlib.crc32(key) % n


class _PipelineState:
    __slots__ = ("queue", "slab", "ordering", "bucket_queue", "store", "stored", "batches")

    def __init__(self, queue, slab, ordering, bucket_queue, store):
        self.queue = queue
        self.slab = slab
        self.ordering = ordering
        self.bucket_queue = bucket_queue
        self.store = store
        self.stored = 0
        self.batches = 0


class _ReceiverCounters:
    __slots__ = ("received", "malformed", "out_of_range", "dropped")

    def __init__(self):
        self.received = 0
        self.malformed = 0
        self.out_of_range = 0
        self.dropped = 0


class IngestService:
    """Wires sockets, queues, ordering and stores into a running ingest."""

    def __init__(
        self,
        schema: Schema,
        config: PipelineConfig,
        stores: Sequence[StoreSegment],
    ):
        if len(stores) != config.pipelines:
            raise ValueError(
                f"{config.pipelines} pipelines need {config.pipelines} stores, "
                f"got {len(stores)}"
            )
        self.schema = schema
        self.config = config
        self.stores = list(stores)
        discipline = "mpmc" if config.mode == "hash" else "spsc"
        self.pipes = [
            _PipelineState(
                make_queue(config.queue_capacity, discipline),
                Slab(config.slab_capacity),
                OrderingState(config.quantum_us, config.linger, config.max_open),
                make_queue(256, "spsc"),
                store,
            )
            for store in stores
        ]
        self._rx_counters: list[_ReceiverCounters] = []
        self._sockets: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._rx_stop = threading.Event()
        self._ordering_stop = threading.Event()
        self._sorter_stop = threading.Event()
        self._started = False

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "IngestService":
        cfg = self.config
        if cfg.mode == "hash":
            sock = self._bind(cfg.host, cfg.port)
            self._sockets.append(sock)
            for i in range(cfg.pipelines):
                rc = _ReceiverCounters()
                self._rx_counters.append(rc)
                self._spawn(self._receive_hash, f"rx{i}", sock, rc)
        else:
            for i in range(cfg.pipelines):
                sock = self._bind(cfg.host, cfg.port + i)
                self._sockets.append(sock)
                rc = _ReceiverCounters()
                self._rx_counters.append(rc)
                self._spawn(self._receive_fixed, f"rx{i}", sock, i, rc)
        for i, pipe in enumerate(self.pipes):
            self._spawn(self._ordering_loop, f"order{i}", pipe)
            self._spawn(self._sorter_loop, f"sort{i}", pipe, i)
        self._started = True
        return self

    def _bind(self, host: str, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.setsockopt(socket.SOL_SOCKET, SO_RCVBUFFORCE, self.config.recv_buffer)
        except OSError:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self.config.recv_buffer)
        sock.bind((host, port))
        sock.settimeout(0.2)
        return sock

    def _spawn(self, fn, name, *args) -> None:
        t = threading.Thread(target=fn, args=args, name=f"ltss-{name}", daemon=True)
        t.start()
        self._threads.append(t)

    def stop_and_flush(self) -> IngestCounters:
        """Drain everything in flight, stop all threads, return counters.

        After this returns the conservation equation holds and every slab
        slot is back on its free list.
        """
        self._rx_stop.set()
        self._join(prefix="ltss-rx")
        self._ordering_stop.set()
        self._join(prefix="ltss-order")
        self._sorter_stop.set()
        self._join(prefix="ltss-sort")
        for sock in self._sockets:
            sock.close()
        self._sockets.clear()
        return self.counters()

    def counters(self) -> IngestCounters:
        c = IngestCounters()
        for rc in self._rx_counters:
            c.received += rc.received
            c.malformed += rc.malformed
            c.out_of_range += rc.out_of_range
            c.dropped_backpressure += rc.dropped
        for pipe in self.pipes:
            c.delinquent += pipe.ordering.delinquent_count
            c.stored += pipe.stored
        return c

    def logical_table(self) -> LogicalTable:
        return LogicalTable(self.schema.name, self.schema, self.stores)

    def slab_free_counts(self) -> list[int]:
        return [p.slab.free_count for p in self.pipes]

    def _join(self, prefix: str) -> None:
        for t in self._threads:
            if t.name.startswith(prefix):
                t.join()

    # -- thread bodies -------------------------------------------------------

    def _receive_hash(self, sock: socket.socket, rc: _ReceiverCounters) -> None:
        cfg = self.config
        schema = self.schema
        record_size = schema.record_size
        pipes = self.pipes
        n = cfg.pipelines
        key_slice = None
        if cfg.partition_field:
            f = schema.field(cfg.partition_field)
            key_slice = (f.offset, f.offset + f.ftype.size)
        stop = self._rx_stop
        decode = schema.decode_into
        crc32 = zlib.crc32
        while not stop.is_set():
            try:
                data, addr = sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            rc.received += 1
            if len(data) != record_size:
                rc.malformed += 1
                continue
            if n == 1:
                p = 0
            elif key_slice is not None:
                p = crc32(data[key_slice[0] : key_slice[1]]) % n
            else:
                p = crc32(repr(addr).encode()) % n
            pipe = pipes[p]
            slot = pipe.slab.acquire()
            if slot is None:
                rc.dropped += 1
                continue
            try:
                decode(slot, data)
            except ctime.TimeRangeError:
                rc.out_of_range += 1
                pipe.slab.release(slot)
                continue
            except MalformedDatagram:
                rc.malformed += 1
                pipe.slab.release(slot)
                continue
            if not pipe.queue.try_put(slot):
                pipe.slab.release(slot)
                rc.dropped += 1

    def _receive_fixed(self, sock: socket.socket, p: int, rc: _ReceiverCounters) -> None:
        record_size = self.schema.record_size
        pipe = self.pipes[p]
        stop = self._rx_stop
        decode = self.schema.decode_into
        while not stop.is_set():
            try:
                data, _ = sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            rc.received += 1
            if len(data) != record_size:
                rc.malformed += 1
                continue
            slot = pipe.slab.acquire()
            if slot is None:
                rc.dropped += 1
                continue
            try:
                decode(slot, data)
            except ctime.TimeRangeError:
                rc.out_of_range += 1
                pipe.slab.release(slot)
                continue
            except MalformedDatagram:
                rc.malformed += 1
                pipe.slab.release(slot)
                continue
            if not pipe.queue.try_put(slot):
                pipe.slab.release(slot)
                rc.dropped += 1

    def _ordering_loop(self, pipe: _PipelineState) -> None:
        state = pipe.ordering
        queue = pipe.queue
        slab = pipe.slab
        bq = pipe.bucket_queue
        stop = self._ordering_stop
        idle_flush_s = self.config.idle_flush_us / 1e6
        last_activity = time.monotonic()
        while True:
            slot = queue.try_get()
            if slot is None:
                if stop.is_set():
                    break
                now = time.monotonic()
                if state.open_count and now - last_activity > idle_flush_s:
                    for bucket in state.flush():
                        self._hand_off(bq, bucket)
                    last_activity = now
                time.sleep(0.0002)
                continue
            last_activity = time.monotonic()
            if not state.route(slot):
                slab.release(slot)  # delinquent
            for bucket in state.expire():
                self._hand_off(bq, bucket)
        # drain: receivers are already stopped, queue can only shrink
        while True:
            slot = queue.try_get()
            if slot is None:
                break
            if not state.route(slot):
                slab.release(slot)
        for bucket in state.expire():
            self._hand_off(bq, bucket)
        for bucket in state.flush():
            self._hand_off(bq, bucket)

    def _hand_off(self, bucket_queue, bucket) -> None:
        while not bucket_queue.try_put(bucket):
            time.sleep(0.0005)  # sorter is momentarily behind

    def _sorter_loop(self, pipe: _PipelineState, pidx: int) -> None:
        bq = pipe.bucket_queue
        store = pipe.store
        slab = pipe.slab
        stop = self._sorter_stop
        cfg = self.config
        while True:
            bucket = bq.try_get()
            if bucket is None:
                if stop.is_set():
                    break
                time.sleep(0.0002)
                continue
            n = sort_and_store(bucket, store)
            pipe.stored += n
            for slot in bucket.records:
                slab.release(slot)
            bucket.records.clear()
            pipe.batches += 1
            if (
                cfg.snapshot_path
                and store.index is not None
                and pipe.batches % cfg.snapshot_every_batches == 0
            ):
                store.index.snapshot(f"{cfg.snapshot_path}.p{pidx}")
        # final drain after ordering threads finished
        while True:
            bucket = bq.try_get()
            if bucket is None:
                break
            n = sort_and_store(bucket, store)
            pipe.stored += n
            for slot in bucket.records:
                slab.release(slot)
            bucket.records.clear()
            pipe.batches += 1
        if cfg.snapshot_path and store.index is not None:
            store.index.snapshot(f"{cfg.snapshot_path}.p{pidx}")
