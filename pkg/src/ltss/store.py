"""Append-only, time-ordered record log with rolling checksummed metadata.

On-disk layout, all regions 4096-aligned and little-endian::

    [header 4096B][metadata copy 0..N-1, 4096B each][log region]

The log holds fixed-size records back to back; when capacity is exhausted
the head wraps and the oldest records are overwritten.  Each append batch
updates exactly one metadata copy (round-robin by generation) after the
record bytes are flushed, so a crash loses at most the one unacknowledged
batch.  Recovery picks the checksum-valid copy with the highest
generation.

Single writer, many readers: the writer only ever touches bytes at the
head, so readers validate an index against the live window before and
after copying it out and retry/skip on conflict instead of locking.
"""
from __future__ import annotations

import mmap
import os
import struct
import time
import zlib
from collections import deque
from typing import Callable, Iterator, Optional, Sequence

from . import ctime
from .schema import Schema, SchemaError, StampedRecord, parse_schema

BLOCK = 4096
MAGIC_HEADER = b"LTSS"
MAGIC_META = b"LTSM"
FORMAT_VERSION = 1
DEFAULT_ROLLING = 3  # metadata copies

_HEADER = struct.Struct("<4sB3xIIQII8sQQH")
_META = struct.Struct("<4sB3xQQB7xQI4x8sQQ")
_CRC_AT = BLOCK - 4
_MAX_SCHEMA_TEXT = BLOCK - _HEADER.size - 8


class StoreError(Exception):
    """Store-level failure (I/O, format, precondition)."""


class CorruptStore(StoreError):
    """No usable metadata copy or a mangled header."""


class ReadOutOfWindow(StoreError):
    """Requested record index is not (or no longer) in the live window."""


class StoreSegment:
    """One append-only log file plus its in-memory state."""

    def __init__(self):  # use create()/recover()
        self.path = ""
        self.schema: Optional[Schema] = None
        self.record_size = 0
        self.primary_offset = 0
        self.capacity = 0
        self.rolling_count = DEFAULT_ROLLING
        self.schema_hash = b"\x00" * 8
        self.log_offset = 0
        self.log_length = 0
        self.total = 0  # records ever appended (monotone)
        self.generation = 0
        self.min_time = 0  # oldest live record, epoch us
        self.max_time = 0  # newest record, epoch us
        self.durable = True
        self.read_count = 0  # statistics: records served from the log
        self.index = None  # optional DirectoryIndex, duck-typed
        self.on_commit: list[Callable[[int], None]] = []
        self.commit_history: deque | None = None
        self._fd = -1
        self._mm: Optional[mmap.mmap] = None

    # -- construction ----------------------------------------------------

    @classmethod
    def create(
        cls,
        path: str,
        schema: Schema,
        capacity_records: int,
        rolling_count: int = DEFAULT_ROLLING,
        durable: bool = True,
    ) -> "StoreSegment":
        if capacity_records < 1:
            raise StoreError("capacity_records must be >= 1")
        if rolling_count < 1:
            raise StoreError("rolling_count must be >= 1")
        st = cls()
        st.path = path
        st.schema = schema
        st.record_size = schema.record_size
        st.primary_offset = schema.primary_offset
        st.capacity = capacity_records
        st.rolling_count = rolling_count
        st.schema_hash = schema.schema_hash
        st.log_offset = BLOCK * (1 + rolling_count)
        log_bytes = capacity_records * schema.record_size
        st.log_length = (log_bytes + BLOCK - 1) // BLOCK * BLOCK
        st.durable = durable
        st._fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        os.ftruncate(st._fd, st.log_offset + st.log_length)
        st._mm = mmap.mmap(st._fd, st.log_offset + st.log_length)
        st._write_header()
        for _ in range(rolling_count):
            st._write_metadata()
        if durable:
            os.fsync(st._fd)
        return st

    @classmethod
    def recover(
        cls, path: str, schema: Optional[Schema] = None, durable: bool = True
    ) -> "StoreSegment":
        st = cls()
        st.path = path
        st.durable = durable
        st._fd = os.open(path, os.O_RDWR)
        size = os.fstat(st._fd).st_size
        if size < 2 * BLOCK:
            os.close(st._fd)
            raise CorruptStore(f"{path}: too small to hold a store")
        st._mm = mmap.mmap(st._fd, size)
        st._read_header()
        if schema is not None:
            if schema.schema_hash != st.schema_hash:
                st.close()
                raise SchemaError(f"{path}: schema hash mismatch")
            st.schema = schema
        best = None
        for copy in range(st.rolling_count):
            meta = st._read_metadata(copy)
            if meta is not None and (best is None or meta[0] > best[0]):
                best = meta
        if best is None:
            st.close()
            raise CorruptStore(f"{path}: no checksum-valid metadata copy")
        st.generation, st.total, st.min_time, st.max_time = best
        return st

    # -- geometry ---------------------------------------------------------

    @property
    def head(self) -> int:
        """Next physical slot to be written."""
        return self.total % self.capacity if self.capacity else 0

    @property
    def wrapped(self) -> bool:
        return self.total > self.capacity

    @property
    def live_count(self) -> int:
        return min(self.total, self.capacity)

    def live_window(self) -> tuple[int, int]:
        """Absolute [oldest, newest+1) record indices currently readable."""
        total = self.total
        lo = total - self.capacity
        return (lo if lo > 0 else 0, total)

    def _slot_offset(self, index: int) -> int:
        return self.log_offset + (index % self.capacity) * self.record_size

    # -- writer side -------------------------------------------------------

    def append_batch(self, batch: Sequence[StampedRecord]) -> int:
        """Append a time-sorted batch; returns the first assigned index.

        The batch must be non-decreasing in primary time and start at or
        after the newest stored record.  One metadata copy is written (and
        flushed when durable) before the call returns.
        """
        mm = self._mm
        if mm is None:
            raise StoreError("store is closed")
        n = len(batch)
        first = self.total
        if n == 0:
            return first
        prev = self.max_time if self.total else 0
        rsz = self.record_size
        for slot in batch:
            if slot.epoch < prev:
                raise StoreError(
                    f"batch not time-ordered: {slot.epoch} after {prev}"
                )
            prev = slot.epoch
            if len(slot.data) != rsz:
                raise StoreError(
                    f"record is {len(slot.data)} bytes, store takes {rsz}"
                )
        # write in at most ceil(n/capacity)+1 contiguous runs across the wrap
        cap = self.capacity
        pos = 0
        touched: list[tuple[int, int]] = []
        while pos < n:
            slot_idx = (first + pos) % cap
            run = min(cap - slot_idx, n - pos)
            off = self.log_offset + slot_idx * rsz
            mm[off : off + run * rsz] = b"".join(s.data for s in batch[pos : pos + run])
            touched.append((off, run * rsz))
            pos += run
        if self.durable:
            for off, length in touched:
                self._flush_range(off, length)
        self.total = first + n
        self.max_time = batch[-1].epoch
        lo, _ = self.live_window()
        if lo > 0:  # wrapped: oldest live record moved
            self.min_time = self._primary_epoch_raw(lo)
        elif first == 0:
            self.min_time = batch[0].epoch
        if self.index is not None:
            self.index.extend(first, batch)
            self.index.publish()
        self._write_metadata()
        if self.commit_history is not None:
            self.commit_history.append(
                (time.time_ns() // 1_000, first, n, batch[0].epoch, batch[-1].epoch)
            )
        for hook in self.on_commit:
            hook(self.total)
        return first

    # -- reader side -------------------------------------------------------

    def read_at(self, index: int) -> bytes:
        """Record bytes at an absolute index within the live window."""
        mm = self._mm
        if mm is None:
            raise StoreError("store is closed")
        lo, hi = self.live_window()
        if not lo <= index < hi:
            raise ReadOutOfWindow(f"record {index} outside live window [{lo},{hi})")
        off = self._slot_offset(index)
        data = bytes(mm[off : off + self.record_size])
        self.read_count += 1
        if index < self.total - self.capacity:  # overwritten mid-read
            raise ReadOutOfWindow(f"record {index} overwritten during read")
        return data

    def primary_ct_at(self, index: int) -> int:
        """Packed composite time of one live record (no full copy)."""
        lo, hi = self.live_window()
        if not lo <= index < hi:
            raise ReadOutOfWindow(f"record {index} outside live window [{lo},{hi})")
        ct = self._primary_ct_raw(index)
        if index < self.total - self.capacity:
            raise ReadOutOfWindow(f"record {index} overwritten during read")
        return ct

    def primary_epoch_at(self, index: int) -> int:
        return ctime.to_epoch_trusted(self.primary_ct_at(index))

    def _primary_ct_raw(self, index: int) -> int:
        off = self._slot_offset(index) + self.primary_offset
        return int.from_bytes(self._mm[off : off + 8], "little")

    def _primary_epoch_raw(self, index: int) -> int:
        return ctime.to_epoch_trusted(self._primary_ct_raw(index))

    def iter_live(self) -> Iterator[tuple[int, bytes]]:
        """(absolute index, record bytes), oldest to newest, skipping
        records that roll over mid-iteration."""
        lo, hi = self.live_window()
        for i in range(lo, hi):
            try:
                yield i, self.read_at(i)
            except ReadOutOfWindow:
                continue

    # -- persistence internals ----------------------------------------------

    def _write_header(self) -> None:
        schema_text = self.schema.to_config_text().encode() if self.schema else b""
        if len(schema_text) > _MAX_SCHEMA_TEXT:
            raise StoreError("schema config text too large for header block")
        block = bytearray(BLOCK)
        _HEADER.pack_into(
            block,
            0,
            MAGIC_HEADER,
            FORMAT_VERSION,
            self.record_size,
            self.primary_offset,
            self.capacity,
            self.rolling_count,
            0,
            self.schema_hash,
            self.log_offset,
            self.log_length,
            len(schema_text),
        )
        block[_HEADER.size : _HEADER.size + len(schema_text)] = schema_text
        self._mm[0:BLOCK] = bytes(block)
        if self.durable:
            self._flush_range(0, BLOCK)

    def _read_header(self) -> None:
        raw = self._mm[0:BLOCK]
        (
            magic,
            version,
            record_size,
            primary_offset,
            capacity,
            rolling,
            _reserved,
            schema_hash,
            log_offset,
            log_length,
            text_len,
        ) = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC_HEADER:
            raise CorruptStore(f"{self.path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CorruptStore(f"{self.path}: unsupported format version {version}")
        self.record_size = record_size
        self.primary_offset = primary_offset
        self.capacity = capacity
        self.rolling_count = rolling
        self.schema_hash = schema_hash
        self.log_offset = log_offset
        self.log_length = log_length
        text = raw[_HEADER.size : _HEADER.size + text_len].decode()
        if text:
            self.schema = parse_schema(text)

    def _write_metadata(self) -> None:
        gen = self.generation + 1
        copy = gen % self.rolling_count
        block = bytearray(BLOCK)
        _META.pack_into(
            block,
            0,
            MAGIC_META,
            FORMAT_VERSION,
            gen,
            self.head,
            1 if self.wrapped else 0,
            self.total,
            self.record_size,
            self.schema_hash,
            self.min_time,
            self.max_time,
        )
        struct.pack_into("<I", block, _CRC_AT, zlib.crc32(bytes(block[:_CRC_AT])))
        off = BLOCK * (1 + copy)
        self._mm[off : off + BLOCK] = bytes(block)
        if self.durable:
            self._flush_range(off, BLOCK)
        self.generation = gen

    def _read_metadata(self, copy: int) -> Optional[tuple[int, int, int, int]]:
        """(generation, total, min_time, max_time) or None when invalid."""
        off = BLOCK * (1 + copy)
        block = self._mm[off : off + BLOCK]
        (want_crc,) = struct.unpack_from("<I", block, _CRC_AT)
        if zlib.crc32(block[:_CRC_AT]) != want_crc:
            return None
        (
            magic,
            version,
            gen,
            _head,
            _wrapped,
            total,
            record_size,
            schema_hash,
            min_time,
            max_time,
        ) = _META.unpack_from(block, 0)
        if magic != MAGIC_META or version != FORMAT_VERSION:
            return None
        if record_size != self.record_size or schema_hash != self.schema_hash:
            return None
        return gen, total, min_time, max_time

    def _flush_range(self, offset: int, length: int) -> None:
        page = mmap.PAGESIZE
        start = offset - offset % page
        end = offset + length
        end += (-end) % page
        self._mm.flush(start, min(end, len(self._mm)) - start)

    def track_commits(self, depth: int = 4096) -> None:
        """Record (wall_us, first, count, min_t, max_t) per batch."""
        self.commit_history = deque(maxlen=depth)

    def close(self) -> None:
        if self._mm is not None:
            if self.durable:
                self._mm.flush()
            self._mm.close()
            self._mm = None
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self) -> "StoreSegment":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return (
            f"StoreSegment({self.path!r}, total={self.total}, cap={self.capacity}, "
            f"gen={self.generation})"
        )
