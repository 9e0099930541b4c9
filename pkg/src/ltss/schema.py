"""Record schemas, fixed-size binary layout, and the one-record datagram codec.

A schema is declared in a small line-oriented config document::

    schema taxi
    field medallion ascii:32
    field pickup_datetime time
    ...
    primary_time pickup_datetime
    quantum_ms 100          # consumed by the ordering stage
    capacity_records 100000 # consumed by the record store
    pipelines 1             # consumed by the ingest service

Records are packed little-endian in declaration order with no padding, one
record per UDP datagram.  On the wire every ``time`` field carries unsigned
epoch microseconds; in the stored form those eight bytes are rewritten to
the packed calendar word (see ctime), which is what makes calendar-field
reads a plain shift at query time.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field as dc_field
from typing import Any, Iterable, Sequence

from . import ctime

MAX_RECORD_SIZE = 512  # sensor datagrams are small; offsets assume this bound
MAX_ASCII = 256

_NUMERIC_CODES = {
    "u8": "B",
    "u16": "H",
    "u32": "I",
    "u64": "Q",
    "i64": "q",
    "f32": "f",
    "f64": "d",
    "time": "Q",
}
_SIZES = {"u8": 1, "u16": 2, "u32": 4, "u64": 8, "i64": 8, "f32": 4, "f64": 8, "time": 8}


class SchemaError(ValueError):
    """Invalid schema document or field reference."""


class MalformedDatagram(ValueError):
    """Datagram length does not match the schema record size."""


@dataclass(frozen=True)
class FieldType:
    kind: str  # u8|u16|u32|u64|i64|f32|f64|time|ascii
    size: int

    @classmethod
    def parse(cls, text: str) -> "FieldType":
        if text in _SIZES:
            return cls(text, _SIZES[text])
        if text.startswith("ascii:"):
            try:
                n = int(text.split(":", 1)[1])
            except ValueError:
                raise SchemaError(f"bad ascii width in {text!r}") from None
            if not 1 <= n <= MAX_ASCII:
                raise SchemaError(f"ascii width {n} outside 1..{MAX_ASCII}")
            return cls("ascii", n)
        raise SchemaError(f"unknown field type {text!r}")

    @property
    def struct_code(self) -> str:
        if self.kind == "ascii":
            return f"{self.size}s"
        return _NUMERIC_CODES[self.kind]


@dataclass(frozen=True)
class Field:
    name: str
    ftype: FieldType
    offset: int


class StampedRecord:
    """One record plus its primary-time keys, reusable as a slab slot.

    data holds the stored-form bytes (time fields already packed), epoch
    the primary time in epoch microseconds, ct the packed calendar word.
    """

    __slots__ = ("data", "epoch", "ct")

    def __init__(self, data: bytes = b"", epoch: int = 0, ct: int = 0):
        self.data = data
        self.epoch = epoch
        self.ct = ct

    def clear(self) -> None:
        self.data = b""
        self.epoch = 0
        self.ct = 0


class Schema:
    """Immutable record layout; decode/read operations are pure."""

    def __init__(self, name: str, fields: Sequence[tuple[str, FieldType]], time_field: str):
        if not fields:
            raise SchemaError("schema has no fields")
        seen: set[str] = set()
        offset = 0
        laid: list[Field] = []
        for fname, ftype in fields:
            key = fname.lower()
            if key in seen:
                raise SchemaError(f"duplicate field name {fname!r}")
            if key == "timestamp" or key.startswith("ctime_"):
                raise SchemaError(f"field name {fname!r} collides with a derived column")
            seen.add(key)
            laid.append(Field(fname, ftype, offset))
            offset += ftype.size
        if offset > MAX_RECORD_SIZE:
            raise SchemaError(f"record size {offset} exceeds {MAX_RECORD_SIZE} bytes")
        time_names = [f.name for f in laid if f.ftype.kind == "time"]
        if time_field not in time_names:
            raise SchemaError(f"primary_time {time_field!r} is not a time field")
        self.name = name
        self.fields: tuple[Field, ...] = tuple(laid)
        self.time_field = time_field
        self.record_size = offset
        self._by_name = {f.name.lower(): f for f in laid}
        self.time_offsets = tuple(f.offset for f in laid if f.ftype.kind == "time")
        self.primary_offset = self._by_name[time_field.lower()].offset
        self._wire_struct = struct.Struct("<" + "".join(f.ftype.struct_code for f in laid))
        self._field_structs = {
            f.name.lower(): struct.Struct("<" + f.ftype.struct_code) for f in laid
        }

    def field(self, name: str) -> Field:
        try:
            return self._by_name[name.lower()]
        except KeyError:
            raise SchemaError(f"no field {name!r} in schema {self.name!r}") from None

    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def schema_hash(self) -> bytes:
        canon = ";".join(
            [self.name.lower(), self.time_field.lower()]
            + [f"{f.name.lower()}:{f.ftype.kind}:{f.ftype.size}" for f in self.fields]
        )
        return hashlib.sha256(canon.encode()).digest()[:8]

    # -- wire codec -----------------------------------------------------

    def encode(self, values: Sequence[Any]) -> bytes:
        """Pack field values (schema order) into a wire datagram.

        Time fields take unsigned epoch microseconds; ascii fields take str
        or bytes and are NUL-padded to width.
        """
        if len(values) != len(self.fields):
            raise SchemaError(
                f"expected {len(self.fields)} values, got {len(values)}"
            )
        prepped = []
        for f, v in zip(self.fields, values):
            if f.ftype.kind == "ascii":
                raw = v.encode("ascii") if isinstance(v, str) else bytes(v)
                if len(raw) > f.ftype.size:
                    raise SchemaError(f"value too long for {f.name} ({len(raw)} bytes)")
                prepped.append(raw)
            else:
                prepped.append(v)
        return self._wire_struct.pack(*prepped)

    def decode_datagram(self, data: bytes) -> StampedRecord:
        """Validate and convert one wire datagram into stored form.

        Raises MalformedDatagram on a length mismatch and
        ctime.TimeRangeError when any time field falls outside the
        representable calendar window.
        """
        slot = StampedRecord()
        self.decode_into(slot, data)
        return slot

    def decode_into(self, slot: StampedRecord, data: bytes) -> None:
        """decode_datagram into a preallocated (slab) slot."""
        if len(data) != self.record_size:
            raise MalformedDatagram(
                f"datagram is {len(data)} bytes, schema {self.name} needs {self.record_size}"
            )
        buf = bytearray(data)
        primary_epoch = 0
        primary_ct = 0
        from_epoch = ctime.from_epoch
        for off in self.time_offsets:
            epoch = int.from_bytes(buf[off : off + 8], "little")
            ct = from_epoch(epoch)
            buf[off : off + 8] = ct.to_bytes(8, "little")
            if off == self.primary_offset:
                primary_epoch = epoch
                primary_ct = ct
        slot.data = bytes(buf)
        slot.epoch = primary_epoch
        slot.ct = primary_ct

    def read_field(self, record: bytes, name: str) -> Any:
        """Decode one field from a stored-form record.

        Time fields come back as epoch microseconds; ascii fields as str
        with trailing NULs stripped.
        """
        f = self.field(name)
        raw = self._field_structs[name.lower()].unpack_from(record, f.offset)[0]
        if f.ftype.kind == "time":
            return ctime.to_epoch_trusted(raw)
        if f.ftype.kind == "ascii":
            return raw.rstrip(b"\x00").decode("ascii", errors="replace")
        return raw

    def read_values(self, record: bytes) -> dict[str, Any]:
        return {f.name: self.read_field(record, f.name) for f in self.fields}

    def raw_field_bytes(self, data: bytes, name: str) -> bytes:
        f = self.field(name)
        return data[f.offset : f.offset + f.ftype.size]

    def to_config_text(self) -> str:
        """Render back to the config grammar (schema lines only)."""
        lines = [f"schema {self.name}"]
        for f in self.fields:
            tname = f"ascii:{f.ftype.size}" if f.ftype.kind == "ascii" else f.ftype.kind
            lines.append(f"field {f.name} {tname}")
        lines.append(f"primary_time {self.time_field}")
        return "\n".join(lines) + "\n"

    def __repr__(self) -> str:
        return f"Schema({self.name!r}, {self.record_size}B, {len(self.fields)} fields)"


@dataclass
class StoreConfig:
    """Schema plus the store/pipeline settings carried by a config document."""

    schema: Schema
    quantum_ms: int = 100
    capacity_records: int = 1_000_000
    pipelines: int = 1
    extras: dict[str, str] = dc_field(default_factory=dict)

    @property
    def quantum_us(self) -> int:
        return self.quantum_ms * 1_000


def parse_config(text: str) -> StoreConfig:
    """Parse a full schema config document (schema + store settings)."""
    name = None
    fields: list[tuple[str, FieldType]] = []
    primary: str | None = None
    primaries = 0
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kw = parts[0].lower()
        try:
            if kw == "schema" and len(parts) == 2:
                name = parts[1]
            elif kw == "field" and len(parts) == 3:
                fields.append((parts[1], FieldType.parse(parts[2])))
            elif kw == "primary_time" and len(parts) == 2:
                primary = parts[1]
                primaries += 1
            elif kw in ("quantum_ms", "capacity_records", "pipelines") and len(parts) == 2:
                settings[kw] = parts[1]
            else:
                raise SchemaError(f"unrecognized directive {raw.strip()!r}")
        except SchemaError as e:
            raise SchemaError(f"line {lineno}: {e}") from None
    if name is None:
        raise SchemaError("missing 'schema <name>' line")
    if primaries == 0:
        raise SchemaError("missing 'primary_time' line")
    if primaries > 1:
        raise SchemaError("multiple primary_time declarations")
    assert primary is not None
    schema = Schema(name, fields, primary)
    cfg = StoreConfig(schema=schema)
    if "quantum_ms" in settings:
        cfg.quantum_ms = _positive_int(settings["quantum_ms"], "quantum_ms")
    if "capacity_records" in settings:
        cfg.capacity_records = _positive_int(settings["capacity_records"], "capacity_records")
    if "pipelines" in settings:
        cfg.pipelines = _positive_int(settings["pipelines"], "pipelines")
    return cfg


def parse_schema(text: str) -> Schema:
    """Parse a config document, returning just the validated Schema."""
    return parse_config(text).schema


def _positive_int(value: str, what: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise SchemaError(f"{what} must be an integer, got {value!r}") from None
    if n < 1:
        raise SchemaError(f"{what} must be >= 1")
    return n


def encode_rows(schema: Schema, rows: Iterable[Sequence[Any]]) -> list[bytes]:
    return [schema.encode(r) for r in rows]
