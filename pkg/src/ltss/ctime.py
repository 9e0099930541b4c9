"""Bit-packed calendar timestamps with microsecond precision.

A packed timestamp is a plain ``int`` holding twelve bit fields in one
64-bit word (written little-endian on disk).  Calendar fields sit at fixed
bit offsets so that extraction is a shift plus a mask, and so that the low
54 bits (usec up through year) compare in chronological order.

Field layout, least-significant bit first::

    usec:20  sec:6  min:6  hour:5  wday:3  day:5  month:4  year:5
    timezone:5  pm:1  dls:1  reserved:3

``year`` is stored as an offset from 2000 (valid calendar years 2000-2031),
``month`` is 1-12, ``day`` is 1-31 and ``wday`` is 0-6 with 0 = Sunday.
``pm`` is derived (hour >= 12) and never independently settable.
``timezone`` and ``dls`` are stored but inert: every value is UTC, so both
are always zero.
"""
from __future__ import annotations

import re
from typing import NamedTuple

USEC_SHIFT, USEC_BITS = 0, 20
SEC_SHIFT, SEC_BITS = 20, 6
MIN_SHIFT, MIN_BITS = 26, 6
HOUR_SHIFT, HOUR_BITS = 32, 5
WDAY_SHIFT, WDAY_BITS = 37, 3
DAY_SHIFT, DAY_BITS = 40, 5
MONTH_SHIFT, MONTH_BITS = 45, 4
YEAR_SHIFT, YEAR_BITS = 49, 5
TZ_SHIFT, TZ_BITS = 54, 5
PM_SHIFT = 59
DLS_SHIFT = 60

# Bits usec..year; masking these out of the word yields a chronological
# sort key (wday sits between hour and day but is constant for any fixed
# calendar date, so it never perturbs the order).
SORT_MASK = (1 << 54) - 1

PACKED_BYTES = 8

FIELD_SHIFTS = {
    "usec": (USEC_SHIFT, (1 << USEC_BITS) - 1),
    "sec": (SEC_SHIFT, (1 << SEC_BITS) - 1),
    "min": (MIN_SHIFT, (1 << MIN_BITS) - 1),
    "hour": (HOUR_SHIFT, (1 << HOUR_BITS) - 1),
    "wday": (WDAY_SHIFT, (1 << WDAY_BITS) - 1),
    "day": (DAY_SHIFT, (1 << DAY_BITS) - 1),
    "month": (MONTH_SHIFT, (1 << MONTH_BITS) - 1),
    "year": (YEAR_SHIFT, (1 << YEAR_BITS) - 1),
}

#: Epoch microseconds of 2000-01-01T00:00:00Z (inclusive lower bound).
EPOCH_MIN = 946_684_800_000_000
#: Epoch microseconds of 2032-01-01T00:00:00Z (exclusive upper bound).
EPOCH_MAX = 1_956_528_000_000_000

_DAYS_IN_MONTH = (0, 31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)


class TimeRangeError(ValueError):
    """Instant falls outside the representable 2000-2031 window."""


class InvalidTimeFields(ValueError):
    """Packed fields do not form a consistent calendar instant."""


class TimeFields(NamedTuple):
    usec: int
    sec: int
    min: int
    hour: int
    wday: int
    day: int
    month: int
    year: int  # offset from 2000
    timezone: int
    pm: int
    dls: int


def _is_leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def days_in_month(year: int, month: int) -> int:
    """Day count for a calendar (not offset) year and 1-based month."""
    if month == 2 and _is_leap(year):
        return 29
    return _DAYS_IN_MONTH[month]


def _civil_from_days(days: int) -> tuple[int, int, int]:
    # Proleptic Gregorian date from days since 1970-01-01 (era arithmetic).
    z = days + 719468
    era = z // 146097
    doe = z - era * 146097
    yoe = (doe - doe // 1460 + doe // 36524 - doe // 146096) // 365
    y = yoe + era * 400
    doy = doe - (365 * yoe + yoe // 4 - yoe // 100)
    mp = (5 * doy + 2) // 153
    d = doy - (153 * mp + 2) // 5 + 1
    m = mp + 3 if mp < 10 else mp - 9
    if m <= 2:
        y += 1
    return y, m, d


def _days_from_civil(y: int, m: int, d: int) -> int:
    # Inverse of _civil_from_days.
    y -= m <= 2
    era = y // 400
    yoe = y - era * 400
    doy = (153 * (m - 3 if m > 2 else m + 9) + 2) // 5 + d - 1
    doe = yoe * 365 + yoe // 4 - yoe // 100 + doy
    return era * 146097 + doe - 719468


# Streaming data repeats the same second many times over; remember the last
# converted second so the common case is one mask and one or.
_second_cache: tuple[int, int] = (-1, 0)


def from_epoch(epoch_us: int) -> int:
    """Convert unsigned epoch microseconds to a packed calendar word.

    Raises TimeRangeError unless the instant falls in calendar years
    2000-2031 UTC.
    """
    global _second_cache
    if not EPOCH_MIN <= epoch_us < EPOCH_MAX:
        raise TimeRangeError(f"epoch {epoch_us} outside 2000-2031 window")
    usec = epoch_us % 1_000_000
    s = epoch_us // 1_000_000
    cached_s, base = _second_cache
    if s == cached_s:
        return base | usec
    days, sod = divmod(s, 86_400)
    hour, rem = divmod(sod, 3_600)
    minute, sec = divmod(rem, 60)
    wday = (days + 4) % 7  # 1970-01-01 was a Thursday; Sunday = 0
    y, m, d = _civil_from_days(days)
    base = (
        (sec << SEC_SHIFT)
        | (minute << MIN_SHIFT)
        | (hour << HOUR_SHIFT)
        | (wday << WDAY_SHIFT)
        | (d << DAY_SHIFT)
        | (m << MONTH_SHIFT)
        | ((y - 2000) << YEAR_SHIFT)
        | ((1 if hour >= 12 else 0) << PM_SHIFT)
    )
    _second_cache = (s, base)
    return base | usec


def to_epoch(ct: int) -> int:
    """Inverse of from_epoch; validates field consistency first.

    Raises InvalidTimeFields for impossible combinations (Feb 30, a wday
    that contradicts the date, a pm bit that contradicts the hour, ...).
    """
    f = fields(ct)
    if f.sec > 59 or f.min > 59 or f.hour > 23:
        raise InvalidTimeFields(f"time-of-day fields out of range: {f}")
    if not 1 <= f.month <= 12:
        raise InvalidTimeFields(f"month {f.month} out of range")
    year = 2000 + f.year
    if not 1 <= f.day <= days_in_month(year, f.month):
        raise InvalidTimeFields(f"day {f.day} invalid for {year}-{f.month:02d}")
    days = _days_from_civil(year, f.month, f.day)
    if f.wday != (days + 4) % 7:
        raise InvalidTimeFields(f"wday {f.wday} inconsistent with date")
    if f.pm != (1 if f.hour >= 12 else 0):
        raise InvalidTimeFields(f"pm bit inconsistent with hour {f.hour}")
    return ((days * 86_400 + f.hour * 3_600 + f.min * 60 + f.sec) * 1_000_000) + f.usec


def to_epoch_trusted(ct: int) -> int:
    """to_epoch without validation, for values produced by from_epoch."""
    days = _days_from_civil(
        2000 + ((ct >> YEAR_SHIFT) & 31), (ct >> MONTH_SHIFT) & 15, (ct >> DAY_SHIFT) & 31
    )
    sod = (
        ((ct >> HOUR_SHIFT) & 31) * 3_600
        + ((ct >> MIN_SHIFT) & 63) * 60
        + ((ct >> SEC_SHIFT) & 63)
    )
    return (days * 86_400 + sod) * 1_000_000 + (ct & 0xFFFFF)


_ISO_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[T ](\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,6}))?Z?$"
)


def from_iso8601(text: str) -> int:
    """Parse ``YYYY-MM-DDTHH:MM:SS[.ffffff]Z`` (UTC) to a packed word.

    Equals from_epoch of the same instant by construction.
    """
    m = _ISO_RE.match(text.strip())
    if m is None:
        raise ValueError(f"unparseable timestamp: {text!r}")
    y, mo, d, h, mi, s = (int(g) for g in m.groups()[:6])
    frac = m.group(7)
    usec = int(frac.ljust(6, "0")) if frac else 0
    if not 2000 <= y <= 2031:
        raise TimeRangeError(f"year {y} outside 2000-2031 window")
    if not 1 <= mo <= 12 or not 1 <= d <= days_in_month(y, mo):
        raise ValueError(f"invalid calendar date in {text!r}")
    if h > 23 or mi > 59 or s > 59:
        raise ValueError(f"invalid time of day in {text!r}")
    days = _days_from_civil(y, mo, d)
    return from_epoch((days * 86_400 + h * 3_600 + mi * 60 + s) * 1_000_000 + usec)


def extract(ct: int, field: str) -> int:
    """Raw stored value of one calendar field.

    ``year`` comes back as the stored offset from 2000, ``month`` 1-12,
    ``wday`` 0-6 with 0 = Sunday.
    """
    shift, mask = FIELD_SHIFTS[field]
    return (ct >> shift) & mask


def fields(ct: int) -> TimeFields:
    """Decompose a packed word into all stored fields."""
    return TimeFields(
        usec=ct & 0xFFFFF,
        sec=(ct >> SEC_SHIFT) & 63,
        min=(ct >> MIN_SHIFT) & 63,
        hour=(ct >> HOUR_SHIFT) & 31,
        wday=(ct >> WDAY_SHIFT) & 7,
        day=(ct >> DAY_SHIFT) & 31,
        month=(ct >> MONTH_SHIFT) & 15,
        year=(ct >> YEAR_SHIFT) & 31,
        timezone=(ct >> TZ_SHIFT) & 31,
        pm=(ct >> PM_SHIFT) & 1,
        dls=(ct >> DLS_SHIFT) & 1,
    )


def pack(
    year: int,
    month: int,
    day: int,
    hour: int = 0,
    minute: int = 0,
    sec: int = 0,
    usec: int = 0,
    check: bool = True,
) -> int:
    """Pack explicit calendar fields (calendar year, not offset).

    With check=True the combination is validated and wday/pm are derived;
    with check=False the word is assembled as-is with wday computed
    blindly, for building deliberately inconsistent test values.
    """
    if check:
        if not 2000 <= year <= 2031:
            raise TimeRangeError(f"year {year} outside 2000-2031 window")
        if not 1 <= month <= 12 or not 1 <= day <= days_in_month(year, month):
            raise InvalidTimeFields(f"invalid date {year}-{month:02d}-{day:02d}")
        if hour > 23 or minute > 59 or sec > 59 or usec > 999_999:
            raise InvalidTimeFields("time-of-day field out of range")
    wday = (_days_from_civil(year, month, day) + 4) % 7
    return (
        usec
        | (sec << SEC_SHIFT)
        | (minute << MIN_SHIFT)
        | (hour << HOUR_SHIFT)
        | (wday << WDAY_SHIFT)
        | (day << DAY_SHIFT)
        | (month << MONTH_SHIFT)
        | ((year - 2000) << YEAR_SHIFT)
        | ((1 if hour >= 12 else 0) << PM_SHIFT)
    )


def sort_key(ct: int) -> int:
    """Chronological comparison key (strips tz/pm/dls/reserved bits)."""
    return ct & SORT_MASK


def to_bytes(ct: int) -> bytes:
    """On-disk form: the 64-bit word, little-endian."""
    return ct.to_bytes(8, "little")


def from_bytes(raw: bytes) -> int:
    return int.from_bytes(raw, "little")


def iso8601(ct: int) -> str:
    """Render a packed word for display."""
    f = fields(ct)
    base = (
        f"{2000 + f.year:04d}-{f.month:02d}-{f.day:02d}"
        f"T{f.hour:02d}:{f.min:02d}:{f.sec:02d}"
    )
    if f.usec:
        return f"{base}.{f.usec:06d}Z"
    return base + "Z"
