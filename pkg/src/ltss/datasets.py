"""Builtin dataset schemas and seeded synthetic data generators.

The three workload schemas (seismic, taxi, power) reproduce the published
record sizes of 28, 132 and 119 bytes.  Public source archives are large;
the generators below produce seeded, time-sorted CSVs with the same shape
so benchmarks and acceptance runs work at desk scale.  CSV columns follow
schema field order; time cells hold integer epoch microseconds (ISO 8601
strings are also accepted on load).
"""
from __future__ import annotations

import csv
import os
import random
from typing import Any, Iterable, Iterator, Sequence

from . import ctime
from .schema import Schema, StoreConfig, parse_config

SEISMIC_CONFIG = """\
schema seismic
field time time
field value f32
field lat f32
field lon f32
field depth f32
field mag f32
primary_time time
quantum_ms 100
capacity_records 2000000
pipelines 1
"""

TAXI_CONFIG = """\
schema taxi
field medallion ascii:32
field hack_license ascii:32
field pickup_datetime time
field dropoff_datetime time
field passenger_count u8
field trip_time_in_secs u32
field trip_distance f32
field pickup_longitude f64
field pickup_latitude f64
field dropoff_longitude f64
field dropoff_latitude f64
field rate_code u8
field vendor_id ascii:10
primary_time pickup_datetime
quantum_ms 100
capacity_records 1000000
pipelines 1
"""

ENERGY_CONFIG = """\
schema power
field datetime time
field houseid ascii:8
field v0 f64
field v1 f64
field v2 f64
field i0 f64
field i1 f64
field i2 f64
field real_power f64
field reactive_power f64
field apparent_power f64
field freq f64
field thd f64
field tag ascii:15
primary_time datetime
quantum_ms 100
capacity_records 1000000
pipelines 1
"""

CONFIGS = {"seismic": SEISMIC_CONFIG, "taxi": TAXI_CONFIG, "energy": ENERGY_CONFIG}

# Vehicle targeted by the taxi distance benchmark query.
BENCH_MEDALLION = "5CC9B3C9725FCD7FAE490B4C614D57EE"


def builtin_config(name: str) -> StoreConfig:
    try:
        return parse_config(CONFIGS[name.lower()])
    except KeyError:
        raise KeyError(f"no builtin dataset {name!r}; have {sorted(CONFIGS)}") from None


def builtin_schema(name: str) -> Schema:
    return builtin_config(name).schema


def default_seed() -> int:
    return int(os.environ.get("LTSS_SEED", "1"))


# -- synthetic rows ------------------------------------------------------


def gen_seismic(
    count: int,
    seed: int | None = None,
    start: str = "2015-03-01T00:00:00Z",
    gap_us: int = 1_000,
) -> Iterator[Sequence[Any]]:
    """Earthquake-style samples with a fixed inter-arrival gap."""
    rng = random.Random(default_seed() if seed is None else seed)
    t = ctime.to_epoch(ctime.from_iso8601(start))
    for _ in range(count):
        yield (
            t,
            rng.uniform(-1.0, 1.0),
            rng.uniform(-60.0, 60.0),
            rng.uniform(-180.0, 180.0),
            rng.uniform(0.0, 700.0),
            rng.uniform(0.1, 9.0),
        )
        t += gap_us


def gen_taxi(count: int, seed: int | None = None) -> Iterator[Sequence[Any]]:
    """Trips spread over calendar year 2013, time-sorted on pickup.

    Ensures coverage of the benchmark-sensitive slices: November trips,
    the day 2013-11-25, evening pickups, weekends, and a fixed medallion.
    """
    rng = random.Random(default_seed() if seed is None else seed)
    start = ctime.to_epoch(ctime.from_iso8601("2013-01-01T00:00:00Z"))
    end = ctime.to_epoch(ctime.from_iso8601("2013-12-31T00:00:00Z"))
    step = (end - start) // max(count, 1)
    medallions = [f"{rng.getrandbits(128):032X}" for _ in range(48)] + [BENCH_MEDALLION]
    t = start
    for i in range(count):
        medallion = medallions[rng.randrange(len(medallions))]
        trip_secs = rng.randrange(60, 7_200)
        yield (
            medallion,
            f"{rng.getrandbits(128):032X}",
            t,
            t + trip_secs * 1_000_000,
            rng.randrange(1, 7),
            trip_secs,
            round(rng.uniform(0.3, 30.0), 2),
            rng.uniform(-74.05, -73.75),
            rng.uniform(40.6, 40.9),
            rng.uniform(-74.05, -73.75),
            rng.uniform(40.6, 40.9),
            rng.randrange(1, 6),
            rng.choice(("CMT", "VTS")),
        )
        # jitter inside the slot keeps pickups irregular but sorted
        t += rng.randrange(1, max(2, 2 * step))
        if t >= end:
            t = end - 1


def gen_energy(count: int, seed: int | None = None) -> Iterator[Sequence[Any]]:
    """Household power samples for houses H1..H8 through late July 2012.

    The window deliberately spans 2012-07-25 .. 2012-08-05 so the
    datetime-slice benchmark (2012-07-30 09:35-09:39) lands on real rows.
    """
    rng = random.Random(default_seed() if seed is None else seed)
    start = ctime.to_epoch(ctime.from_iso8601("2012-07-25T00:00:00Z"))
    end = ctime.to_epoch(ctime.from_iso8601("2012-08-05T00:00:00Z"))
    step = (end - start) // max(count, 1)
    houses = [f"H{i}" for i in range(1, 9)]
    t = start
    for i in range(count):
        v0 = rng.uniform(110.0, 130.0)
        i0 = rng.uniform(0.0, 18.0)
        yield (
            t,
            houses[i % len(houses)],
            v0,
            rng.uniform(110.0, 130.0),
            rng.uniform(110.0, 130.0),
            i0,
            rng.uniform(0.0, 18.0),
            rng.uniform(0.0, 18.0),
            v0 * i0 * rng.uniform(0.8, 1.0),
            v0 * i0 * rng.uniform(0.0, 0.4),
            v0 * i0,
            rng.uniform(59.9, 60.1),
            rng.uniform(0.0, 0.08),
            rng.choice(("ok", "est", "cal")),
        )
        t += max(1, step + rng.randrange(-step // 2, step // 2) if step > 2 else 1)
        if t >= end:
            t = end - 1


GENERATORS = {"seismic": gen_seismic, "taxi": gen_taxi, "energy": gen_energy}


def synth_rows(dataset: str, count: int, seed: int | None = None) -> Iterator[Sequence[Any]]:
    try:
        gen = GENERATORS[dataset.lower()]
    except KeyError:
        raise KeyError(f"no generator for {dataset!r}; have {sorted(GENERATORS)}") from None
    return gen(count, seed=seed)


# -- CSV I/O --------------------------------------------------------------


def write_csv(schema: Schema, rows: Iterable[Sequence[Any]], path: str) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(schema.field_names())
        for row in rows:
            w.writerow(row)
            n += 1
    return n


def load_csv(schema: Schema, path: str) -> list[tuple]:
    """Read a dataset CSV into typed value tuples in schema order.

    The header row is optional.  Time cells accept integer epoch
    microseconds or ISO 8601 strings.
    """
    out: list[tuple] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row:
                continue
            if not out and row[:1] and row[0].lower() == schema.fields[0].name.lower():
                continue  # header
            if len(row) != len(schema.fields):
                raise ValueError(
                    f"{path}: row has {len(row)} cells, schema {schema.name} needs "
                    f"{len(schema.fields)}"
                )
            vals: list[Any] = []
            for f, cell in zip(schema.fields, row):
                kind = f.ftype.kind
                if kind == "ascii":
                    vals.append(cell)
                elif kind == "time":
                    vals.append(_parse_time_cell(cell))
                elif kind in ("f32", "f64"):
                    vals.append(float(cell))
                else:
                    vals.append(int(cell))
            out.append(tuple(vals))
    return out


def _parse_time_cell(cell: str) -> int:
    try:
        return int(cell)
    except ValueError:
        return ctime.to_epoch(ctime.from_iso8601(cell))
