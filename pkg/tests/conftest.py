"""Shared fixtures: build stores/tables from synthetic rows without UDP."""
from __future__ import annotations

import pytest

from ltss import datasets
from ltss.index import DirectoryIndex
from ltss.ordering import insertion_sort
from ltss.query import LogicalTable
from ltss.schema import Schema
from ltss.store import StoreSegment


def ingest_rows(store: StoreSegment, schema: Schema, rows, batch_size=1024):
    """Encode value rows and append them through the sorted-batch path."""
    slots = [schema.decode_datagram(schema.encode(r)) for r in rows]
    slots = insertion_sort(slots, key=lambda s: s.epoch)
    for k in range(0, len(slots), batch_size):
        store.append_batch(slots[k : k + batch_size])
    return len(slots)


def build_table(tmp_path, dataset: str, count: int, seed=1, capacity=None, partitions=1):
    """Synthetic dataset -> one LogicalTable over N store partitions."""
    schema = datasets.builtin_schema(dataset)
    rows = list(datasets.synth_rows(dataset, count, seed=seed))
    stores = []
    for p in range(partitions):
        st = StoreSegment.create(
            str(tmp_path / f"{dataset}.p{p}.db"),
            schema,
            capacity or max(count, 1),
        )
        st.index = DirectoryIndex(st)
        stores.append(st)
    if partitions == 1:
        ingest_rows(stores[0], schema, rows)
    else:
        buckets = [[] for _ in range(partitions)]
        for i, row in enumerate(rows):
            buckets[i % partitions].append(row)
        for st, part_rows in zip(stores, buckets):
            ingest_rows(st, schema, part_rows)
    table = LogicalTable(schema.name, schema, stores)
    return table, rows


@pytest.fixture
def taxi_table(tmp_path):
    table, rows = build_table(tmp_path, "taxi", 3_000, seed=7)
    yield table, rows
    for st in table.partitions:
        st.close()


@pytest.fixture
def energy_table(tmp_path):
    table, rows = build_table(tmp_path, "energy", 3_000, seed=7)
    yield table, rows
    for st in table.partitions:
        st.close()


@pytest.fixture
def seismic_table(tmp_path):
    table, rows = build_table(tmp_path, "seismic", 2_000, seed=7)
    yield table, rows
    for st in table.partitions:
        st.close()
