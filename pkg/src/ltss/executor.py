"""Evaluation of parsed statements over logical tables and CTE row sets.

Semantics notes (documented dialect decisions):

* ``LIMIT n`` without ORDER BY on a plain base-table scan returns the n
  newest live records (reverse log order) - this is what makes
  ``SELECT value FROM seismic LIMIT 1000`` a sliding window over the most
  recent inserts.
* ``/`` between two integers is integer division truncating toward zero.
* Aggregates accumulate in 64-bit floats; count() stays integral.
  Aggregates over empty input give count=0 and None (rendered as an empty
  CSV cell) for sum/avg/min/max.
* In a grouped query with exactly one min()/max() aggregate, bare selected
  columns take their values from the first row attaining the extremum;
  otherwise from the group's first row.
"""
from __future__ import annotations

import functools
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, Sequence

from .query import Constraint, Cursor, LogicalTable, QueryPlan, best_index
from .sql import (
    AGGREGATES,
    Binary,
    Call,
    Column,
    InSubquery,
    Literal,
    Select,
    SelectItem,
    SqlError,
    Statement,
    Unary,
    expr_key,
    find_aggregates,
    parse,
)

Row = Any  # bytes for base-table rows, tuple for CTE rows
Getter = Callable[[Row], Any]


class _RowSet:
    """Materialized intermediate table (CTE result)."""

    def __init__(self, columns: list[str], rows: list[tuple]):
        self.columns = columns
        self.rows = rows
        self._pos = {c.lower(): i for i, c in enumerate(columns)}

    def getter(self, name: str) -> Optional[Getter]:
        i = self._pos.get(name.lower())
        if i is None:
            return None
        return lambda row: row[i]


def execute_sql(text: str, catalog: Mapping[str, LogicalTable]) -> tuple[list[str], list[tuple]]:
    """Run one statement; returns (column headers, result rows)."""
    stmt = parse(text)
    tables = {k.lower(): v for k, v in catalog.items()}
    ctes: dict[str, _RowSet] = {}
    for cte in stmt.ctes:
        name = cte.name.lower()
        if name in ctes or name in tables:
            raise SqlError(f"duplicate table name {cte.name!r}")
        headers, rows = _run_select(cte.select, tables, ctes)
        if cte.columns is not None:
            if len(cte.columns) != len(headers):
                raise SqlError(
                    f"CTE {cte.name} declares {len(cte.columns)} columns, "
                    f"select produces {len(headers)}"
                )
            headers = list(cte.columns)
        ctes[name] = _RowSet(headers, rows)
    return _run_select(stmt.select, tables, ctes)


# -- select evaluation --------------------------------------------------------


def _run_select(
    sel: Select, tables: Mapping[str, LogicalTable], ctes: Mapping[str, _RowSet]
) -> tuple[list[str], list[tuple]]:
    source = ctes.get(sel.table.lower()) or tables.get(sel.table.lower())
    if source is None:
        raise SqlError(f"unknown table {sel.table!r}")

    items = list(sel.items)
    if sel.star:
        names = source.column_names() if isinstance(source, LogicalTable) else source.columns
        items = [SelectItem(Column(n), None, n) for n in names]

    agg_nodes: dict[tuple, Call] = {}
    for item in items:
        find_aggregates(item.expr, agg_nodes)
    for expr, _ in sel.order_by:
        find_aggregates(expr, agg_nodes)
    if sel.where is not None:
        wh_aggs: dict[tuple, Call] = {}
        find_aggregates(sel.where, wh_aggs)
        if wh_aggs:
            raise SqlError("aggregates are not allowed in WHERE")
    grouped = bool(agg_nodes) or bool(sel.group_by)

    newest_first = (
        sel.limit is not None
        and not sel.order_by
        and not grouped
        and not sel.distinct
        and isinstance(source, LogicalTable)
    )
    rows, resolver = _source_rows(sel, source, tables, ctes, newest_first)

    subquery_cache: dict[int, frozenset] = {}
    env = _CompileEnv(resolver, tables, ctes, subquery_cache)

    if grouped:
        out_rows = _run_grouped(sel, items, rows, env, agg_nodes)
    else:
        project = [_compile(item.expr, env) for item in items]
        order_fns = [(_compile(e, env), desc) for e, desc in sel.order_by]
        out_rows = []
        limit_early = sel.limit if (not sel.order_by and not sel.distinct) else None
        for row in rows:
            projected = tuple(f(row) for f in project)
            keys = tuple(f(row) for f, _ in order_fns)
            out_rows.append((keys, projected))
            if limit_early is not None and len(out_rows) >= limit_early:
                break
        out_rows = _finish(out_rows, sel, order_fns)

    headers = [item.alias or item.text for item in items]
    return headers, out_rows


def _source_rows(
    sel: Select,
    source,
    tables: Mapping[str, LogicalTable],
    ctes: Mapping[str, _RowSet],
    newest_first: bool,
):
    """Row iterator plus column resolver; pushes constraints for tables."""
    if isinstance(source, _RowSet):
        rows: Iterable[Row] = source.rows
        if sel.where is not None:
            env = _CompileEnv(source.getter, tables, ctes, {})
            pred = _compile(sel.where, env)
            rows = (r for r in rows if _truth(pred(r)))
        return rows, source.getter

    table: LogicalTable = source

    def resolver(name: str) -> Optional[Getter]:
        if table.has_column(name):
            return table.accessor(name)
        return None

    conjuncts = _split_conjuncts(sel.where)
    candidates: list[tuple[Any, Constraint]] = []
    others: list[Any] = []
    for node in conjuncts:
        c = _as_constraint(node, table)
        if c is not None:
            candidates.append((node, c))
        else:
            others.append(node)
    plan = best_index(table, [c for _, c in candidates])
    residual_nodes = [
        node for (node, _), used in zip(candidates, plan.consumed_mask) if not used
    ] + others
    # constraints already filtered by the cursor: none (residual re-checked
    # below so OR trees and non-pushable comparisons share one code path)
    plan.residual = []
    cursor = Cursor(plan, combine="sort-merge", newest_first=newest_first)
    rows = iter(cursor)
    if residual_nodes:
        env = _CompileEnv(resolver, tables, ctes, {})
        preds = [_compile(n, env) for n in residual_nodes]

        def keep(row: Row) -> bool:
            return all(_truth(p(row)) for p in preds)

        rows = (r for r in rows if keep(r))
    return rows, resolver


def _run_grouped(
    sel: Select,
    items: list[SelectItem],
    rows: Iterable[Row],
    env: "_CompileEnv",
    agg_nodes: dict[tuple, Call],
) -> list[tuple]:
    group_fns = [_compile(e, env) for e in sel.group_by]
    accs: dict[tuple, _Group] = {}
    arg_fns = {
        key: (None if node.star else _compile(node.args[0], env))
        for key, node in agg_nodes.items()
    }
    # a single min/max aggregate donates its extremal row to bare columns
    extremal_key = None
    if len(agg_nodes) == 1:
        (only_key, only_node), = agg_nodes.items()
        if only_node.func in ("min", "max"):
            extremal_key = (only_key, only_node.func)

    order = []
    for row in rows:
        gkey = tuple(f(row) for f in group_fns)
        g = accs.get(gkey)
        if g is None:
            g = _Group(row)
            accs[gkey] = g
            order.append(gkey)
        for key, node in agg_nodes.items():
            fn = arg_fns[key]
            if node.star:
                g.counts[key] = g.counts.get(key, 0) + 1
                continue
            v = fn(row)
            g.counts[key] = g.counts.get(key, 0) + 1
            if node.func == "count":
                continue
            if node.func == "sum" or node.func == "avg":
                g.sums[key] = g.sums.get(key, 0.0) + v
            elif node.func == "min":
                if key not in g.mins or _lt(v, g.mins[key]):
                    g.mins[key] = v
                    if extremal_key == (key, "min"):
                        g.rep = row
            elif node.func == "max":
                if key not in g.maxs or _lt(g.maxs[key], v):
                    g.maxs[key] = v
                    if extremal_key == (key, "max"):
                        g.rep = row

    if not accs and not sel.group_by:
        accs[()] = _Group(None)  # aggregate over empty input -> one row
        order.append(())

    def agg_value(key: tuple, node: Call, g: _Group):
        n = g.counts.get(key, 0)
        if node.func == "count":
            return n
        if n == 0:
            return None
        if node.func == "sum":
            return g.sums[key]
        if node.func == "avg":
            return g.sums[key] / n
        if node.func == "min":
            return g.mins[key]
        return g.maxs[key]

    out: list[tuple[tuple, tuple]] = []
    project_env = env
    order_fns = list(sel.order_by)
    for gkey in order:
        g = accs[gkey]
        agg_values = {key: agg_value(key, node, g) for key, node in agg_nodes.items()}
        evaluate = functools.partial(_eval_with_aggregates, env=project_env, aggs=agg_values)
        projected = tuple(evaluate(item.expr, row=g.rep) for item in items)
        keys = tuple(evaluate(e, row=g.rep) for e, _ in order_fns)
        out.append((keys, projected))
    return _finish(out, sel, [(None, d) for _, d in sel.order_by])


class _Group:
    __slots__ = ("rep", "counts", "sums", "mins", "maxs")

    def __init__(self, rep):
        self.rep = rep
        self.counts: dict = {}
        self.sums: dict = {}
        self.mins: dict = {}
        self.maxs: dict = {}


def _finish(
    keyed_rows: list[tuple[tuple, tuple]], sel: Select, order_fns: list
) -> list[tuple]:
    rows = keyed_rows
    if sel.distinct:
        seen = set()
        uniq = []
        for keys, projected in rows:
            if projected not in seen:
                seen.add(projected)
                uniq.append((keys, projected))
        rows = uniq
    if sel.order_by:
        directions = [desc for _, desc in order_fns]

        def compare(a, b):
            for (x, y, desc) in zip(a[0], b[0], directions):
                c = _cmp(x, y)
                if c:
                    return -c if desc else c
            return 0

        rows = sorted(rows, key=functools.cmp_to_key(compare))
    out = [projected for _, projected in rows]
    if sel.limit is not None:
        out = out[: sel.limit]
    return out


# -- expression compilation ----------------------------------------------------


class _CompileEnv:
    def __init__(self, resolver, tables, ctes, subquery_cache):
        self.resolver = resolver
        self.tables = tables
        self.ctes = ctes
        self.subquery_cache = subquery_cache


def _compile(node, env: _CompileEnv) -> Getter:
    if isinstance(node, Literal):
        v = node.value
        return lambda row: v
    if isinstance(node, Column):
        getter = env.resolver(node.name)
        if getter is None:
            raise SqlError(f"unknown column {node.name!r}")
        return getter
    if isinstance(node, Unary):
        inner = _compile(node.operand, env)
        return lambda row: -inner(row)
    if isinstance(node, Binary):
        return _compile_binary(node, env)
    if isinstance(node, InSubquery):
        inner = _compile(node.expr, env)
        members = _subquery_values(node, env)
        return lambda row: inner(row) in members
    if isinstance(node, Call):
        raise SqlError(
            f"aggregate {node.func}() used outside a grouping context"
        )
    raise SqlError(f"cannot evaluate {node!r}")


def _compile_binary(node: Binary, env: _CompileEnv) -> Getter:
    op = node.op
    if op == "and":
        lf, rf = _compile(node.left, env), _compile(node.right, env)
        return lambda row: _truth(lf(row)) and _truth(rf(row))
    if op == "or":
        lf, rf = _compile(node.left, env), _compile(node.right, env)
        return lambda row: _truth(lf(row)) or _truth(rf(row))
    lf, rf = _compile(node.left, env), _compile(node.right, env)
    if op in ("=", "=="):
        return lambda row: lf(row) == rf(row)
    if op in ("!=", "<>"):
        return lambda row: lf(row) != rf(row)
    if op == "<":
        return lambda row: _cmp(lf(row), rf(row)) < 0
    if op == "<=":
        return lambda row: _cmp(lf(row), rf(row)) <= 0
    if op == ">":
        return lambda row: _cmp(lf(row), rf(row)) > 0
    if op == ">=":
        return lambda row: _cmp(lf(row), rf(row)) >= 0
    if op == "+":
        return lambda row: lf(row) + rf(row)
    if op == "-":
        return lambda row: lf(row) - rf(row)
    if op == "*":
        return lambda row: lf(row) * rf(row)
    if op == "/":
        return lambda row: _sql_div(lf(row), rf(row))
    raise SqlError(f"unsupported operator {op!r}")


def _eval_with_aggregates(node, row, env: _CompileEnv, aggs: dict):
    """Tree-walk evaluation in a group context, aggregates pre-computed."""
    if isinstance(node, Call):
        return aggs[expr_key(node)]
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, Column):
        if row is None:
            return None  # bare column over an empty group
        getter = env.resolver(node.name)
        if getter is None:
            raise SqlError(f"unknown column {node.name!r}")
        return getter(row)
    if isinstance(node, Unary):
        return -_eval_with_aggregates(node.operand, row, env, aggs)
    if isinstance(node, Binary):
        op = node.op
        if op == "and":
            return _truth(_eval_with_aggregates(node.left, row, env, aggs)) and _truth(
                _eval_with_aggregates(node.right, row, env, aggs)
            )
        if op == "or":
            return _truth(_eval_with_aggregates(node.left, row, env, aggs)) or _truth(
                _eval_with_aggregates(node.right, row, env, aggs)
            )
        a = _eval_with_aggregates(node.left, row, env, aggs)
        b = _eval_with_aggregates(node.right, row, env, aggs)
        if op in ("=", "=="):
            return a == b
        if op in ("!=", "<>"):
            return a != b
        if op == "<":
            return _cmp(a, b) < 0
        if op == "<=":
            return _cmp(a, b) <= 0
        if op == ">":
            return _cmp(a, b) > 0
        if op == ">=":
            return _cmp(a, b) >= 0
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return _sql_div(a, b)
    if isinstance(node, InSubquery):
        members = _subquery_values(node, env)
        return _eval_with_aggregates(node.expr, row, env, aggs) in members
    raise SqlError(f"cannot evaluate {node!r}")


def _subquery_values(node: InSubquery, env: _CompileEnv) -> frozenset:
    cached = env.subquery_cache.get(id(node.select))
    if cached is None:
        headers, rows = _run_select(node.select, env.tables, env.ctes)
        if len(headers) != 1:
            raise SqlError("IN subquery must produce exactly one column")
        cached = frozenset(r[0] for r in rows)
        env.subquery_cache[id(node.select)] = cached
    return cached


# -- value semantics ------------------------------------------------------------


def _sql_div(a, b):
    if isinstance(a, int) and isinstance(b, int):
        if b == 0:
            raise SqlError("division by zero")
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    if b == 0:
        raise SqlError("division by zero")
    return a / b


def _truth(v) -> bool:
    return bool(v)


def _lt(a, b) -> bool:
    return _cmp(a, b) < 0


def _cmp(a, b) -> int:
    if a is None or b is None:
        if a is b:
            return 0
        return -1 if a is None else 1
    num_a = isinstance(a, (int, float)) and not isinstance(a, bool)
    num_b = isinstance(b, (int, float)) and not isinstance(b, bool)
    if num_a and num_b:
        return (a > b) - (a < b)
    if isinstance(a, str) and isinstance(b, str):
        return (a > b) - (a < b)
    if num_a != num_b:
        raise SqlError(
            f"cannot compare {type(a).__name__} with {type(b).__name__}"
        )
    return (a > b) - (a < b)


# -- pushdown extraction ----------------------------------------------------------


def _split_conjuncts(node) -> list:
    if node is None:
        return []
    if isinstance(node, Binary) and node.op == "and":
        return _split_conjuncts(node.left) + _split_conjuncts(node.right)
    return [node]


def _as_constraint(node, table: LogicalTable) -> Optional[Constraint]:
    """col OP literal (or reversed) when col exists; otherwise None."""
    if not isinstance(node, Binary) or node.op not in ("=", "==", "!=", "<>", "<", "<=", ">", ">="):
        return None
    left, right, op = node.left, node.right, node.op
    if isinstance(left, Literal) and isinstance(right, Column):
        left, right = right, left
        op = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}.get(op, op)
    if not (isinstance(left, Column) and isinstance(right, Literal)):
        return None
    if not table.has_column(left.name):
        raise SqlError(f"unknown column {left.name!r}")
    value = right.value
    if isinstance(value, float) and value.is_integer() and table.time_granularity(left.name):
        value = int(value)
    return Constraint(left.name.lower(), "=" if op == "==" else op, value)


def format_csv(headers: Sequence[str], rows: Iterable[tuple]) -> str:
    """Result rows as CSV text with a header row (None -> empty cell)."""
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    return buf.getvalue()
