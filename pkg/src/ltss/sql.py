"""Tokenizer, AST and recursive-descent parser for the query dialect.

The dialect covers exactly what the benchmark workloads need: single-table
SELECT with arithmetic expressions and aliases, aggregates
(count/avg/min/max/sum), DISTINCT, WHERE with AND/OR and comparisons,
IN (uncorrelated subquery), GROUP BY, ORDER BY [ASC|DESC], LIMIT, and
non-recursive single-level WITH.  Anything else is rejected with an error
naming the construct.  Identifiers and keywords are case-insensitive;
strings are single-quoted; ``==`` is accepted for ``=``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Optional


class SqlError(ValueError):
    """Base for parse/eval failures."""


class SqlParseError(SqlError):
    pass


class SqlUnsupportedError(SqlError):
    """Recognized but unsupported construct (named in the message)."""


KEYWORDS = {
    "select", "from", "where", "group", "order", "by", "limit", "with", "as",
    "and", "or", "in", "distinct", "asc", "desc",
}
UNSUPPORTED_KEYWORDS = {
    "join": "JOIN",
    "inner": "JOIN",
    "outer": "JOIN",
    "left": "JOIN",
    "right": "JOIN",
    "cross": "JOIN",
    "having": "HAVING",
    "union": "UNION",
    "intersect": "INTERSECT",
    "except": "EXCEPT",
    "over": "window functions (OVER)",
    "between": "BETWEEN",
    "like": "LIKE",
    "not": "NOT",
    "case": "CASE expressions",
    "exists": "EXISTS",
    "null": "NULL literals",
    "is": "IS comparisons",
    "offset": "OFFSET",
}
WRITE_KEYWORDS = {"insert", "update", "delete", "create", "drop", "alter", "replace"}

AGGREGATES = ("count", "sum", "avg", "min", "max")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|--[^\n]*)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^']|'')*')
  | (?P<op><=|>=|==|!=|<>|[=<>+\-*/(),;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # number | ident | string | op | eof
    text: str
    pos: int


def tokenize(src: str) -> list[Token]:
    out: list[Token] = []
    pos = 0
    n = len(src)
    while pos < n:
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise SqlParseError(f"unexpected character {src[pos]!r} at offset {pos}")
        pos = m.end()
        kind = m.lastgroup
        if kind == "ws":
            continue
        out.append(Token(kind, m.group(), m.start()))
    out.append(Token("eof", "", n))
    return out


# -- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    value: Any


@dataclass(frozen=True)
class Column:
    name: str


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    star: bool = False  # count(*)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: Any


@dataclass(frozen=True)
class Binary:
    op: str
    left: Any
    right: Any


@dataclass(frozen=True)
class InSubquery:
    expr: Any
    select: "Select"


@dataclass
class SelectItem:
    expr: Any
    alias: Optional[str]
    text: str  # source slice, used as the output header


@dataclass
class Select:
    items: list[SelectItem]
    star: bool
    table: str
    distinct: bool = False
    where: Any = None
    group_by: list = field(default_factory=list)
    order_by: list = field(default_factory=list)  # (expr, descending)
    limit: Optional[int] = None


@dataclass
class Cte:
    name: str
    columns: Optional[list[str]]
    select: Select


@dataclass
class Statement:
    ctes: list[Cte]
    select: Select


COMPARISONS = {"=", "==", "!=", "<>", "<", "<=", ">", ">="}


class Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = tokenize(src)
        self.i = 0

    # -- token plumbing ---------------------------------------------------

    def peek(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def at_keyword(self, *words: str) -> bool:
        t = self.peek()
        return t.kind == "ident" and t.text.lower() in words

    def eat_keyword(self, *words: str) -> bool:
        if self.at_keyword(*words):
            self.advance()
            return True
        return False

    def expect_keyword(self, word: str) -> None:
        if not self.eat_keyword(word):
            raise SqlParseError(f"expected {word.upper()} near {self._near()}")

    def eat_op(self, text: str) -> bool:
        t = self.peek()
        if t.kind == "op" and t.text == text:
            self.advance()
            return True
        return False

    def expect_op(self, text: str) -> None:
        if not self.eat_op(text):
            raise SqlParseError(f"expected {text!r} near {self._near()}")

    def _near(self) -> str:
        t = self.peek()
        return f"offset {t.pos} ({t.text!r})" if t.text else "end of statement"

    def _check_unsupported(self) -> None:
        t = self.peek()
        if t.kind == "ident":
            low = t.text.lower()
            if low in UNSUPPORTED_KEYWORDS:
                raise SqlUnsupportedError(
                    f"{UNSUPPORTED_KEYWORDS[low]} is not supported by this dialect"
                )

    # -- grammar ------------------------------------------------------------

    def parse_statement(self) -> Statement:
        t = self.peek()
        if t.kind == "ident" and t.text.lower() in WRITE_KEYWORDS:
            raise SqlUnsupportedError(
                f"write statements ({t.text.upper()}) are not supported; queries are read-only"
            )
        ctes: list[Cte] = []
        if self.eat_keyword("with"):
            ctes.append(self.parse_cte())
            while self.eat_op(","):
                ctes.append(self.parse_cte())
        select = self.parse_select(allow_with=False)
        self.eat_op(";")
        if self.peek().kind != "eof":
            raise SqlParseError(f"trailing input near {self._near()}")
        return Statement(ctes, select)

    def parse_cte(self) -> Cte:
        name_tok = self.advance()
        if name_tok.kind != "ident":
            raise SqlParseError(f"expected CTE name near offset {name_tok.pos}")
        columns = None
        if self.eat_op("("):
            columns = [self._ident("CTE column name")]
            while self.eat_op(","):
                columns.append(self._ident("CTE column name"))
            self.expect_op(")")
        self.expect_keyword("as")
        self.expect_op("(")
        select = self.parse_select(allow_with=False)
        self.expect_op(")")
        return Cte(name_tok.text, columns, select)

    def parse_select(self, allow_with: bool) -> Select:
        if self.at_keyword("with"):
            if not allow_with:
                raise SqlUnsupportedError("nested WITH is not supported (single level only)")
        self.expect_keyword("select")
        distinct = self.eat_keyword("distinct")
        star = False
        items: list[SelectItem] = []
        if self.eat_op("*"):
            star = True
        else:
            items.append(self.parse_select_item())
            while self.eat_op(","):
                items.append(self.parse_select_item())
        self.expect_keyword("from")
        if self.peek().kind == "op" and self.peek().text == "(":
            raise SqlUnsupportedError("subquery in FROM is not supported")
        table = self._ident("table name")
        if self.eat_op(","):
            raise SqlUnsupportedError("implicit join (multiple tables in FROM) is not supported")
        self._check_unsupported()
        where = None
        if self.eat_keyword("where"):
            where = self.parse_expr()
        self._check_unsupported()
        group_by: list = []
        if self.eat_keyword("group"):
            self.expect_keyword("by")
            group_by.append(self.parse_expr())
            while self.eat_op(","):
                group_by.append(self.parse_expr())
        self._check_unsupported()
        order_by: list = []
        if self.eat_keyword("order"):
            self.expect_keyword("by")
            order_by.append(self.parse_order_item())
            while self.eat_op(","):
                order_by.append(self.parse_order_item())
        limit = None
        if self.eat_keyword("limit"):
            t = self.advance()
            if t.kind != "number" or not t.text.isdigit():
                raise SqlParseError(f"LIMIT needs an integer, got {t.text!r}")
            limit = int(t.text)
        self._check_unsupported()
        return Select(items, star, table, distinct, where, group_by, order_by, limit)

    def parse_select_item(self) -> SelectItem:
        start = self.peek().pos
        expr = self.parse_expr()
        end = self.peek().pos
        alias = None
        if self.eat_keyword("as"):
            alias = self._ident("alias")
        elif (
            self.peek().kind == "ident"
            and self.peek().text.lower() not in KEYWORDS
            and self.peek().text.lower() not in UNSUPPORTED_KEYWORDS
        ):
            alias = self.advance().text
        self._check_unsupported()  # e.g. count(*) OVER (...)
        return SelectItem(expr, alias, self.src[start:end].strip())

    def parse_order_item(self) -> tuple:
        expr = self.parse_expr()
        desc = False
        if self.eat_keyword("desc"):
            desc = True
        else:
            self.eat_keyword("asc")
        return (expr, desc)

    def parse_expr(self):
        return self.parse_or()

    def parse_or(self):
        left = self.parse_and()
        while self.eat_keyword("or"):
            left = Binary("or", left, self.parse_and())
        return left

    def parse_and(self):
        left = self.parse_comparison()
        while self.eat_keyword("and"):
            left = Binary("and", left, self.parse_comparison())
        return left

    def parse_comparison(self):
        self._check_unsupported()
        left = self.parse_additive()
        if self.eat_keyword("in"):
            self.expect_op("(")
            if not self.at_keyword("select"):
                raise SqlUnsupportedError(
                    "IN is only supported with an uncorrelated subquery"
                )
            sub = self.parse_select(allow_with=False)
            self.expect_op(")")
            return InSubquery(left, sub)
        t = self.peek()
        if t.kind == "op" and t.text in COMPARISONS:
            self.advance()
            return Binary(t.text, left, self.parse_additive())
        return left

    def parse_additive(self):
        left = self.parse_multiplicative()
        while True:
            t = self.peek()
            if t.kind == "op" and t.text in ("+", "-"):
                self.advance()
                left = Binary(t.text, left, self.parse_multiplicative())
            else:
                return left

    def parse_multiplicative(self):
        left = self.parse_unary()
        while True:
            t = self.peek()
            if t.kind == "op" and t.text in ("*", "/"):
                self.advance()
                left = Binary(t.text, left, self.parse_unary())
            else:
                return left

    def parse_unary(self):
        if self.eat_op("-"):
            return Unary("-", self.parse_unary())
        return self.parse_primary()

    def parse_primary(self):
        self._check_unsupported()
        t = self.advance()
        if t.kind == "number":
            if "." in t.text or "e" in t.text or "E" in t.text:
                return Literal(float(t.text))
            return Literal(int(t.text))
        if t.kind == "string":
            return Literal(t.text[1:-1].replace("''", "'"))
        if t.kind == "op" and t.text == "(":
            expr = self.parse_expr()
            self.expect_op(")")
            return expr
        if t.kind == "ident":
            low = t.text.lower()
            if low in KEYWORDS:
                raise SqlParseError(f"unexpected keyword {t.text!r} at offset {t.pos}")
            if self.eat_op("("):
                return self._parse_call(t)
            return Column(t.text)
        raise SqlParseError(f"unexpected token {t.text!r} at offset {t.pos}")

    def _parse_call(self, name_tok: Token) -> Call:
        func = name_tok.text.lower()
        if func not in AGGREGATES:
            raise SqlUnsupportedError(f"function {name_tok.text}() is not supported")
        if self.eat_op("*"):
            self.expect_op(")")
            if func != "count":
                raise SqlParseError(f"{func}(*) is not valid; only count(*)")
            return Call(func, (), star=True)
        if self.at_keyword("distinct"):
            raise SqlUnsupportedError("DISTINCT inside an aggregate is not supported")
        args = [self.parse_expr()]
        while self.eat_op(","):
            args.append(self.parse_expr())
        self.expect_op(")")
        if len(args) != 1:
            raise SqlParseError(f"{func}() takes exactly one argument")
        return Call(func, tuple(args))

    def _ident(self, what: str) -> str:
        t = self.advance()
        if t.kind != "ident" or t.text.lower() in KEYWORDS:
            raise SqlParseError(f"expected {what} near offset {t.pos} ({t.text!r})")
        if t.text.lower() in UNSUPPORTED_KEYWORDS:
            raise SqlUnsupportedError(
                f"{UNSUPPORTED_KEYWORDS[t.text.lower()]} is not supported by this dialect"
            )
        return t.text


def parse(src: str) -> Statement:
    return Parser(src).parse_statement()


def expr_key(node) -> tuple:
    """Structural identity of an expression, case-folded.

    Used to unify textually repeated aggregate calls (the same
    ``avg(V0*I0)`` in the select list and ORDER BY accumulates once).
    """
    if isinstance(node, Literal):
        return ("lit", node.value)
    if isinstance(node, Column):
        return ("col", node.name.lower())
    if isinstance(node, Call):
        return ("call", node.func, node.star, tuple(expr_key(a) for a in node.args))
    if isinstance(node, Unary):
        return ("un", node.op, expr_key(node.operand))
    if isinstance(node, Binary):
        return ("bin", node.op, expr_key(node.left), expr_key(node.right))
    if isinstance(node, InSubquery):
        return ("in", expr_key(node.expr), id(node.select))
    raise SqlError(f"unexpected node {node!r}")


def find_aggregates(node, out: dict):
    """Collect aggregate Call nodes keyed by expr_key, depth-first."""
    if isinstance(node, Call):
        out[expr_key(node)] = node
        return  # aggregates cannot nest in this dialect
    if isinstance(node, Unary):
        find_aggregates(node.operand, out)
    elif isinstance(node, Binary):
        find_aggregates(node.left, out)
        find_aggregates(node.right, out)
    elif isinstance(node, InSubquery):
        find_aggregates(node.expr, out)
