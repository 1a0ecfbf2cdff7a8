"""Interpreter for a small SELECT subset over in-memory tables.

Supported (one statement per call, optional trailing semicolon):

    SELECT [DISTINCT] select_list
    FROM table [alias] ((',' | [INNER] JOIN) table [alias] [ON eq_list])*
    [WHERE expr] [GROUP BY cols] [ORDER BY col [ASC|DESC], ...] [LIMIT n]

    select_list := '*' | item (',' item)*
    item        := column | COUNT '(' '*' | [DISTINCT] column ')'
                 | (SUM|AVG|MIN|MAX) '(' column ')'
    expr        := OR of ANDs of [NOT] predicates
    predicate   := column op (literal | column) | column IN '(' literals ')'
                 | column LIKE 'pattern' | '(' expr ')'
    op          := = | != | <> | < | <= | > | >=

Semantics are deliberately plain: scans keep input row order, joins are
left-to-right nested loops, at most three tables, no subqueries, no
HAVING.  Comparisons with NULL are false; aggregates skip NULLs; nulls
sort last ascending.  Keywords are case-insensitive, table and column
names are case-sensitive.  All failures raise ToolError('SqlError', ...)
with a 1-based character position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime

from .store import EhrDatabase, TableData, parse_datetime
from .tools import ToolError

_KEYWORDS = {
    "SELECT", "DISTINCT", "FROM", "JOIN", "INNER", "ON", "WHERE", "AND", "OR",
    "NOT", "IN", "LIKE", "GROUP", "ORDER", "BY", "ASC", "DESC", "LIMIT", "AS",
    "COUNT", "SUM", "AVG", "MIN", "MAX",
}
_AGG_FUNCS = ("COUNT", "SUM", "AVG", "MIN", "MAX")

# a leading '-' always belongs to a numeric literal: the subset has no
# arithmetic and identifiers cannot contain it
_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<number>-?\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|-?\.\d+)
      | (?P<string>'(?:[^']|'')*'|"(?:[^"]|"")*")
      | (?P<ident>[A-Za-z_]\w*)
      | (?P<op><=|>=|!=|<>|=|<|>)
      | (?P<punct>[(),.;*])
    """,
    re.VERBOSE,
)


def _sql_error(message: str, pos: int):
    raise ToolError("SqlError", f"{message} at position {pos}")


@dataclass(frozen=True)
class _Token:
    kind: str  # number | string | ident | op | punct | end
    text: str
    pos: int  # 1-based character offset


def _tokenize(sql: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(sql):
        m = _TOKEN_RE.match(sql, pos)
        if not m:
            _sql_error(f"unexpected character {sql[pos]!r}", pos + 1)
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(0), pos + 1))
        pos = m.end()
    tokens.append(_Token("end", "", len(sql) + 1))
    return tokens


# --- AST ------------------------------------------------------------------


@dataclass
class ColRef:
    table: str | None
    column: str
    pos: int


@dataclass
class AggCall:
    func: str  # COUNT | SUM | AVG | MIN | MAX
    arg: ColRef | None  # None means COUNT(*)
    distinct: bool
    pos: int


@dataclass
class Comparison:
    left: ColRef
    op: str
    right: object  # literal value or ColRef
    pos: int


@dataclass
class InList:
    ref: ColRef
    values: list
    pos: int


@dataclass
class LikeMatch:
    ref: ColRef
    pattern: str
    pos: int


@dataclass
class NotExpr:
    inner: object


@dataclass
class BoolExpr:
    op: str  # AND | OR
    parts: list


@dataclass
class TableRef:
    name: str
    alias: str
    pos: int


@dataclass
class Query:
    distinct: bool
    items: list | None  # None means bare '*'
    tables: list[TableRef]
    join_conditions: list  # per table after the first: expr or None (comma join)
    where: object | None
    group_by: list[ColRef]
    order_by: list[tuple[ColRef, bool]]  # (ref, descending)
    limit: int | None


class _Parser:
    def __init__(self, sql: str):
        self.tokens = _tokenize(sql)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_kw(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == "ident" and tok.text.upper() in words

    def eat_kw(self, *words: str) -> bool:
        if self.at_kw(*words):
            self.advance()
            return True
        return False

    def expect_kw(self, word: str) -> _Token:
        tok = self.peek()
        if tok.kind != "ident" or tok.text.upper() != word:
            _sql_error(f"expected {word}", tok.pos)
        return self.advance()

    def at_punct(self, ch: str) -> bool:
        tok = self.peek()
        return tok.kind == "punct" and tok.text == ch

    def eat_punct(self, ch: str) -> bool:
        if self.at_punct(ch):
            self.advance()
            return True
        return False

    def expect_punct(self, ch: str):
        tok = self.peek()
        if not self.at_punct(ch):
            _sql_error(f"expected {ch!r}", tok.pos)
        self.advance()

    def ident(self, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != "ident" or tok.text.upper() in _KEYWORDS:
            _sql_error(f"expected {what}", tok.pos)
        return self.advance()

    # -- grammar -----------------------------------------------------------

    def parse(self) -> Query:
        self.expect_kw("SELECT")
        distinct = self.eat_kw("DISTINCT")
        items = self.select_list()
        self.expect_kw("FROM")
        tables = [self.table_ref()]
        join_conditions: list = []
        while True:
            if self.eat_punct(","):
                tables.append(self.table_ref())
                join_conditions.append(None)
            elif self.at_kw("JOIN", "INNER"):
                if self.eat_kw("INNER"):
                    self.expect_kw("JOIN")
                else:
                    self.expect_kw("JOIN")
                tables.append(self.table_ref())
                if self.eat_kw("ON"):
                    join_conditions.append(self.expr())
                else:
                    join_conditions.append(None)
            else:
                break
        where = self.expr() if self.eat_kw("WHERE") else None
        group_by: list[ColRef] = []
        if self.eat_kw("GROUP"):
            self.expect_kw("BY")
            group_by.append(self.col_ref())
            while self.eat_punct(","):
                group_by.append(self.col_ref())
        order_by: list[tuple[ColRef, bool]] = []
        if self.eat_kw("ORDER"):
            self.expect_kw("BY")
            order_by.append(self.order_item())
            while self.eat_punct(","):
                order_by.append(self.order_item())
        limit = None
        if self.eat_kw("LIMIT"):
            tok = self.peek()
            if tok.kind != "number" or not re.fullmatch(r"\d+", tok.text):
                _sql_error("LIMIT expects a non-negative integer", tok.pos)
            self.advance()
            limit = int(tok.text)
        self.eat_punct(";")
        tok = self.peek()
        if tok.kind != "end":
            _sql_error(f"unexpected input {tok.text!r} after statement", tok.pos)
        return Query(distinct, items, tables, join_conditions, where, group_by, order_by, limit)

    def select_list(self):
        if self.at_punct("*"):
            self.advance()
            return None
        items = [self.select_item()]
        while self.eat_punct(","):
            items.append(self.select_item())
        return items

    def select_item(self):
        tok = self.peek()
        if tok.kind == "ident" and tok.text.upper() in _AGG_FUNCS:
            func = self.advance().text.upper()
            self.expect_punct("(")
            if self.at_punct("*"):
                star = self.advance()
                if func != "COUNT":
                    _sql_error(f"{func}(*) is not supported, only COUNT(*)", star.pos)
                self.expect_punct(")")
                return AggCall("COUNT", None, False, tok.pos)
            distinct = self.eat_kw("DISTINCT")
            if distinct and func != "COUNT":
                _sql_error("DISTINCT inside an aggregate is only supported for COUNT", tok.pos)
            ref = self.col_ref()
            self.expect_punct(")")
            return AggCall(func, ref, distinct, tok.pos)
        return self.col_ref()

    def table_ref(self) -> TableRef:
        name = self.ident("a table name")
        alias = name.text
        if self.eat_kw("AS"):
            alias = self.ident("an alias").text
        elif self.peek().kind == "ident" and self.peek().text.upper() not in _KEYWORDS:
            alias = self.advance().text
        return TableRef(name.text, alias, name.pos)

    def col_ref(self) -> ColRef:
        first = self.ident("a column name")
        if self.eat_punct("."):
            second = self.ident("a column name")
            return ColRef(first.text, second.text, first.pos)
        return ColRef(None, first.text, first.pos)

    def order_item(self) -> tuple[ColRef, bool]:
        ref = self.col_ref()
        if self.eat_kw("DESC"):
            return ref, True
        self.eat_kw("ASC")
        return ref, False

    # -- boolean expressions -------------------------------------------------

    def expr(self):
        parts = [self.and_expr()]
        while self.eat_kw("OR"):
            parts.append(self.and_expr())
        return parts[0] if len(parts) == 1 else BoolExpr("OR", parts)

    def and_expr(self):
        parts = [self.not_expr()]
        while self.eat_kw("AND"):
            parts.append(self.not_expr())
        return parts[0] if len(parts) == 1 else BoolExpr("AND", parts)

    def not_expr(self):
        if self.eat_kw("NOT"):
            return NotExpr(self.not_expr())
        return self.primary()

    def primary(self):
        if self.eat_punct("("):
            inner = self.expr()
            self.expect_punct(")")
            return inner
        ref = self.col_ref()
        tok = self.peek()
        if tok.kind == "op":
            op = self.advance().text
            if op == "<>":
                op = "!="
            return Comparison(ref, op, self.operand(), tok.pos)
        if self.eat_kw("IN"):
            self.expect_punct("(")
            values = [self.literal()]
            while self.eat_punct(","):
                values.append(self.literal())
            self.expect_punct(")")
            return InList(ref, values, tok.pos)
        if self.eat_kw("LIKE"):
            pat = self.peek()
            if pat.kind != "string":
                _sql_error("LIKE expects a string literal pattern", pat.pos)
            self.advance()
            return LikeMatch(ref, _string_value(pat.text), tok.pos)
        _sql_error("expected a comparison, IN or LIKE", tok.pos)

    def operand(self):
        tok = self.peek()
        if tok.kind in ("number", "string"):
            return self.literal()
        if tok.kind == "ident" and tok.text.upper() not in _KEYWORDS:
            return self.col_ref()
        _sql_error("expected a literal value or column reference", tok.pos)

    def literal(self):
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return int(tok.text) if re.fullmatch(r"-?\d+", tok.text) else float(tok.text)
        if tok.kind == "string":
            self.advance()
            return _string_value(tok.text)
        _sql_error("expected a literal value", tok.pos)


def _string_value(lexeme: str) -> str:
    quote = lexeme[0]
    return lexeme[1:-1].replace(quote * 2, quote)


# --- execution --------------------------------------------------------------


class _Executor:
    def __init__(self, db: EhrDatabase, query: Query):
        self.query = query
        self.frames: list[tuple[str, TableData]] = []
        if len(query.tables) > 3:
            _sql_error("at most 3 tables may be joined", query.tables[3].pos)
        seen_aliases = set()
        for ref in query.tables:
            table = db.tables.get(ref.name)
            if table is None:
                _sql_error(f"unknown table {ref.name!r}", ref.pos)
            if ref.alias in seen_aliases:
                _sql_error(f"duplicate table alias {ref.alias!r}", ref.pos)
            seen_aliases.add(ref.alias)
            self.frames.append((ref.alias, table))

    def resolve(self, ref: ColRef, max_frame: int | None = None) -> tuple[int, int, str]:
        """Map a column reference to (frame index, column index, kind)."""
        limit = len(self.frames) if max_frame is None else max_frame
        if ref.table is not None:
            for f_i, (alias, table) in enumerate(self.frames[:limit]):
                if alias == ref.table:
                    c_i = table.column_index(ref.column)
                    if c_i < 0:
                        _sql_error(f"table {alias!r} has no column {ref.column!r}", ref.pos)
                    return f_i, c_i, table.columns[c_i].value_kind
            _sql_error(f"unknown table or alias {ref.table!r}", ref.pos)
        hits = []
        for f_i, (_alias, table) in enumerate(self.frames[:limit]):
            c_i = table.column_index(ref.column)
            if c_i >= 0:
                hits.append((f_i, c_i, table.columns[c_i].value_kind))
        if not hits:
            _sql_error(f"unknown column {ref.column!r}", ref.pos)
        if len(hits) > 1:
            _sql_error(f"column {ref.column!r} is ambiguous, qualify it with a table name", ref.pos)
        return hits[0]

    def value(self, combo: tuple, loc: tuple[int, int, str]):
        return combo[loc[0]][loc[1]]

    # -- predicate evaluation -------------------------------------------------

    def coerce_literal(self, literal, kind: str, pos: int):
        """Coerce a parsed literal to a column kind, or SqlError."""
        if kind == "text":
            if isinstance(literal, str):
                return literal
            if isinstance(literal, int):
                return str(literal)
            _sql_error(f"cannot compare text column with {literal!r}", pos)
        if kind in ("integer", "real"):
            if isinstance(literal, (int, float)):
                return literal
            try:
                return float(literal)
            except ValueError:
                _sql_error(f"cannot compare numeric column with {literal!r}", pos)
        if kind == "datetime":
            if isinstance(literal, str):
                try:
                    return parse_datetime(literal)
                except ValueError:
                    _sql_error(f"cannot parse {literal!r} as a date", pos)
            if isinstance(literal, datetime):
                return literal
            _sql_error(f"cannot compare datetime column with {literal!r}", pos)
        _sql_error(f"unsupported column kind {kind!r}", pos)

    def compile_predicate(self, node, max_frame: int | None):
        """Resolve references and pre-coerce literals; returns row -> bool."""
        if isinstance(node, BoolExpr):
            parts = [self.compile_predicate(p, max_frame) for p in node.parts]
            if node.op == "AND":
                return lambda combo: all(p(combo) for p in parts)
            return lambda combo: any(p(combo) for p in parts)
        if isinstance(node, NotExpr):
            inner = self.compile_predicate(node.inner, max_frame)
            return lambda combo: not inner(combo)
        if isinstance(node, Comparison):
            loc = self.resolve(node.left, max_frame)
            op = node.op
            if isinstance(node.right, ColRef):
                right_loc = self.resolve(node.right, max_frame)
                if not _kinds_comparable(loc[2], right_loc[2]):
                    _sql_error(
                        f"cannot compare {loc[2]} column with {right_loc[2]} column", node.pos
                    )
                return lambda combo: _compare(
                    self.value(combo, loc), op, self.value(combo, right_loc)
                )
            literal = self.coerce_literal(node.right, loc[2], node.pos)
            return lambda combo: _compare(self.value(combo, loc), op, literal)
        if isinstance(node, InList):
            loc = self.resolve(node.ref, max_frame)
            values = [self.coerce_literal(v, loc[2], node.pos) for v in node.values]
            return lambda combo: any(_compare(self.value(combo, loc), "=", v) for v in values)
        if isinstance(node, LikeMatch):
            loc = self.resolve(node.ref, max_frame)
            if loc[2] != "text":
                _sql_error("LIKE requires a text column", node.pos)
            rx = _like_regex(node.pattern)
            return lambda combo: (
                self.value(combo, loc) is not None and rx.fullmatch(self.value(combo, loc)) is not None
            )
        raise AssertionError(f"unhandled predicate node {node!r}")

    # -- pipeline ---------------------------------------------------------------

    def run(self) -> list[tuple]:
        q = self.query
        combos = [(row,) for row in self.frames[0][1].rows]
        for t_i in range(1, len(self.frames)):
            cond = q.join_conditions[t_i - 1]
            pred = self.compile_predicate(cond, t_i + 1) if cond is not None else None
            rows = self.frames[t_i][1].rows
            combos = [
                combo + (row,)
                for combo in combos
                for row in rows
                if pred is None or pred(combo + (row,))
            ]
        if q.where is not None:
            pred = self.compile_predicate(q.where, None)
            combos = [c for c in combos if pred(c)]

        has_agg = q.items is not None and any(isinstance(it, AggCall) for it in q.items)
        if q.group_by or has_agg:
            out = self.aggregate_rows(combos)
        else:
            out = self.plain_rows(combos)
        if q.distinct:
            seen = set()
            deduped = []
            for row in out:
                key = tuple(row)
                if key not in seen:
                    seen.add(key)
                    deduped.append(row)
            out = deduped
        if q.limit is not None:
            out = out[: q.limit]
        return out

    def plain_rows(self, combos) -> list[tuple]:
        q = self.query
        for ref, desc in reversed(q.order_by):  # successive stable sorts
            loc = self.resolve(ref)
            combos = sorted(
                combos, key=lambda c, loc=loc: _sort_key(self.value(c, loc)), reverse=desc
            )
        if q.items is None:
            return [tuple(cell for frame_row in combo for cell in frame_row) for combo in combos]
        locs = [self.resolve(it) for it in q.items]
        return [tuple(self.value(c, loc) for loc in locs) for c in combos]

    def aggregate_rows(self, combos) -> list[tuple]:
        q = self.query
        if q.items is None:
            _sql_error("'*' cannot be combined with GROUP BY or aggregates", 1)
        group_locs = [self.resolve(ref) for ref in q.group_by]

        if group_locs:
            groups: dict[tuple, list] = {}
            for combo in combos:
                key = tuple(self.value(combo, loc) for loc in group_locs)
                groups.setdefault(key, []).append(combo)
            buckets = list(groups.items())
        else:
            buckets = [((), combos)]

        plans = []
        for item in q.items:
            if isinstance(item, AggCall):
                loc = self.resolve(item.arg) if item.arg is not None else None
                if item.func in ("SUM", "AVG") and loc is not None and loc[2] not in ("integer", "real"):
                    _sql_error(f"{item.func} requires a numeric column", item.pos)
                plans.append(("agg", item, loc))
            else:
                loc = self.resolve(item)
                if loc not in group_locs:
                    _sql_error(
                        f"column {item.column!r} must appear in GROUP BY or inside an aggregate",
                        item.pos,
                    )
                plans.append(("key", None, group_locs.index(loc)))

        out = []
        for key, rows in buckets:
            cells = []
            for tag, item, loc in plans:
                if tag == "key":
                    cells.append(key[loc])
                else:
                    cells.append(self.eval_aggregate(item, loc, rows))
            out.append(tuple(cells))

        if q.order_by:
            order_plan = []
            for ref, desc in q.order_by:
                loc = self.resolve(ref)
                if loc not in group_locs:
                    _sql_error("ORDER BY on aggregated queries must name a GROUP BY column", ref.pos)
                order_plan.append((group_locs.index(loc), desc))
            # out rows may not carry the key columns; sort via the bucket keys
            keyed = list(zip([b[0] for b in buckets], out))
            for k_i, desc in reversed(order_plan):
                keyed = sorted(keyed, key=lambda kv: _sort_key(kv[0][k_i]), reverse=desc)
            out = [row for _key, row in keyed]
        return out

    def eval_aggregate(self, item: AggCall, loc, rows):
        if item.arg is None:  # COUNT(*)
            return len(rows)
        values = [self.value(c, loc) for c in rows]
        values = [v for v in values if v is not None]
        if item.func == "COUNT":
            return len(set(values)) if item.distinct else len(values)
        if not values:
            return None
        if item.func == "MIN":
            return min(values)
        if item.func == "MAX":
            return max(values)
        total = sum(values)
        return total if item.func == "SUM" else total / len(values)


def _kinds_comparable(a: str, b: str) -> bool:
    return a == b or {a, b} <= {"integer", "real"}


def _compare(left, op: str, right) -> bool:
    if left is None or right is None:
        return False
    if op == "=":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    return left >= right


def _sort_key(value):
    # None sorts last ascending; values within a column share one type
    return (value is None, value)


def _like_regex(pattern: str) -> re.Pattern:
    out = []
    for ch in pattern:
        if ch == "%":
            out.append(".*")
        elif ch == "_":
            out.append(".")
        else:
            out.append(re.escape(ch))
    return re.compile("".join(out), re.DOTALL)


def execute(db: EhrDatabase, sql: str) -> list[tuple]:
    """Parse and run one statement; raises ToolError('SqlError', ...)."""
    if not isinstance(sql, str) or not sql.strip():
        raise ToolError("SqlError", "empty SQL statement at position 1")
    query = _Parser(sql).parse()
    return _Executor(db, query).run()
