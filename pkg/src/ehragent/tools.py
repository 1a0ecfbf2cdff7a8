"""The six database tools exposed to generated plans.

All tools are pure functions of (database, arguments) and fail only by
raising ToolError, whose code and message are forwarded verbatim to the
plan runtime (and from there into the conversation, so messages must stay
readable).

Filter condition grammar (one condition per call; see docs/grammars.md):

    COND   := COLUMN OP LITERAL
            | min(COLUMN) | max(COLUMN)
            | count[COLUMN GROUP-BY GCOL] OP INTEGER
    OP     := = | != | < | <= | > | >=

Text comparison is exact and case-sensitive; discovering a wrong-case
value is deliberately left to the debugging loop.

Arithmetic grammar for Calculate:

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | atom
    atom   := NUMBER | '(' expr ')' | FUNC '(' expr (',' expr)* ')'
    FUNC   := mean | max | min | sum
"""

from __future__ import annotations

import re
from datetime import datetime, timedelta

from .store import EhrDatabase, TableData, parse_datetime, render_datetime

TOOL_NAMES = ("LoadDB", "FilterDB", "GetValue", "Calculate", "Calendar", "SQLInterpreter")

ERROR_CODES = (
    "UnknownTable",
    "UnknownColumn",
    "BadCondition",
    "EmptyResult",
    "BadExpression",
    "BadDate",
    "SqlError",
)

# Natural-language definitions of the callables available inside plans.
# This block appears in every planning and debugging prompt.
TOOL_DEFINITIONS = """\
LoadDB(table_name) -> table
    Loads a table from the database by exact, case-sensitive name.
    Example: LoadDB('patients')
FilterDB(table, condition) -> table
    Keeps the rows of a table that satisfy one condition. Conditions are
    'COLUMN OP VALUE' with OP one of = != < <= > >=, or 'min(COLUMN)' /
    'max(COLUMN)' to keep the rows achieving the extreme value, or
    'count[COLUMN GROUP-BY GROUP_COLUMN] OP N' to keep rows of groups
    whose non-null COLUMN count satisfies the comparison. Filtering that
    matches no rows is an error. Example: FilterDB(t, 'GENDER=F')
GetValue(table, spec) -> value or list of values
    'COLUMN' returns the non-null values of that column in row order;
    'COLUMN, agg' computes an aggregate over them, agg one of mean, max,
    min, sum, count. Example: GetValue(t, 'SUBJECT_ID, count')
Calculate(expression) -> number
    Evaluates an arithmetic expression: + - * / parentheses, and
    mean(...), max(...), min(...), sum(...) over comma-separated numbers.
    Example: Calculate('(2+3)*4')
Calendar(anchor, offset) -> date string
    Shifts a date. anchor is 'YYYY-MM-DD', 'YYYY-MM-DD HH:MM:SS' or 'now'
    (the database system time); offset is '[+|-]N unit' with unit one of
    day, week, month, year (plural accepted).
    Example: Calendar('now', '-1 year')
SQLInterpreter(sql) -> list of rows
    Executes one SELECT statement over the database (joins of up to three
    tables, WHERE with AND/OR/NOT/IN/LIKE, GROUP BY, ORDER BY, LIMIT,
    aggregates COUNT/SUM/AVG/MIN/MAX). An empty result set is an error.
    Example: SQLInterpreter('SELECT COUNT(*) FROM patients')"""


class ToolError(Exception):
    """A tool failure with a stable code and a human-readable message."""

    def __init__(self, code: str, message: str):
        if code not in ERROR_CODES:
            raise ValueError(f"unknown tool error code: {code!r}")
        if not message:
            raise ValueError("tool error message must be non-empty")
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


# ---------------------------------------------------------------------------
# LoadDB


def load_db(db: EhrDatabase, table_name: str) -> TableData:
    """Look up a table by exact name (no copy; tables are read-only)."""
    try:
        return db.tables[table_name]
    except KeyError:
        known = ", ".join(sorted(db.tables)) or "<none>"
        raise ToolError(
            "UnknownTable",
            f"no table named {table_name!r}; names are case-sensitive. "
            f"Available tables: {known}",
        ) from None


# ---------------------------------------------------------------------------
# FilterDB

_COND_EXTREMUM_RE = re.compile(r"^(min|max)\(\s*([A-Za-z_]\w*)\s*\)$")
_COND_GROUPCOUNT_RE = re.compile(
    r"^count\[\s*([A-Za-z_]\w*)\s+GROUP-BY\s+([A-Za-z_]\w*)\s*\]\s*(!=|<=|>=|=|<|>)\s*([+-]?\d+)$"
)
_COND_COMPARE_RE = re.compile(r"^([A-Za-z_]\w*)\s*(!=|<=|>=|=|<|>)\s*(.*)$", re.DOTALL)

_OPS = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def _column_of(table: TableData, name: str) -> int:
    idx = table.column_index(name)
    if idx < 0:
        raise ToolError(
            "UnknownColumn",
            f"table {table.name!r} has no column {name!r}; "
            f"columns are {table.column_names()}",
        )
    return idx


def _unquote(literal: str) -> str:
    literal = literal.strip()
    if len(literal) >= 2 and literal[0] == literal[-1] and literal[0] in ("'", '"'):
        return literal[1:-1]
    return literal


def _typed_literal(literal: str, kind: str, op: str):
    """Parse a condition literal under the column kind.

    Ordered comparisons require a parseable literal; for = and != an
    unparseable literal falls back to comparing canonical string forms.
    """
    if kind == "text":
        return literal
    try:
        if kind == "integer":
            return int(literal) if re.match(r"^[+-]?\d+$", literal) else float(literal)
        if kind == "real":
            return float(literal)
        if kind == "datetime":
            return parse_datetime(literal)
    except ValueError:
        pass
    if op in ("=", "!="):
        return None  # caller compares string renderings
    raise ToolError(
        "BadCondition",
        f"literal {literal!r} does not parse as {kind}, required for ordered comparison",
    )


def _render_cell(value) -> str:
    if isinstance(value, datetime):
        return render_datetime(value)
    return str(value)


def filter_db(table: TableData, condition: str) -> TableData:
    """Apply one parsed condition; original row order is preserved.

    Null cells satisfy no comparison. Zero matching rows raise
    EmptyResult so the planner observes the miss.
    """
    condition = condition.strip()
    if not condition:
        raise ToolError("BadCondition", "empty filter condition")

    m = _COND_EXTREMUM_RE.match(condition)
    if m:
        which, col_name = m.group(1), m.group(2)
        idx = _column_of(table, col_name)
        values = [row[idx] for row in table.rows if row[idx] is not None]
        if not values:
            raise ToolError("EmptyResult", f"column {col_name!r} has no non-null values")
        target = min(values) if which == "min" else max(values)
        kept = [row for row in table.rows if row[idx] == target]
        return TableData(table.name, table.columns, kept)

    m = _COND_GROUPCOUNT_RE.match(condition)
    if m:
        col_name, group_name, op, count_literal = m.groups()
        idx = _column_of(table, col_name)
        g_idx = _column_of(table, group_name)
        threshold = int(count_literal)
        counts: dict = {}
        for row in table.rows:
            if row[idx] is not None:
                counts[row[g_idx]] = counts.get(row[g_idx], 0) + 1
        compare = _OPS[op]
        kept = [row for row in table.rows if compare(counts.get(row[g_idx], 0), threshold)]
        if not kept:
            raise ToolError("EmptyResult", f"no rows satisfy {condition!r}")
        return TableData(table.name, table.columns, kept)

    m = _COND_COMPARE_RE.match(condition)
    if m:
        col_name, op, raw_literal = m.groups()
        idx = _column_of(table, col_name)
        kind = table.columns[idx].value_kind
        literal = _unquote(raw_literal)
        typed = _typed_literal(literal, kind, op)
        compare = _OPS[op]
        if typed is None:  # unparseable literal under = / != -> string compare
            kept = [
                row
                for row in table.rows
                if row[idx] is not None and compare(_render_cell(row[idx]), literal)
            ]
        else:
            kept = [
                row for row in table.rows if row[idx] is not None and compare(row[idx], typed)
            ]
        if not kept:
            raise ToolError("EmptyResult", f"no rows satisfy {condition!r}")
        return TableData(table.name, table.columns, kept)

    raise ToolError(
        "BadCondition",
        f"cannot parse condition {condition!r}; expected 'COLUMN OP VALUE', "
        "'min(COLUMN)', 'max(COLUMN)' or 'count[COLUMN GROUP-BY GCOL] OP N'",
    )


# ---------------------------------------------------------------------------
# GetValue

_AGGREGATES = ("mean", "max", "min", "sum", "count")


def get_value(table: TableData, spec: str):
    """Column values, or a single aggregate over them."""
    parts = [p.strip() for p in spec.split(",")]
    if len(parts) == 1 and parts[0]:
        column, agg = parts[0], None
    elif len(parts) == 2 and parts[0] and parts[1]:
        column, agg = parts
    else:
        raise ToolError(
            "BadCondition",
            f"bad value spec {spec!r}; expected 'COLUMN' or 'COLUMN, aggregate'",
        )

    idx = _column_of(table, column)
    kind = table.columns[idx].value_kind
    values = [row[idx] for row in table.rows if row[idx] is not None]

    if agg is None:
        return values
    if agg not in _AGGREGATES:
        raise ToolError(
            "BadCondition", f"unknown aggregate {agg!r}; use one of {', '.join(_AGGREGATES)}"
        )
    if agg == "count":
        return len(values)
    if not values:
        raise ToolError("BadExpression", f"cannot take {agg} of column {column!r}: no values")
    if agg == "min":
        return min(values)
    if agg == "max":
        return max(values)
    # mean / sum require a numeric column
    if kind not in ("integer", "real"):
        raise ToolError(
            "BadExpression", f"aggregate {agg!r} needs a numeric column, {column!r} is {kind}"
        )
    total = sum(values)
    return total if agg == "sum" else total / len(values)


# ---------------------------------------------------------------------------
# Calculate

_NUMBER_RE = re.compile(r"\d+(\.\d*)?([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?")
_FUNCTIONS = ("mean", "max", "min", "sum")


class _ExprParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, why: str):
        raise ToolError("BadExpression", f"{why} at position {self.pos + 1} in {self.text!r}")

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def eat(self, ch: str) -> bool:
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def parse(self) -> float:
        value = self.expr()
        self.skip_ws()
        if self.pos != len(self.text):
            self.fail("unexpected trailing input")
        return value

    def expr(self) -> float:
        value = self.term()
        while True:
            if self.eat("+"):
                value += self.term()
            elif self.eat("-"):
                value -= self.term()
            else:
                return value

    def term(self) -> float:
        value = self.unary()
        while True:
            if self.eat("*"):
                value *= self.unary()
            elif self.eat("/"):
                divisor = self.unary()
                if divisor == 0:
                    self.fail("division by zero")
                value /= divisor
            else:
                return value

    def unary(self) -> float:
        if self.eat("-"):
            return -self.unary()
        return self.atom()

    def atom(self) -> float:
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            value = self.expr()
            if not self.eat(")"):
                self.fail("expected ')'")
            return value
        m = _NUMBER_RE.match(self.text, self.pos)
        if m:
            self.pos = m.end()
            return float(m.group(0))
        word = re.match(r"[A-Za-z]+", self.text[self.pos:])
        if word and word.group(0) in _FUNCTIONS:
            name = word.group(0)
            self.pos += len(name)
            if not self.eat("("):
                self.fail(f"expected '(' after {name}")
            args = [self.expr()]
            while self.eat(","):
                args.append(self.expr())
            if not self.eat(")"):
                self.fail("expected ')'")
            if name == "sum":
                return sum(args)
            if name == "mean":
                return sum(args) / len(args)
            if name == "min":
                return min(args)
            return max(args)
        self.fail("expected a number, '(' or a function")


def calculate(expression: str):
    """Evaluate an arithmetic expression; integral results come back as int."""
    if not isinstance(expression, str) or not expression.strip():
        raise ToolError("BadExpression", "expression must be a non-empty string")
    value = _ExprParser(expression).parse()
    if isinstance(value, float) and value.is_integer() and abs(value) < 1e15:
        return int(value)
    return value


# ---------------------------------------------------------------------------
# Calendar

_OFFSET_RE = re.compile(r"^\s*([+-])?\s*(\d+)\s*(day|days|week|weeks|month|months|year|years)\s*$")

_DAYS_IN_MONTH = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)


def _month_length(year: int, month: int) -> int:
    if month == 2 and (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)):
        return 29
    return _DAYS_IN_MONTH[month - 1]


def _shift_months(anchor: datetime, months: int) -> datetime:
    total = anchor.year * 12 + (anchor.month - 1) + months
    year, month0 = divmod(total, 12)
    month = month0 + 1
    day = min(anchor.day, _month_length(year, month))
    return anchor.replace(year=year, month=month, day=day)


def calendar_shift(db: EhrDatabase, anchor: str, offset: str) -> str:
    """Shift an anchor date by a signed offset; month/year arithmetic clamps
    the day of month to the target month's length."""
    anchor = anchor.strip()
    if anchor == "now":
        base = db.system_time
    else:
        try:
            base = parse_datetime(anchor)
        except ValueError:
            raise ToolError(
                "BadDate",
                f"anchor {anchor!r} is not 'now' or an ISO date 'YYYY-MM-DD[ HH:MM:SS]'",
            ) from None

    m = _OFFSET_RE.match(offset)
    if not m:
        raise ToolError(
            "BadDate",
            f"offset {offset!r} is not of the form '[+|-]N day|week|month|year'",
        )
    sign = -1 if m.group(1) == "-" else 1
    amount = sign * int(m.group(2))
    unit = m.group(3).rstrip("s")

    if unit == "day":
        shifted = base + timedelta(days=amount)
    elif unit == "week":
        shifted = base + timedelta(weeks=amount)
    elif unit == "month":
        shifted = _shift_months(base, amount)
    else:
        shifted = _shift_months(base, 12 * amount)
    return render_datetime(shifted)


# ---------------------------------------------------------------------------
# SQLInterpreter

def sql_interpreter(db: EhrDatabase, sql: str) -> list[tuple]:
    """Execute one SELECT statement; zero result rows raise EmptyResult."""
    from . import sqlsubset  # deferred: keeps module import cheap

    rows = sqlsubset.execute(db, sql)
    if not rows:
        raise ToolError("EmptyResult", "the query returned no rows")
    return rows


# Dispatch table used by the executor bridge and the CLI.
def tool_dispatch(db: EhrDatabase):
    return {
        "LoadDB": lambda name: load_db(db, name),
        "FilterDB": filter_db,
        "GetValue": get_value,
        "Calculate": calculate,
        "Calendar": lambda anchor, offset: calendar_shift(db, anchor, offset),
        "SQLInterpreter": lambda sql: sql_interpreter(db, sql),
    }
