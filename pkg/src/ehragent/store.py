"""EHR database loading: CSV tables + a JSON metadata document.

Metadata file shape (UTF-8 JSON):

    {
      "overall_description": "...",
      "system_time": "2105-12-31 00:00:00",        # optional
      "tables": [
        {"name": "patients",
         "columns": [
           {"name": "SUBJECT_ID", "kind": "integer", "description": "..."},
           ...
         ]}
      ]
    }

Tables directory holds one ``<name>.csv`` per declared table (header row,
comma separator, RFC-4180 quoting, empty field = null).  Column ``kind``
is one of integer/real/text/datetime; when omitted it is inferred from the
data in the order integer -> real -> datetime -> text.

The loaded database is immutable after ``load_database`` returns and safe
for concurrent readers.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

VALUE_KINDS = ("integer", "real", "text", "datetime")

# Inference order when metadata omits a column kind.
_INFERENCE_ORDER = ("integer", "real", "datetime")

_INT_RE = re.compile(r"^[+-]?\d+$")
_REAL_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")

# Fallback system time for a database with no datetime cells at all.
_EPOCH = datetime(1970, 1, 1)


class StoreError(Exception):
    """Base class for database loading failures."""


class MissingTable(StoreError):
    pass


class SchemaMismatch(StoreError):
    pass


class ParseError(StoreError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    value_kind: str
    description: str = ""


@dataclass
class TableData:
    name: str
    columns: list[ColumnSchema]
    rows: list[tuple]

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column_index(self, name: str) -> int:
        """Index of an exactly-named column, or -1."""
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        return -1


@dataclass
class EhrDatabase:
    overall_description: str
    tables: dict[str, TableData] = field(default_factory=dict)
    system_time: datetime = _EPOCH


def parse_datetime(text: str) -> datetime:
    """Parse ISO-8601 'YYYY-MM-DD[ HH:MM:SS]'; raises ValueError."""
    text = text.strip()
    for fmt in ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"not an ISO-8601 date or datetime: {text!r}")


def render_datetime(value: datetime) -> str:
    """Inverse of parse_datetime; midnight renders date-only."""
    if (value.hour, value.minute, value.second) == (0, 0, 0):
        return value.strftime("%Y-%m-%d")
    return value.strftime("%Y-%m-%d %H:%M:%S")


def parse_cell(text: str, kind: str):
    """Parse one CSV field under a value kind. Empty field is the null sentinel."""
    if text == "":
        return None
    if kind == "integer":
        if not _INT_RE.match(text.strip()):
            raise ValueError(f"not an integer: {text!r}")
        return int(text)
    if kind == "real":
        if not _REAL_RE.match(text.strip()):
            raise ValueError(f"not a real number: {text!r}")
        return float(text)
    if kind == "datetime":
        return parse_datetime(text)
    if kind == "text":
        return text
    raise ValueError(f"unknown value kind: {kind!r}")


def _cell_fits(text: str, kind: str) -> bool:
    try:
        parse_cell(text, kind)
        return True
    except ValueError:
        return False


def _infer_kind(raw_values: list[str]) -> str:
    """First kind in integer -> real -> datetime that fits every non-null cell."""
    present = [v for v in raw_values if v != ""]
    if not present:
        return "text"
    for kind in _INFERENCE_ORDER:
        if all(_cell_fits(v, kind) for v in present):
            return kind
    return "text"


def _require_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise SchemaMismatch(f"unknown key(s) in {where}: {sorted(unknown)}")


def load_database(root_path: str | Path, metadata_path: str | Path) -> EhrDatabase:
    """Load every table declared in the metadata file from root_path.

    The declared table set and the ``*.csv`` files on disk must match
    exactly; each CSV header must equal the declared column names in
    order.
    """
    root = Path(root_path)
    try:
        meta = json.loads(Path(metadata_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read metadata {metadata_path}: {exc}") from exc

    _require_keys(meta, {"overall_description", "system_time", "tables"}, "metadata")
    description = meta.get("overall_description", "")
    declared = meta.get("tables", [])

    db = EhrDatabase(overall_description=description)
    seen: set[str] = set()
    max_dt: datetime | None = None

    for entry in declared:
        _require_keys(entry, {"name", "columns"}, "table entry")
        name = entry["name"]
        if name in seen:
            raise SchemaMismatch(f"table {name!r} declared twice in metadata")
        seen.add(name)

        csv_path = root / f"{name}.csv"
        if not csv_path.is_file():
            raise MissingTable(f"metadata names table {name!r} but {csv_path} does not exist")

        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaMismatch(f"{csv_path} has no header row") from None
            raw_rows = [row for row in reader]

        col_names = [c["name"] for c in entry["columns"]]
        if len(col_names) != len(set(col_names)):
            raise SchemaMismatch(f"duplicate column names in metadata for table {name!r}")
        if header != col_names:
            raise SchemaMismatch(
                f"header of {csv_path} is {header}, metadata declares {col_names}"
            )

        for r_i, row in enumerate(raw_rows, start=2):
            if len(row) != len(col_names):
                raise SchemaMismatch(
                    f"{csv_path} line {r_i}: {len(row)} fields, expected {len(col_names)}"
                )

        columns = []
        for c_i, col in enumerate(entry["columns"]):
            _require_keys(col, {"name", "kind", "description"}, f"column of {name}")
            kind = col.get("kind")
            if kind is None:
                kind = _infer_kind([row[c_i] for row in raw_rows])
            elif kind not in VALUE_KINDS:
                raise SchemaMismatch(f"table {name!r} column {col['name']!r}: bad kind {kind!r}")
            columns.append(ColumnSchema(col["name"], kind, col.get("description", "")))

        rows = []
        for r_i, row in enumerate(raw_rows, start=2):
            cells = []
            for col, raw in zip(columns, row):
                try:
                    value = parse_cell(raw, col.value_kind)
                except ValueError as exc:
                    raise ParseError(f"{csv_path} line {r_i}, column {col.name!r}: {exc}") from exc
                if isinstance(value, datetime) and (max_dt is None or value > max_dt):
                    max_dt = value
                cells.append(value)
            rows.append(tuple(cells))

        db.tables[name] = TableData(name=name, columns=columns, rows=rows)

    on_disk = {p.stem for p in root.glob("*.csv")}
    extra = on_disk - seen
    if extra:
        raise SchemaMismatch(f"tables directory has file(s) not declared in metadata: {sorted(extra)}")

    if meta.get("system_time") is not None:
        try:
            db.system_time = parse_datetime(meta["system_time"])
        except ValueError as exc:
            raise ParseError(f"bad system_time in metadata: {exc}") from exc
    elif max_dt is not None:
        db.system_time = max_dt
    return db


def render_metadata(db: EhrDatabase) -> str:
    """Deterministic prose block describing the database, for prompts.

    First line is the overall description; each table then contributes a
    'Table: <name>' header and one '<column>: <description>' line per
    column, in load order.
    """
    lines = [db.overall_description, ""]
    for table in db.tables.values():
        lines.append(f"Table: {table.name}")
        for col in table.columns:
            lines.append(f"  {col.name}: {col.description}")
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def table_names_of(db: EhrDatabase) -> list[str]:
    return sorted(db.tables)
