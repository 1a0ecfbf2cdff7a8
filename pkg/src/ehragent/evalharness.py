"""Batch evaluation: run a question set, score it, and render a report.

Success rate (SR) is the share of questions whose final answer matches
gold; completion rate (CR) is the share with at least one error-free
execution, right or wrong.  Completion is mechanical, so a high CR does
not by itself mean good answers.  Questions are bucketed into complexity
levels I-IV by the number of distinct tables in the gold solution.

Failed questions are labeled with a deterministic heuristic taxonomy
(rule order: context_length, incorrect_sql, date_time, fail_to_follow,
fail_to_debug, incorrect_logic); it approximates a manual error analysis
and is marked as heuristic in the report.

Dataset file: newline-delimited JSON objects
    {"id": str, "question": str, "answer": str | [str],
     "gold_tables"?: [str], "gold_sql"?: str}

The report is a JSON document plus an aligned plain-text table (levels as
columns, SR/CR rows).  With a shared memory store items run in order and
inserts feed later retrievals; --fresh-memory gives every item a detached
snapshot instead.  Shared-memory runs with parallelism > 1 are not
deterministic (completion order decides the demo sets); replay-based runs
should use parallelism 1.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from hashlib import sha256
from pathlib import Path

from .memory import MemoryStore
from .orchestrator import AgentConfig, QueryResult, run_query
from .store import EhrDatabase

LEVELS = ("I", "II", "III", "IV")

_FROM_JOIN_RE = re.compile(r"\b(?:FROM|JOIN)\s+([A-Za-z_]\w*)", re.IGNORECASE)


class LevelUndefined(Exception):
    pass


@dataclass(frozen=True)
class DatasetItem:
    id: str
    question: str
    gold_answer: str | list[str]
    gold_tables: list[str] | None = None
    gold_sql: str | None = None


@dataclass
class LevelCounts:
    total: int = 0
    successes: int = 0
    completions: int = 0

    def sr(self) -> str | None:
        return _percent(self.successes, self.total)

    def cr(self) -> str | None:
        return _percent(self.completions, self.total)


@dataclass
class EvalReport:
    overall: LevelCounts
    levels: dict[str, LevelCounts]
    failures: dict[str, int]
    items: list[dict]
    run: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def counts(c: LevelCounts) -> dict:
            return {
                "total": c.total,
                "successes": c.successes,
                "completions": c.completions,
                "sr": c.sr(),
                "cr": c.cr(),
            }

        return {
            "overall": counts(self.overall),
            "levels": {name: counts(c) for name, c in self.levels.items()},
            "failures": dict(sorted(self.failures.items())),
            "items": self.items,
            "run": self.run,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Aligned table, levels as columns."""
        names = [lvl for lvl in LEVELS if self.levels[lvl].total] + ["All"]
        rows = [
            ["Level"] + names,
            ["SR"] + [self.levels[l].sr() or "-" for l in names[:-1]] + [self.overall.sr() or "-"],
            ["CR"] + [self.levels[l].cr() or "-" for l in names[:-1]] + [self.overall.cr() or "-"],
            ["N"]
            + [str(self.levels[l].total) for l in names[:-1]]
            + [str(self.overall.total)],
        ]
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        return "\n".join(
            "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
            for row in rows
        )


def _percent(count: int, total: int) -> str | None:
    """count/total as a percentage, two decimals, half-up."""
    if total == 0:
        return None
    value = Decimal(count) * 100 / Decimal(total)
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


# --- dataset -------------------------------------------------------------------


def load_dataset(path: str | Path) -> list[DatasetItem]:
    items = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            item = DatasetItem(
                id=rec["id"],
                question=rec["question"],
                gold_answer=rec["answer"],
                gold_tables=rec.get("gold_tables"),
                gold_sql=rec.get("gold_sql"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"bad dataset record at {path}:{line_no}: {exc}") from exc
        if item.gold_tables is None and item.gold_sql is None:
            raise ValueError(f"dataset item {item.id!r} needs gold_tables or gold_sql")
        items.append(item)
    return items


def complexity_level(item: DatasetItem) -> str:
    """I-IV by the number of distinct tables in the gold solution."""
    if item.gold_tables:
        names = {t.casefold() for t in item.gold_tables}
    elif item.gold_sql:
        names = {m.casefold() for m in _FROM_JOIN_RE.findall(item.gold_sql)}
    else:
        names = set()
    if not names:
        raise LevelUndefined(f"item {item.id!r} has neither usable gold_tables nor gold_sql")
    n = len(names)
    return LEVELS[min(n, 4) - 1]


# --- answer comparison -----------------------------------------------------------


def _as_number(text: str) -> float | None:
    try:
        value = float(text)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def _element_equal(a: str, b: str) -> bool:
    a, b = a.strip(), b.strip()
    na, nb = _as_number(a), _as_number(b)
    if na is not None and nb is not None:
        return math.isclose(na, nb, rel_tol=1e-6, abs_tol=1e-9)
    return a.casefold() == b.casefold()


def _norm_key(text: str) -> str:
    """Canonical multiset key: numbers collapse to one spelling."""
    number = _as_number(text.strip())
    if number is not None:
        return repr(number)
    return text.strip().casefold()


def _split_list(text: str) -> list[str]:
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    parts = [p.strip() for p in text.split(",")]
    out = []
    for part in parts:
        if len(part) >= 2 and part[0] == part[-1] and part[0] in ("'", '"'):
            part = part[1:-1]
        if part:
            out.append(part)
    return out


def compare_answers(predicted, gold) -> bool:
    """Normalized comparison: trimmed, casefolded, numeric within 1e-6
    relative tolerance; lists match as multisets."""
    if predicted is None:
        return False
    if isinstance(gold, list):
        elements = predicted if isinstance(predicted, list) else _split_list(str(predicted))
        if len(elements) != len(gold):
            return False
        return sorted(_norm_key(str(e)) for e in elements) == sorted(
            _norm_key(str(g)) for g in gold
        )
    if isinstance(predicted, list):
        return len(predicted) == 1 and _element_equal(str(predicted[0]), str(gold))
    return _element_equal(str(predicted), str(gold))


# --- failure classification -------------------------------------------------------


def classify_failure(result: QueryResult, answer_correct: bool | None = None) -> str:
    """Taxonomy label for a failed item.

    Unsolved results carry the label computed by the run loop (rule order
    context_length -> incorrect_sql -> date_time -> fail_to_follow ->
    fail_to_debug); a solved result with a wrong answer is incorrect_logic.
    """
    if result.status == "unsolved":
        return result.failure_label or "fail_to_follow"
    if answer_correct is False:
        return "incorrect_logic"
    raise ValueError("classify_failure is only defined for failed items")


# --- evaluation --------------------------------------------------------------------


def evaluate(
    cfg: AgentConfig,
    db: EhrDatabase,
    dataset: list[DatasetItem],
    backend,
    store: MemoryStore | None = None,
    fresh_memory: bool = False,
    parallel: int = 1,
    trace_id: str | None = None,
) -> EvalReport:
    """Run every item and fold the outcomes into an EvalReport.

    Item-level failures never abort the run.  With fresh_memory each item
    sees a detached snapshot of the store and no inserts persist.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if store is None:
        store = MemoryStore(None)

    def run_item(item: DatasetItem) -> QueryResult:
        item_store = store.snapshot() if fresh_memory else store
        return run_query(cfg, db, item_store, backend, item.question)

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(run_item, dataset))
    else:
        results = [run_item(item) for item in dataset]

    overall = LevelCounts()
    levels = {name: LevelCounts() for name in LEVELS}
    failures: dict[str, int] = {}
    item_rows = []

    for item, result in zip(dataset, results):
        level = complexity_level(item)
        solved = result.status == "solved"
        correct = compare_answers(result.final_answer, item.gold_answer) if solved else False
        success = solved and correct
        completion = any(o.status == "success" for o in result.transcript.executions())

        label = None
        if not success:
            label = classify_failure(result, answer_correct=correct if solved else None)
            failures[label] = failures.get(label, 0) + 1

        for bucket in (overall, levels[level]):
            bucket.total += 1
            bucket.successes += success
            bucket.completions += completion

        item_rows.append(
            {
                "id": item.id,
                "level": level,
                "status": result.status,
                "predicted": result.final_answer,
                "success": success,
                "completion": completion,
                "steps_used": result.steps_used,
                "failure_label": label,
                "approx_tokens": result.approx_tokens,
            }
        )

    run_meta = {
        "config_hash": config_hash(cfg),
        "trace_id": trace_id,
        "items": len(dataset),
        "fresh_memory": fresh_memory,
        "parallel": parallel,
        "taxonomy": "heuristic",
    }
    return EvalReport(overall=overall, levels=levels, failures=failures, items=item_rows, run=run_meta)


def config_hash(cfg: AgentConfig) -> str:
    """Hash of the semantic knobs only (no local paths), for report metadata."""
    payload = {
        "k_demos": cfg.k_demos,
        "max_steps": cfg.max_steps,
        "temperature": cfg.temperature,
        "ablations": {
            "knowledge": cfg.ablations.knowledge,
            "memory": cfg.ablations.memory,
            "debug": cfg.ablations.debug,
        },
        "memory_policy": cfg.memory_policy,
        "memory_casefold": cfg.memory_casefold,
        "execution_timeout_s": cfg.sandbox.timeout_s,
        "initial_demos": [[d.question, d.code] for d in cfg.initial_demos],
        "knowledge_demos": [list(pair) for pair in cfg.knowledge_demos],
    }
    return sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def trace_id_of(path: str | Path) -> str:
    return sha256(Path(path).read_bytes()).hexdigest()
