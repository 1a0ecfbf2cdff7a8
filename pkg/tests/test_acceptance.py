"""Acceptance criteria, one test per criterion.

Each test is listed in the terminal summary as [ACCEPTANCE] <name>: PASS/FAIL
(see conftest).  Tolerances are pinned here and nowhere else: oracle
equivalence is exact except mean/sum (1e-9 relative); percentages render
at two decimals half-up; the step budget is exactly 10; the bundled
replay evaluation must be byte-identical across three runs and match the
committed expected report with zero network I/O.
"""

import calendar as stdlib_calendar
import json
import random
import socket
import string
import time
from datetime import datetime, timedelta

import pytest

import ehragent.debugger
from ehragent.bridge import SandboxConfig
from ehragent.cli import main as cli_main
from ehragent.evalharness import EvalReport, LevelCounts, _percent
from ehragent.gateway import RecordingBackend, ReplayBackend
from ehragent.knowledge import KNOWLEDGE_SYSTEM
from ehragent.memory import MemoryStore, levenshtein, retrieve_topk
from ehragent.orchestrator import (
    Ablations,
    AgentConfig,
    Demonstration,
    run_query,
    select_demonstrations,
)
from ehragent.store import ColumnSchema, EhrDatabase, TableData, render_datetime
from ehragent.tools import ToolError, calendar_shift, filter_db, get_value, sql_interpreter

WORDS = ("alpha", "beta", "gamma", "delta", "EPSILON", "Zeta", "eta", "THETA")
OPS = ("=", "!=", "<", "<=", ">", ">=")

_OP_FN = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def random_table(rng, name="t", max_rows=200, kinds=None, n_cols=None):
    n_cols = n_cols or rng.randrange(2, 5)
    columns = []
    for i in range(n_cols):
        kind = (kinds or ("integer", "real", "text", "datetime"))[
            rng.randrange(len(kinds or ("integer", "real", "text", "datetime")))
        ]
        columns.append(ColumnSchema(f"C{i}", kind))
    rows = []
    base = datetime(2100, 1, 1)
    for _ in range(rng.randrange(0, max_rows + 1)):
        cells = []
        for col in columns:
            if rng.random() < 0.1:
                cells.append(None)
            elif col.value_kind == "integer":
                cells.append(rng.randrange(-20, 20))
            elif col.value_kind == "real":
                cells.append(round(rng.uniform(-50, 50), 2))
            elif col.value_kind == "text":
                cells.append(rng.choice(WORDS))
            else:
                cells.append(base + timedelta(days=rng.randrange(0, 400), hours=rng.randrange(0, 24)))
        rows.append(tuple(cells))
    return TableData(name, columns, rows)


def render_literal(value):
    if isinstance(value, datetime):
        return render_datetime(value)
    return str(value)


def pick_literal(rng, table, idx):
    kind = table.columns[idx].value_kind
    pool = [r[idx] for r in table.rows if r[idx] is not None]
    if pool and rng.random() < 0.7:
        return rng.choice(pool)
    if kind == "integer":
        return rng.randrange(-20, 20)
    if kind == "real":
        return round(rng.uniform(-50, 50), 2)
    if kind == "text":
        return rng.choice(WORDS)
    return datetime(2100, 1, 1) + timedelta(days=rng.randrange(0, 400))


# --- criterion: tool-oracle equivalence ------------------------------------------


def test_filter_db_matches_full_scan_oracle():
    rng = random.Random(20250801)
    start = time.monotonic()
    for case in range(1000):
        table = random_table(rng)
        mode = rng.random()
        if mode < 0.60:  # plain comparison
            idx = rng.randrange(len(table.columns))
            op = rng.choice(OPS)
            literal = pick_literal(rng, table, idx)
            condition = f"{table.columns[idx].name}{op}{render_literal(literal)}"
            fn = _OP_FN[op]
            expected = [r for r in table.rows if r[idx] is not None and fn(r[idx], literal)]
        elif mode < 0.85:  # extremum
            idx = rng.randrange(len(table.columns))
            which = rng.choice(("min", "max"))
            condition = f"{which}({table.columns[idx].name})"
            pool = [r[idx] for r in table.rows if r[idx] is not None]
            if not pool:
                expected = []
            else:
                target = min(pool) if which == "min" else max(pool)
                expected = [r for r in table.rows if r[idx] == target]
        else:  # grouped count
            idx = rng.randrange(len(table.columns))
            g_idx = rng.randrange(len(table.columns))
            op = rng.choice(OPS)
            threshold = rng.randrange(0, 6)
            condition = (
                f"count[{table.columns[idx].name} GROUP-BY {table.columns[g_idx].name}] "
                f"{op} {threshold}"
            )
            counts = {}
            for r in table.rows:
                if r[idx] is not None:
                    counts[r[g_idx]] = counts.get(r[g_idx], 0) + 1
            fn = _OP_FN[op]
            expected = [r for r in table.rows if fn(counts.get(r[g_idx], 0), threshold)]

        if expected:
            got = filter_db(table, condition)
            assert got.rows == expected, f"case {case}: {condition}"
        else:
            with pytest.raises(ToolError) as exc:
                filter_db(table, condition)
            assert exc.value.code == "EmptyResult", f"case {case}: {condition}"
    assert time.monotonic() - start < 30


def test_get_value_matches_fold_oracle():
    rng = random.Random(20250802)
    start = time.monotonic()
    for case in range(1000):
        table = random_table(rng)
        idx = rng.randrange(len(table.columns))
        name = table.columns[idx].name
        kind = table.columns[idx].value_kind
        values = [r[idx] for r in table.rows if r[idx] is not None]
        agg = rng.choice((None, "count", "min", "max", "mean", "sum"))

        if agg is None:
            assert get_value(table, name) == values
            continue
        spec = f"{name}, {agg}"
        if agg == "count":
            assert get_value(table, spec) == len(values)
            continue
        if not values or (agg in ("mean", "sum") and kind not in ("integer", "real")):
            with pytest.raises(ToolError) as exc:
                get_value(table, spec)
            assert exc.value.code == "BadExpression", f"case {case}: {spec}"
            continue
        got = get_value(table, spec)
        if agg == "min":
            assert got == min(values)
        elif agg == "max":
            assert got == max(values)
        else:
            total = 0
            for v in values:
                total += v
            expected = total if agg == "sum" else total / len(values)
            assert got == pytest.approx(expected, rel=1e-9), f"case {case}: {spec}"
    assert time.monotonic() - start < 30


def _sql_oracle_order(rows, keys):
    for key_fn, desc in reversed(keys):
        rows = sorted(rows, key=lambda row: (key_fn(row) is None, key_fn(row)), reverse=desc)
    return rows


def test_sql_interpreter_matches_primitive_oracle():
    rng = random.Random(20250803)
    start = time.monotonic()
    for case in range(1000):
        join = rng.random() < 0.3
        if join:
            t1 = random_table(rng, "tbl_a", max_rows=60, kinds=("integer", "text"))
            t2 = random_table(rng, "tbl_b", max_rows=60, kinds=("integer", "text"))
            db = EhrDatabase("fuzz", {"tbl_a": t1, "tbl_b": t2})
            k1 = rng.randrange(len(t1.columns))
            k2 = rng.randrange(len(t2.columns))
            if t1.columns[k1].value_kind != t2.columns[k2].value_kind:
                # force a comparable pair
                k2 = next(
                    (
                        i
                        for i, c in enumerate(t2.columns)
                        if c.value_kind == t1.columns[k1].value_kind
                    ),
                    None,
                )
                if k2 is None:
                    continue
            sql = (
                f"SELECT COUNT(*) FROM tbl_a JOIN tbl_b ON "
                f"tbl_a.{t1.columns[k1].name} = tbl_b.{t2.columns[k2].name}"
            )
            combos = [
                (r1, r2)
                for r1 in t1.rows
                for r2 in t2.rows
                if r1[k1] is not None and r2[k2] is not None and r1[k1] == r2[k2]
            ]
            expected = [(len(combos),)]
            assert sql_interpreter(db, sql) == expected, f"case {case}: {sql}"
            continue

        table = random_table(rng, "tbl", max_rows=200)
        db = EhrDatabase("fuzz", {"tbl": table})
        idx = rng.randrange(len(table.columns))
        col = table.columns[idx]
        rows = list(table.rows)

        where_sql = ""
        if rng.random() < 0.7:
            op = rng.choice(OPS)
            literal = pick_literal(rng, table, idx)
            rendered = (
                f"'{render_literal(literal)}'"
                if isinstance(literal, (str, datetime))
                else render_literal(literal)
            )
            where_sql = f" WHERE {col.name} {'<>' if op == '!=' and rng.random() < 0.3 else op} {rendered}"
            fn = _OP_FN[op]
            rows = [r for r in rows if r[idx] is not None and fn(r[idx], literal)]

        shape = rng.random()
        if shape < 0.4:  # plain projection with optional order/limit
            proj = rng.sample(range(len(table.columns)), k=rng.randrange(1, len(table.columns) + 1))
            select = ", ".join(table.columns[i].name for i in proj)
            order_sql = ""
            keys = []
            if rng.random() < 0.6:
                o_idx = rng.choice(proj)
                desc = rng.random() < 0.5
                order_sql = f" ORDER BY {table.columns[o_idx].name} {'DESC' if desc else 'ASC'}"
                keys = [(lambda r, i=o_idx: r[i], desc)]
            limit_sql = ""
            limit = None
            if rng.random() < 0.4:
                limit = rng.randrange(1, 20)
                limit_sql = f" LIMIT {limit}"
            sql = f"SELECT {select} FROM tbl{where_sql}{order_sql}{limit_sql}"
            ordered = _sql_oracle_order(rows, keys)
            expected = [tuple(r[i] for i in proj) for r in ordered]
            if limit is not None:
                expected = expected[:limit]
        elif shape < 0.75:  # global aggregates
            a_idx = rng.randrange(len(table.columns))
            a_col = table.columns[a_idx]
            numeric = a_col.value_kind in ("integer", "real")
            funcs = ["COUNT(*)", f"COUNT({a_col.name})", f"MIN({a_col.name})", f"MAX({a_col.name})"]
            if numeric:
                funcs += [f"SUM({a_col.name})", f"AVG({a_col.name})"]
            func = rng.choice(funcs)
            sql = f"SELECT {func} FROM tbl{where_sql}"
            values = [r[a_idx] for r in rows if r[a_idx] is not None]
            if func == "COUNT(*)":
                expected = [(len(rows),)]
            elif func.startswith("COUNT"):
                expected = [(len(values),)]
            elif func.startswith("MIN"):
                expected = [(min(values) if values else None,)]
            elif func.startswith("MAX"):
                expected = [(max(values) if values else None,)]
            elif func.startswith("SUM"):
                expected = [(sum(values) if values else None,)]
            else:
                expected = [(sum(values) / len(values) if values else None,)]
        else:  # group by with count
            g_idx = rng.randrange(len(table.columns))
            g_col = table.columns[g_idx]
            sql = f"SELECT {g_col.name}, COUNT(*) FROM tbl{where_sql} GROUP BY {g_col.name}"
            groups = {}
            order = []
            for r in rows:
                key = r[g_idx]
                if key not in groups:
                    groups[key] = 0
                    order.append(key)
                groups[key] += 1
            expected = [(key, groups[key]) for key in order]

        if expected:
            assert sql_interpreter(db, sql) == expected, f"case {case}: {sql}"
        else:
            with pytest.raises(ToolError) as exc:
                sql_interpreter(db, sql)
            assert exc.value.code == "EmptyResult", f"case {case}: {sql}"
    assert time.monotonic() - start < 30


# --- criterion: retrieval correctness ----------------------------------------------


def _dp_levenshtein(a, b):
    m, n = len(a), len(b)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i][j] = min(
                d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])
            )
    return d[m][n]


def test_levenshtein_matches_dp_oracle():
    rng = random.Random(20250804)
    alphabet = string.ascii_lowercase + "éß漢 "
    for _ in range(500):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 30)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 30)))
        assert levenshtein(a, b) == _dp_levenshtein(a, b)


def test_retrieve_topk_matches_sort_oracle():
    rng = random.Random(20250805)
    pool = ["how many patients", "list drugs", "count admissions", "max dose", "who is oldest"]
    for _ in range(200):
        store = MemoryStore(None)
        for _ in range(rng.randrange(0, 25)):
            # duplicates force the recency tie rule to matter
            question = rng.choice(pool) + rng.choice(["", " today", "?"])
            store.insert(question, "print(1)")
        query = rng.choice(pool)
        for k in (1, 4, 10):
            got = retrieve_topk(store, query, k)
            ranked = sorted(
                store.entries, key=lambda e: (levenshtein(query, e.question), -e.seq)
            )
            assert got == ranked[:k]


# --- criterion: step budget --------------------------------------------------------


BAD_PLAN_REPLIES = [
    f"Attempt {i}.\n```python\nt = LoadDB('missing_table_{i}')\nprint(t)\n```" for i in range(12)
]


class _AdversarialPlanner:
    def __init__(self):
        self.calls = 0

    def complete(self, messages, temperature):
        from ehragent.debugger import DEBUG_SYSTEM

        system = messages[0].content
        if system == KNOWLEDGE_SYSTEM:
            return "irrelevant knowledge"
        if system == DEBUG_SYSTEM:
            return "the table does not exist"
        turn = (len(messages) - 2) // 2
        return BAD_PLAN_REPLIES[turn]


def _budget_cfg(debug: bool) -> AgentConfig:
    return AgentConfig(
        ablations=Ablations(debug=debug),
        initial_demos=[Demonstration("d", "print(0)")],
        knowledge_demos=[],
    )


@pytest.mark.parametrize("debug_on", [True, False])
def test_algorithm_budget_exactly_ten(demo_db, tmp_path, monkeypatch, debug_on):
    trace_path = tmp_path / f"adversarial_{debug_on}.jsonl"
    recorder = RecordingBackend(_AdversarialPlanner(), trace_path)
    cfg = _budget_cfg(debug_on)
    question = "unanswerable adversarial question"
    run_query(cfg, demo_db, MemoryStore(None), recorder, question)

    built_prompts = []
    real_build = ehragent.debugger.build_debug_prompt
    monkeypatch.setattr(
        ehragent.debugger,
        "build_debug_prompt",
        lambda *a, **k: built_prompts.append(1) or real_build(*a, **k),
    )

    replay = ReplayBackend.load(trace_path)
    result = run_query(cfg, demo_db, MemoryStore(None), replay, question)
    assert result.status == "unsolved"
    assert result.failure_label == "fail_to_debug"
    assert result.steps_used == 10
    assert result.transcript.executor_invocations() == 10
    assert len(built_prompts) == (10 if debug_on else 0)
    assert len(result.transcript.diagnoses()) == (10 if debug_on else 0)


# --- criterion: end-to-end replay determinism -----------------------------------------


def test_replay_eval_deterministic_and_matches_committed_report(
    fixtures_dir, tmp_path, monkeypatch
):
    def no_network(*args, **kwargs):
        raise AssertionError("network I/O attempted during a replay run")

    monkeypatch.setattr(socket, "socket", no_network)
    monkeypatch.setattr(socket, "create_connection", no_network)

    start = time.monotonic()
    reports = []
    for i in range(3):
        report_path = tmp_path / f"report_{i}.json"
        code = cli_main(
            [
                "eval",
                "--config",
                str(fixtures_dir / "config.replay.json"),
                "--dataset",
                str(fixtures_dir / "demo_questions.jsonl"),
                "--report",
                str(report_path),
                "--parallel",
                "1",
            ]
        )
        assert code == 0
        reports.append(report_path.read_bytes())
    elapsed = time.monotonic() - start

    assert reports[0] == reports[1] == reports[2]
    assert reports[0] == (fixtures_dir / "expected_report.json").read_bytes()
    assert elapsed < 60

    report = json.loads(reports[0])
    assert report["overall"]["sr"] == "85.00"
    assert report["overall"]["cr"] == "90.00"


# --- criterion: metric arithmetic ------------------------------------------------------


def test_metric_formatting_convention():
    assert _percent(342, 580) == "58.97"
    assert _percent(498, 580) == "85.86"
    counts = LevelCounts(total=580, successes=342, completions=498)
    assert counts.sr() == "58.97"
    assert counts.cr() == "85.86"


def test_sr_le_cr_on_fuzzed_logs():
    rng = random.Random(20250806)
    for _ in range(1000):
        overall = LevelCounts()
        levels = {name: LevelCounts() for name in ("I", "II", "III", "IV")}
        for _ in range(rng.randrange(1, 50)):
            level = rng.choice(list(levels))
            completion = rng.random() < 0.8
            success = completion and rng.random() < 0.7
            for bucket in (overall, levels[level]):
                bucket.total += 1
                bucket.successes += success
                bucket.completions += completion
        report = EvalReport(overall=overall, levels=levels, failures={}, items=[])
        for bucket in [report.overall] + list(report.levels.values()):
            if bucket.total:
                assert float(bucket.sr()) <= float(bucket.cr())
        assert sum(c.total for c in report.levels.values()) == report.overall.total


# --- criterion: ablation prompt snapshots -----------------------------------------------


def _shipped_demos(fixtures_dir):
    records = json.loads((fixtures_dir / "initial_demos.json").read_text(encoding="utf-8"))
    return [Demonstration(r["question"], r["code"]) for r in records]


class _CountingPlanner:
    def __init__(self):
        self.knowledge_calls = 0

    def complete(self, messages, temperature):
        if messages[0].content == KNOWLEDGE_SYSTEM:
            self.knowledge_calls += 1
            return "some knowledge"
        if len(messages) == 2:  # the initial planning prompt
            return "```python\nprint(1)\n```"
        return "ANSWER: 1\nTERMINATE"


def test_ablation_no_knowledge(demo_db, fixtures_dir):
    planner = _CountingPlanner()
    cfg = AgentConfig(
        ablations=Ablations(knowledge=False),
        initial_demos=_shipped_demos(fixtures_dir),
        knowledge_demos=[("q", "k")],
    )
    result = run_query(cfg, demo_db, MemoryStore(None), planner, "How many patients are female?")
    assert planner.knowledge_calls == 0
    user_prompt = result.transcript.messages[1].content
    assert "Knowledge:" not in user_prompt

    # the flag removes exactly the knowledge section and nothing else
    cfg_on = AgentConfig(
        ablations=Ablations(knowledge=True),
        initial_demos=_shipped_demos(fixtures_dir),
        knowledge_demos=[("q", "k")],
    )
    planner_on = _CountingPlanner()
    result_on = run_query(
        cfg_on, demo_db, MemoryStore(None), planner_on, "How many patients are female?"
    )
    with_knowledge = result_on.transcript.messages[1].content
    assert with_knowledge == user_prompt + "\n\nKnowledge:\nsome knowledge"
    assert result_on.transcript.messages[0] == result.transcript.messages[0]


def test_ablation_no_memory_uses_shipped_demos_verbatim(demo_db, fixtures_dir):
    shipped = _shipped_demos(fixtures_dir)
    assert len(shipped) == 4  # K = 4 initial demonstrations
    store = MemoryStore(None)
    store.insert("a stored question", "print('stored')")
    cfg = AgentConfig(ablations=Ablations(memory=False), initial_demos=shipped)
    demos = select_demonstrations(cfg, store, "any question at all")
    assert demos == shipped

    planner = _CountingPlanner()
    cfg2 = AgentConfig(
        ablations=Ablations(knowledge=False, memory=False), initial_demos=shipped
    )
    result = run_query(cfg2, demo_db, MemoryStore(None), planner, "q")
    user_prompt = result.transcript.messages[1].content
    for demo in shipped:
        assert f"Question: {demo.question}\nSolution:\n```python\n{demo.code}\n```" in user_prompt


def test_ablation_memory_on_selects_topk_neighbors(fixtures_dir):
    shipped = _shipped_demos(fixtures_dir)
    store = MemoryStore(None)
    questions = [
        "how many patients are female?",
        "how many patients are male?",
        "list every drug",
        "how many patients are there?",
        "what is the maximum dose of heparin?",
        "how many patients are alive?",
    ]
    for q in questions:
        store.insert(q, f"print({len(q)})")
    query = "how many patients are old?"
    cfg = AgentConfig(initial_demos=shipped)
    demos = select_demonstrations(cfg, store, query)
    ranked = sorted(
        store.entries, key=lambda e: (_dp_levenshtein(query, e.question), -e.seq)
    )
    assert [d.question for d in demos] == [e.question for e in ranked[:4]]


# --- criterion: calendar properties ---------------------------------------------------


def test_calendar_day_week_round_trips(demo_db):
    rng = random.Random(20250807)
    for _ in range(200):
        base = datetime(2095, 1, 1) + timedelta(
            days=rng.randrange(0, 7000), seconds=rng.randrange(0, 86400)
        )
        anchor = render_datetime(base)
        n = rng.randrange(0, 400)
        unit = rng.choice(("day", "week"))
        shifted = calendar_shift(demo_db, anchor, f"+{n} {unit}")
        back = calendar_shift(demo_db, shifted, f"-{n} {unit}")
        assert back == anchor


def test_calendar_month_clamping_vs_stdlib_oracle(demo_db):
    rng = random.Random(20250808)
    for _ in range(200):
        year = rng.randrange(2090, 2110)
        month = rng.randrange(1, 13)
        day = rng.randrange(1, stdlib_calendar.monthrange(year, month)[1] + 1)
        months = rng.randrange(-30, 31)
        anchor = datetime(year, month, day)
        total = year * 12 + (month - 1) + months
        exp_year, exp_month0 = divmod(total, 12)
        exp_month = exp_month0 + 1
        exp_day = min(day, stdlib_calendar.monthrange(exp_year, exp_month)[1])
        expected = render_datetime(datetime(exp_year, exp_month, exp_day))
        sign = "+" if months >= 0 else "-"
        got = calendar_shift(demo_db, render_datetime(anchor), f"{sign}{abs(months)} months")
        assert got == expected

    # the canonical clamp cases
    assert calendar_shift(demo_db, "2105-01-31", "+1 month") == "2105-02-28"
    assert calendar_shift(demo_db, "2104-01-31", "+1 month") == "2104-02-29"
    assert calendar_shift(demo_db, "2104-02-29", "+1 year") == "2105-02-28"
