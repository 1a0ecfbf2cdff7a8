"""Plan extraction and sandboxed execution.

One execute_plan call spawns one fresh sandbox process (no state survives
between executions), sends the plan over the wire protocol, serves the
plan's tool calls against the database, and folds the result into an
ExecutionOutcome.  Wire protocol (UTF-8, one JSON object per line, over
the child's stdin/stdout):

    host -> sandbox: {"type": "run", "code": str, "timeout_s": number}
    sandbox -> host: {"type": "tool_call", "id": int, "name": str, "args": [...]}
    host -> sandbox: {"type": "tool_result", "id": int, "ok": true, "value": ...}
                     {"type": "tool_result", "id": int, "ok": false,
                      "code": str, "message": str}
    sandbox -> host: {"type": "print", "text": str}
    sandbox -> host: {"type": "done"} | {"type": "error", "error_type": str,
                      "message": str, "line": int | null}

Tables cross the wire as {"name": str, "columns": [{"name": str,
"kind": str}, ...], "rows": [[...], ...]} with datetime cells rendered as
ISO strings and nulls as JSON null; the kind annotations make the host
side reconstruction lossless.  Tool failures are forwarded with their
code and message unchanged, so the trace the planner sees is exactly what
the toolkit raised.
"""

from __future__ import annotations

import json
import queue
import re
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime

from .store import ColumnSchema, EhrDatabase, TableData, parse_datetime, render_datetime
from .tools import TOOL_NAMES, ToolError, tool_dispatch

DEFAULT_TIMEOUT_S = 30.0

NO_CODE_NUDGE = (
    "Your reply contained no fenced code block. Send a complete plan inside "
    "one ```python code block, or reply with TERMINATE if you are finished."
)

TIMEOUT_FEEDBACK = (
    "Execution failed.\nError type: Timeout\nMessage: the plan was stopped at "
    "the execution time limit"
)

_FENCED_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


class SandboxSpawnError(Exception):
    pass


def default_sandbox_command() -> list[str]:
    return [sys.executable, "-m", "ehrsandbox"]


@dataclass
class SandboxConfig:
    command: list[str] | None = None
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass
class PlanCode:
    source: str
    turn_index: int = 0


@dataclass
class ErrorTrace:
    error_type: str
    message: str
    location: tuple[int, str | None] | None = None  # (line in plan, function)


@dataclass
class ExecutionOutcome:
    status: str  # success | error | timeout | no_code
    printed_output: str = ""
    trace: ErrorTrace | None = None
    duration_ms: int = 0

    def __post_init__(self):
        assert (self.status == "error") == (self.trace is not None)


def extract_code(assistant_reply: str, turn_index: int = 0) -> PlanCode | None:
    """Content of the last fenced block; None when there is no usable block."""
    blocks = _FENCED_RE.findall(assistant_reply)
    if not blocks:
        return None
    source = blocks[-1]
    if source.endswith("\n"):
        source = source[:-1]
    if not source.strip():
        return None
    return PlanCode(source=source, turn_index=turn_index)


# --- wire value encoding ------------------------------------------------------


def table_to_wire(table: TableData) -> dict:
    return {
        "name": table.name,
        "columns": [{"name": c.name, "kind": c.value_kind} for c in table.columns],
        "rows": [[encode_value(cell) for cell in row] for row in table.rows],
    }


def wire_to_table(value) -> TableData:
    if not isinstance(value, dict) or "columns" not in value or "rows" not in value:
        raise ToolError(
            "BadCondition",
            "expected a table value (as returned by LoadDB or FilterDB)",
        )
    columns = [ColumnSchema(c["name"], c.get("kind", "text")) for c in value["columns"]]
    rows = []
    for row in value["rows"]:
        cells = []
        for col, cell in zip(columns, row):
            if cell is not None and col.value_kind == "datetime":
                cells.append(parse_datetime(cell))
            else:
                cells.append(cell)
        rows.append(tuple(cells))
    return TableData(value.get("name", "table"), columns, rows)


def encode_value(value):
    if isinstance(value, TableData):
        return table_to_wire(value)
    if isinstance(value, datetime):
        return render_datetime(value)
    if isinstance(value, (list, tuple)):
        return [encode_value(v) for v in value]
    return value


# --- tool RPC dispatch --------------------------------------------------------

_TABLE_ARG = object()
_TEXT_ARG = object()

_SIGNATURES = {
    "LoadDB": (_TEXT_ARG,),
    "FilterDB": (_TABLE_ARG, _TEXT_ARG),
    "GetValue": (_TABLE_ARG, _TEXT_ARG),
    "Calculate": (_TEXT_ARG,),
    "Calendar": (_TEXT_ARG, _TEXT_ARG),
    "SQLInterpreter": (_TEXT_ARG,),
}


def dispatch_tool(db: EhrDatabase, name: str, args: list):
    """Run one tool call from the wire; returns a wire-encodable value."""
    if name not in TOOL_NAMES:
        raise ToolError("BadCondition", f"unknown tool {name!r}")
    signature = _SIGNATURES[name]
    if len(args) != len(signature):
        raise ToolError(
            "BadCondition", f"{name} takes {len(signature)} argument(s), got {len(args)}"
        )
    decoded = []
    for spec, arg in zip(signature, args):
        if spec is _TABLE_ARG:
            decoded.append(wire_to_table(arg))
        else:
            if not isinstance(arg, str):
                raise ToolError("BadCondition", f"{name} expects a string, got {type(arg).__name__}")
            decoded.append(arg)
    result = tool_dispatch(db)[name](*decoded)
    return encode_value(result)


# --- execution ----------------------------------------------------------------

_EOF = object()


def _reader(stream, out_queue):
    try:
        for line in stream:
            out_queue.put(line)
    except ValueError:  # stream closed under us
        pass
    out_queue.put(_EOF)


def _drain(stream, sink: list):
    try:
        sink.append(stream.read())
    except ValueError:
        pass


def execute_plan(sandbox_cfg: SandboxConfig, db: EhrDatabase, code: PlanCode) -> ExecutionOutcome:
    """Run one plan in a fresh sandbox process and collect its outcome."""
    command = sandbox_cfg.command or default_sandbox_command()
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            encoding="utf-8",
        )
    except OSError as exc:
        raise SandboxSpawnError(f"cannot spawn sandbox {command!r}: {exc}") from exc

    lines: queue.Queue = queue.Queue()
    threading.Thread(target=_reader, args=(proc.stdout, lines), daemon=True).start()
    stderr_sink: list[str] = []
    threading.Thread(target=_drain, args=(proc.stderr, stderr_sink), daemon=True).start()

    deadline = start + sandbox_cfg.timeout_s
    printed: list[str] = []
    saw_message = False

    def finish(status, trace=None):
        return ExecutionOutcome(
            status=status,
            printed_output=_strip_final_newline("".join(printed)),
            trace=trace,
            duration_ms=int((time.monotonic() - start) * 1000),
        )

    try:
        try:
            proc.stdin.write(
                json.dumps(
                    {"type": "run", "code": code.source, "timeout_s": sandbox_cfg.timeout_s}
                )
                + "\n"
            )
            proc.stdin.flush()
        except (BrokenPipeError, OSError):
            pass  # child died instantly; the EOF path below reports it

        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return finish("timeout")
            try:
                line = lines.get(timeout=remaining)
            except queue.Empty:
                return finish("timeout")
            if line is _EOF:
                proc.wait(timeout=5)
                if not saw_message:
                    raise SandboxSpawnError(
                        f"sandbox {command!r} exited with code {proc.returncode} "
                        f"before speaking the protocol; stderr: {''.join(stderr_sink)[:500]}"
                    )
                return finish(
                    "error",
                    ErrorTrace(
                        error_type="SandboxCrash",
                        message=f"sandbox exited with code {proc.returncode} without a final message",
                    ),
                )
            try:
                message = json.loads(line)
            except json.JSONDecodeError:
                return finish(
                    "error",
                    ErrorTrace(error_type="SandboxCrash", message=f"unparseable sandbox line {line[:200]!r}"),
                )
            saw_message = True
            kind = message.get("type")
            if kind == "print":
                printed.append(message.get("text", ""))
            elif kind == "tool_call":
                reply = {"type": "tool_result", "id": message.get("id")}
                try:
                    reply["ok"] = True
                    reply["value"] = dispatch_tool(db, message.get("name"), message.get("args", []))
                except ToolError as exc:
                    reply = {
                        "type": "tool_result",
                        "id": message.get("id"),
                        "ok": False,
                        "code": exc.code,
                        "message": exc.message,
                    }
                try:
                    proc.stdin.write(json.dumps(reply, ensure_ascii=False) + "\n")
                    proc.stdin.flush()
                except (BrokenPipeError, OSError):
                    pass  # child gone; EOF path will close out
            elif kind == "done":
                return finish("success")
            elif kind == "error":
                line_no = message.get("line")
                location = (line_no, None) if isinstance(line_no, int) else None
                return finish(
                    "error",
                    ErrorTrace(
                        error_type=message.get("error_type", "UnknownError"),
                        message=message.get("message", ""),
                        location=location,
                    ),
                )
            else:
                return finish(
                    "error",
                    ErrorTrace(error_type="SandboxCrash", message=f"unexpected sandbox message {kind!r}"),
                )
    finally:
        if proc.poll() is None:
            proc.kill()
        proc.wait(timeout=5)
        for stream in (proc.stdin, proc.stdout, proc.stderr):
            try:
                stream.close()
            except OSError:
                pass


def _strip_final_newline(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


def outcome_to_feedback(outcome: ExecutionOutcome) -> str:
    """Deterministic text shown to the planner after each execution."""
    if outcome.status == "success":
        return f"Execution succeeded. Output:\n{outcome.printed_output}"
    if outcome.status == "no_code":
        return NO_CODE_NUDGE
    if outcome.status == "timeout":
        return TIMEOUT_FEEDBACK
    trace = outcome.trace
    text = f"Execution failed.\nError type: {trace.error_type}\nMessage: {trace.message}"
    if trace.location is not None:
        line_no, function = trace.location
        text += f"\nLocation: line {line_no}"
        if function:
            text += f", in {function}"
    return text
