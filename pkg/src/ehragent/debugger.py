"""Error-cause diagnosis for failed plan executions.

Instead of echoing an error back at the planner, the failing code and its
structured trace go to a separate single-shot prompt that asks for the
most probable cause.  The resulting explanation is appended to the
execution feedback in the main conversation; keeping the diagnosis call
on its own message list keeps the main context small.
"""

from __future__ import annotations

from dataclasses import dataclass

from .bridge import ErrorTrace, PlanCode
from .gateway import ChatMessage, chat

DEBUG_SYSTEM = (
    "You are an experienced programmer reviewing a failed data-retrieval plan. "
    "Given the tool definitions, the code and the error report, explain the most "
    "probable cause of the error in a few sentences. Do not rewrite the code."
)


@dataclass
class DebugDiagnosis:
    trace: ErrorTrace
    cause_text: str
    turn_index: int


def build_debug_prompt(code: PlanCode, trace: ErrorTrace, tool_definitions: str) -> str:
    lines = [
        "Tool definitions:",
        tool_definitions,
        "",
        "The following plan failed:",
        code.source,
        "",
        f"Error type: {trace.error_type}",
        f"Error message: {trace.message}",
    ]
    if trace.location is not None:
        line_no, function = trace.location
        where = f"line {line_no}" + (f", in {function}" if function else "")
        lines.append(f"Error location: {where}")
    lines.append("")
    lines.append("What is the most probable cause of this error?")
    return "\n".join(lines)


def diagnose(
    backend,
    code: PlanCode,
    trace: ErrorTrace,
    tool_definitions: str,
    temperature: float = 0.0,
    turn_index: int = 0,
) -> DebugDiagnosis:
    prompt = build_debug_prompt(code, trace, tool_definitions)
    reply = chat(
        backend,
        [ChatMessage("system", DEBUG_SYSTEM), ChatMessage("user", prompt)],
        temperature,
    )
    return DebugDiagnosis(trace=trace, cause_text=reply.strip(), turn_index=turn_index)
