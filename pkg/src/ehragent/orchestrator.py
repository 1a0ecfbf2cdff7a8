"""The agent loop: compose the planning prompt, then generate, execute and
debug until the planner says TERMINATE or the step budget runs out.

Prompt composition for a question q: the system message carries the tool
definitions and behavioral rules; the user message carries the database
metadata, the retrieved demonstrations, q, and the optional knowledge
paragraph, in that order.  Each subsequent planner turn sees the previous
execution's feedback (plus the debugger's probable-cause paragraph when
an execution failed and debugging is enabled).

A query counts as solved only when the planner terminated, an answer
could be extracted, and at least one execution succeeded.  steps_used is
the number of planner replies that were worked (executed or nudged); the
terminating reply is free.  After the budget's last execution no further
planner call is made.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .bridge import (
    ExecutionOutcome,
    NO_CODE_NUDGE,
    SandboxConfig,
    SandboxSpawnError,
    execute_plan,
    extract_code,
    outcome_to_feedback,
)
from .debugger import diagnose
from .gateway import (
    ChatMessage,
    ContextLengthExceeded,
    LlmError,
    ReplayMiss,
    approx_token_count,
    chat,
)
from .knowledge import integrate_knowledge
from .memory import MemoryStore, retrieve_topk
from .store import EhrDatabase, render_metadata
from .tools import TOOL_DEFINITIONS

TERMINATE_TOKEN = "TERMINATE"
ANSWER_PREFIX = "ANSWER:"

FAILURE_LABELS = (
    "context_length",
    "incorrect_sql",
    "date_time",
    "fail_to_follow",
    "fail_to_debug",
    "incorrect_logic",
)

_PLANNER_SYSTEM_TEMPLATE = """\
You answer questions over a clinical relational database by writing small
Python plans for a restricted runtime.

Tool functions available to plans:
{tool_definitions}

Rules:
- Put the complete plan inside one fenced code block (```python ... ```);
  the plan must be self-contained and print the value it computes.
- After each execution you receive the printed output or an error report;
  fix the plan and resend it in full when something failed.
- When you have the final answer, reply with a line 'ANSWER: <value>'
  followed by the single word TERMINATE, outside any code block.
- Only reply TERMINATE when you are done."""

PLANNER_SYSTEM = _PLANNER_SYSTEM_TEMPLATE.format(tool_definitions=TOOL_DEFINITIONS)


@dataclass(frozen=True)
class Demonstration:
    question: str
    code: str


@dataclass
class Ablations:
    knowledge: bool = True
    memory: bool = True
    debug: bool = True


@dataclass
class AgentConfig:
    k_demos: int = 4
    max_steps: int = 10
    temperature: float = 0.0
    ablations: Ablations = field(default_factory=Ablations)
    memory_policy: str = "success"  # success | completion
    memory_casefold: bool = False
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    initial_demos: list[Demonstration] = field(default_factory=list)
    knowledge_demos: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.k_demos < 0:
            raise ValueError("k_demos must be non-negative")
        if self.memory_policy not in ("success", "completion"):
            raise ValueError(f"bad memory policy {self.memory_policy!r}")


@dataclass
class AgentTurn:
    index: int
    reply: str
    code: str | None
    outcome: ExecutionOutcome | None
    diagnosis: str | None
    feedback: str | None


@dataclass
class Conversation:
    messages: list[ChatMessage] = field(default_factory=list)
    turns: list[AgentTurn] = field(default_factory=list)
    knowledge_body: str | None = None
    demo_questions: list[str] = field(default_factory=list)
    context_overflow: bool = False
    fatal_error: str | None = None

    def executions(self) -> list[ExecutionOutcome]:
        return [t.outcome for t in self.turns if t.outcome is not None]

    def executor_invocations(self) -> int:
        return sum(1 for o in self.executions() if o.status != "no_code")

    def diagnoses(self) -> list[str]:
        return [t.diagnosis for t in self.turns if t.diagnosis is not None]

    def last_successful_turn(self) -> AgentTurn | None:
        for turn in reversed(self.turns):
            if turn.outcome is not None and turn.outcome.status == "success":
                return turn
        return None

    def to_dict(self, include_timings: bool = False) -> dict:
        turns = []
        for t in self.turns:
            entry: dict = {"index": t.index, "status": t.outcome.status if t.outcome else None}
            if t.outcome is not None:
                entry["printed_output"] = t.outcome.printed_output
                if t.outcome.trace is not None:
                    trace = t.outcome.trace
                    entry["error"] = {
                        "type": trace.error_type,
                        "message": trace.message,
                        "line": trace.location[0] if trace.location else None,
                    }
                if include_timings:
                    entry["duration_ms"] = t.outcome.duration_ms
            entry["code"] = t.code
            entry["diagnosis"] = t.diagnosis
            entry["feedback"] = t.feedback
            turns.append(entry)
        return {
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "knowledge": self.knowledge_body,
            "demo_questions": list(self.demo_questions),
            "turns": turns,
            "context_overflow": self.context_overflow,
            "fatal_error": self.fatal_error,
        }


@dataclass
class QueryResult:
    question: str
    final_answer: str | None
    status: str  # solved | unsolved
    steps_used: int
    transcript: Conversation
    failure_label: str | None = None
    approx_tokens: int = 0

    def to_dict(self, include_timings: bool = False) -> dict:
        return {
            "question": self.question,
            "status": self.status,
            "final_answer": self.final_answer,
            "steps_used": self.steps_used,
            "failure_label": self.failure_label,
            "approx_tokens": self.approx_tokens,
            "transcript": self.transcript.to_dict(include_timings),
        }

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)


# --- prompt composition -------------------------------------------------------


def compose_plan_prompt(
    metadata_text: str,
    tool_definitions: str,
    demos: list[Demonstration],
    question: str,
    knowledge_text: str | None,
) -> list[ChatMessage]:
    """Initial message pair; parts appear as metadata, demos, question,
    knowledge, matching the planner input order."""
    system = _PLANNER_SYSTEM_TEMPLATE.format(tool_definitions=tool_definitions)
    parts = [f"Database description:\n{metadata_text.rstrip()}"]
    for demo in demos:
        parts.append(f"Question: {demo.question}\nSolution:\n```python\n{demo.code}\n```")
    parts.append(f"Question: {question}")
    if knowledge_text is not None:
        parts.append(f"Knowledge:\n{knowledge_text}")
    return [ChatMessage("system", system), ChatMessage("user", "\n\n".join(parts))]


def strip_fenced(text: str) -> str:
    """Drop fenced code blocks (and any dangling open fence)."""
    import re

    text = re.sub(r"```[^\n]*\n.*?```", "", text, flags=re.DOTALL)
    return re.sub(r"```.*", "", text, flags=re.DOTALL)


def contains_terminate(reply: str) -> bool:
    return TERMINATE_TOKEN in strip_fenced(reply)


def extract_final_answer(transcript: Conversation) -> str | None:
    """ANSWER line of the terminating reply, else the last successful
    execution's printed output."""
    terminating = None
    for msg in reversed(transcript.messages):
        if msg.role == "assistant":
            terminating = msg.content
            break
    if terminating is not None:
        answer = None
        for line in strip_fenced(terminating).splitlines():
            stripped = line.strip()
            if stripped.startswith(ANSWER_PREFIX):
                candidate = stripped[len(ANSWER_PREFIX):].strip()
                if candidate:
                    answer = candidate
        if answer is not None:
            return answer
    last_success = transcript.last_successful_turn()
    if last_success is not None:
        printed = last_success.outcome.printed_output.strip()
        if printed:
            return printed
    return None


def select_demonstrations(
    cfg: AgentConfig, store: MemoryStore | None, question: str
) -> list[Demonstration]:
    """Memory hits first (nearest questions), padded with initial demos."""
    if not cfg.ablations.memory or store is None:
        return list(cfg.initial_demos[: cfg.k_demos])
    hits = retrieve_topk(store, question, cfg.k_demos, casefold=cfg.memory_casefold)
    demos = [Demonstration(e.question, e.code) for e in hits]
    demos.extend(cfg.initial_demos[: cfg.k_demos - len(demos)])
    return demos


# --- failure classification ----------------------------------------------------


def failure_label_for(transcript: Conversation, budget_exhausted: bool) -> str:
    """Deterministic label cascade for an unsolved query."""
    if transcript.context_overflow:
        return "context_length"
    last_error = None
    for turn in reversed(transcript.turns):
        if turn.outcome is not None and turn.outcome.status == "error":
            last_error = turn.outcome.trace
            break
    if last_error is not None and last_error.error_type in ("SqlError", "EmptyResult"):
        return "incorrect_sql"
    if last_error is not None and last_error.error_type == "BadDate":
        return "date_time"
    no_code_turns = sum(
        1 for t in transcript.turns if t.outcome is not None and t.outcome.status == "no_code"
    )
    if no_code_turns >= 2:
        return "fail_to_follow"
    if budget_exhausted and last_error is not None:
        return "fail_to_debug"
    if transcript.fatal_error is not None:
        return "fail_to_debug"
    if any(o.status == "success" for o in transcript.executions()):
        return "incorrect_logic"
    return "fail_to_follow"


# --- the loop -------------------------------------------------------------------


def run_query(
    cfg: AgentConfig,
    db: EhrDatabase,
    store: MemoryStore | None,
    backend,
    question: str,
) -> QueryResult:
    """Algorithm: knowledge, retrieval, then generate -> execute -> debug."""
    conv = Conversation()
    tokens = 0

    def count(messages, reply=""):
        nonlocal tokens
        tokens += sum(approx_token_count(m.content) for m in messages)
        tokens += approx_token_count(reply)

    def failed(budget_exhausted=False, steps=0):
        result = QueryResult(
            question=question,
            final_answer=None,
            status="unsolved",
            steps_used=steps,
            transcript=conv,
            failure_label=failure_label_for(conv, budget_exhausted),
            approx_tokens=tokens,
        )
        _store_memory(cfg, store, question, conv)
        return result

    metadata_text = render_metadata(db)

    if cfg.ablations.knowledge:
        try:
            summary = integrate_knowledge(
                backend, metadata_text, question, cfg.knowledge_demos, cfg.temperature
            )
            conv.knowledge_body = summary.body
            count([ChatMessage("user", metadata_text)], summary.body)
        except ContextLengthExceeded:
            conv.context_overflow = True
            return failed()
        except (LlmError, ReplayMiss) as exc:
            conv.fatal_error = f"knowledge call failed: {exc}"
            return failed()

    demos = select_demonstrations(cfg, store, question)
    conv.demo_questions = [d.question for d in demos]
    conv.messages = compose_plan_prompt(
        metadata_text, TOOL_DEFINITIONS, demos, question, conv.knowledge_body
    )

    def ask() -> str | None:
        """One planner call; returns None after recording a fatal failure."""
        nonlocal tokens
        try:
            reply = chat(backend, conv.messages, cfg.temperature)
        except ContextLengthExceeded:
            conv.context_overflow = True
            return None
        except (LlmError, ReplayMiss) as exc:
            conv.fatal_error = f"planner call failed: {exc}"
            return None
        count(conv.messages, reply)
        conv.messages.append(ChatMessage("assistant", reply))
        return reply

    reply = ask()
    if reply is None:
        return failed()

    steps = 0
    terminated = False
    budget_exhausted = False
    while True:
        if contains_terminate(reply):
            terminated = True
            break
        if steps >= cfg.max_steps:
            budget_exhausted = True
            break
        turn_index = steps
        steps += 1

        code = extract_code(reply, turn_index)
        diagnosis_text = None
        if code is None:
            outcome = ExecutionOutcome(status="no_code")
            feedback = NO_CODE_NUDGE
        else:
            try:
                outcome = execute_plan(cfg.sandbox, db, code)
            except SandboxSpawnError as exc:
                conv.fatal_error = f"sandbox spawn failed: {exc}"
                conv.turns.append(AgentTurn(turn_index, reply, code.source, None, None, None))
                return failed(steps=steps)
            feedback = outcome_to_feedback(outcome)
            if outcome.status == "error" and cfg.ablations.debug:
                try:
                    diag = diagnose(
                        backend, code, outcome.trace, TOOL_DEFINITIONS, cfg.temperature, turn_index
                    )
                except ContextLengthExceeded:
                    conv.context_overflow = True
                    conv.turns.append(
                        AgentTurn(turn_index, reply, code.source, outcome, None, feedback)
                    )
                    return failed(steps=steps)
                except (LlmError, ReplayMiss) as exc:
                    conv.fatal_error = f"diagnosis call failed: {exc}"
                    conv.turns.append(
                        AgentTurn(turn_index, reply, code.source, outcome, None, feedback)
                    )
                    return failed(steps=steps)
                diagnosis_text = diag.cause_text
                count([ChatMessage("user", code.source)], diagnosis_text)
                feedback = f"{feedback}\nPossible cause:\n{diagnosis_text}"

        conv.turns.append(
            AgentTurn(
                turn_index,
                reply,
                code.source if code else None,
                outcome,
                diagnosis_text,
                feedback,
            )
        )

        if steps >= cfg.max_steps:
            budget_exhausted = True
            break

        conv.messages.append(ChatMessage("user", feedback))
        reply = ask()
        if reply is None:
            return failed(steps=steps)

    answer = extract_final_answer(conv) if terminated else None
    has_success = any(o.status == "success" for o in conv.executions())
    if terminated and answer is not None and has_success:
        result = QueryResult(
            question=question,
            final_answer=answer,
            status="solved",
            steps_used=steps,
            transcript=conv,
            approx_tokens=tokens,
        )
        _store_memory(cfg, store, question, conv, solved=True)
        return result
    return failed(budget_exhausted=budget_exhausted, steps=steps)


def _store_memory(
    cfg: AgentConfig,
    store: MemoryStore | None,
    question: str,
    conv: Conversation,
    solved: bool = False,
):
    """Persist the last successful plan, per the configured policy."""
    if store is None or not cfg.ablations.memory:
        return
    success_turn = conv.last_successful_turn()
    if success_turn is None or success_turn.code is None:
        return
    if cfg.memory_policy == "success" and not solved:
        return
    status = "success" if solved else "completion"
    store.insert(question, success_turn.code, status=status)
