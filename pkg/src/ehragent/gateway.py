"""Chat-completion gateway with a live HTTP backend and a replay backend.

Every request is identified by a fingerprint: SHA-256 over the message
list encoded as role bytes, 0x1F, content bytes, 0x1E per message.  The
replay backend maps fingerprints to recorded responses from a
newline-delimited JSON trace:

    {"fp": "<64 hex chars>", "response": "..."}
    {"fp": "<64 hex chars>", "error": {"code": "context_length", "message": "..."}}

error entries let recorded provider failures (context overflow,
transport faults) replay hermetically.  A fingerprint with no entry
raises ReplayMiss; it is never silently synthesized.

The HTTP backend posts the common chat-completions JSON shape to
``{base_url}/chat/completions`` (see docs/llm-http.md) with the API key
read from an environment variable.  Transient transport failures are
retried at most 3 attempts with doubling backoff; context-length
overflows are never retried.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

ROLES = ("system", "user", "assistant")

MAX_ATTEMPTS = 3
BACKOFF_INITIAL_S = 1.0


class LlmError(Exception):
    def __init__(self, message: str, transient: bool = False):
        super().__init__(message)
        self.transient = transient


class ContextLengthExceeded(LlmError):
    def __init__(self, message: str = "context length limit exceeded"):
        super().__init__(message, transient=False)


class ReplayMiss(Exception):
    """The replay trace has no entry for this request (test setup bug)."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")


def fingerprint(messages: list[ChatMessage]) -> str:
    digest = hashlib.sha256()
    for msg in messages:
        digest.update(msg.role.encode("utf-8"))
        digest.update(b"\x1f")
        digest.update(msg.content.encode("utf-8"))
        digest.update(b"\x1e")
    return digest.hexdigest()


def approx_token_count(text: str) -> int:
    """Whitespace+punctuation approximation; good enough for cost tracking."""
    import re

    return len(re.findall(r"\w+|[^\w\s]", text))


class ReplayBackend:
    """Deterministic lookup of recorded responses; performs no I/O at all."""

    def __init__(self, trace: dict[str, dict]):
        self.trace = trace

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBackend":
        trace: dict[str, dict] = {}
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                fp = rec["fp"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"corrupt replay trace at {path}:{line_no}: {exc}") from exc
            trace[fp] = rec  # later entries win
        return cls(trace)

    def complete(self, messages: list[ChatMessage], temperature: float) -> str:
        rec = self.trace.get(fingerprint(messages))
        if rec is None:
            raise ReplayMiss(
                f"no recorded response for fingerprint {fingerprint(messages)} "
                f"(last message role={messages[-1].role!r}); the trace does not cover this request"
            )
        if "error" in rec:
            err = rec["error"]
            if err.get("code") == "context_length":
                raise ContextLengthExceeded(err.get("message", "context length limit exceeded"))
            raise LlmError(err.get("message", "recorded transport error"), transient=False)
        return rec["response"]


class RecordingBackend:
    """Tee wrapper: forwards to an inner backend and appends trace entries."""

    def __init__(self, inner, path: str | Path):
        self.inner = inner
        self.path = Path(path)

    def _append(self, record: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def complete(self, messages: list[ChatMessage], temperature: float) -> str:
        fp = fingerprint(messages)
        try:
            response = self.inner.complete(messages, temperature)
        except ContextLengthExceeded as exc:
            self._append({"fp": fp, "error": {"code": "context_length", "message": str(exc)}})
            raise
        except LlmError as exc:
            self._append({"fp": fp, "error": {"code": "transport", "message": str(exc)}})
            raise
        self._append({"fp": fp, "response": response})
        return response


class HttpBackend:
    """Provider-agnostic chat-completions client over plain urllib."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "EHRAGENT_API_KEY",
        timeout_s: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def complete(self, messages: list[ChatMessage], temperature: float) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise LlmError(f"API key environment variable {self.api_key_env} is not set")
        body = json.dumps(
            {
                "model": self.model,
                "messages": [{"role": m.role, "content": m.content} for m in messages],
                "temperature": temperature,
            }
        ).encode("utf-8")
        request = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=body,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {key}"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")[:2000]
            if exc.code == 400 and (
                "context_length_exceeded" in detail or "maximum context length" in detail
            ):
                raise ContextLengthExceeded(detail) from exc
            transient = exc.code in (429, 500, 502, 503, 504)
            raise LlmError(f"HTTP {exc.code}: {detail}", transient=transient) from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise LlmError(f"transport failure: {exc}", transient=True) from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"malformed completion payload: {payload!r}") from exc


def chat(backend, messages: list[ChatMessage], temperature: float = 0.0, _sleep=time.sleep) -> str:
    """One assistant reply for a message list (first message must be system)."""
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role != "system":
        raise ValueError("first message must have the system role")
    delay = BACKOFF_INITIAL_S
    for attempt in range(1, MAX_ATTEMPTS + 1):
        try:
            return backend.complete(messages, temperature)
        except ContextLengthExceeded:
            raise
        except LlmError as exc:
            if not exc.transient or attempt == MAX_ATTEMPTS:
                raise
            _sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")
