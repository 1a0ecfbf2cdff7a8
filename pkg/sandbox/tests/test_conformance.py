"""Sandbox conformance criteria, driven over the raw wire protocol."""

import time

from minihost import MiniHost

ERROR_CODES = (
    "UnknownTable",
    "UnknownColumn",
    "BadCondition",
    "EmptyResult",
    "BadExpression",
    "BadDate",
    "SqlError",
)


def test_twenty_planted_tool_errors_forward_losslessly():
    """ok=false results re-raise and report with the exact code and message."""
    cases = [
        (ERROR_CODES[i % len(ERROR_CODES)], f"planted message #{i} with detail {i * 7}")
        for i in range(20)
    ]
    tools = ("LoadDB", "FilterDB", "GetValue", "Calculate", "Calendar", "SQLInterpreter")
    for i, (code, message) in enumerate(cases):
        tool = tools[i % len(tools)]
        args = "'x'" if tool in ("LoadDB", "Calculate", "SQLInterpreter") else "'x', 'y'"
        host = MiniHost()
        try:
            messages = host.run(
                f"value = {tool}({args})\nprint(value)",
                tool_results=[{"ok": False, "code": code, "message": message}],
            )
            final = messages[-1]
            assert final["type"] == "error"
            assert final["error_type"] == code
            assert final["message"] == message
            assert final["line"] == 1
            assert host.wait() == 0
        finally:
            host.close()


def test_planted_exception_on_line_7_reports_line_7():
    host = MiniHost()
    try:
        code = "\n".join(
            [
                "a = 'one'",
                "b = 'two'",
                "c = a + b",
                "d = len(c)",
                "e = d * 2",
                "f = e - 1",
                "raise KeyError('line seven')",
            ]
        )
        messages = host.run(code)
        assert messages[-1]["error_type"] == "KeyError"
        assert messages[-1]["line"] == 7
    finally:
        host.close()


def test_infinite_loop_killed_within_timeout_plus_two_seconds():
    host = MiniHost()
    try:
        timeout_s = 1
        start = time.monotonic()
        host.send({"type": "run", "code": "while True:\n    x = 1", "timeout_s": timeout_s})
        rc = host.wait(timeout=timeout_s + 4)
        elapsed = time.monotonic() - start
        assert elapsed < timeout_s + 2
        assert rc != 0  # no done message: the host reports this as a timeout
    finally:
        host.close()


def test_forbidden_import_is_error_trace_not_capability():
    host = MiniHost()
    try:
        messages = host.run("import socket\nsocket.create_connection(('example.com', 80))")
        final = messages[-1]
        assert final["type"] == "error"
        assert final["error_type"] == "ImportError"
        assert final["line"] == 1
        assert host.wait() == 0
        # nothing leaked: no tool calls, no prints, only the error report
        assert [m["type"] for m in messages] == ["error"]
    finally:
        host.close()


def test_os_and_open_are_unreachable():
    for code in (
        "import os",
        "import sys",
        "import subprocess",
        "open('/etc/passwd').read()",
        "__import__('os').system('true')",
    ):
        host = MiniHost()
        try:
            messages = host.run(code)
            assert messages[-1]["type"] == "error"
            assert messages[-1]["error_type"] in ("ImportError", "NameError")
        finally:
            host.close()
