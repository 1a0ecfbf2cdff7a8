"""Execute one untrusted plan in a restricted interpreter session.

The host spawns this process, sends a single run message on stdin, and
reads newline-delimited JSON messages on stdout (UTF-8, one object per
line):

    host -> sandbox: {"type": "run", "code": str, "timeout_s": number}
    sandbox -> host: {"type": "tool_call", "id": int, "name": str, "args": [...]}
    host -> sandbox: {"type": "tool_result", "id": int, "ok": true, "value": ...}
                     {"type": "tool_result", "id": int, "ok": false,
                      "code": str, "message": str}
    sandbox -> host: {"type": "print", "text": str}
    sandbox -> host: {"type": "done"}
                     {"type": "error", "error_type": str, "message": str,
                      "line": int | null}

Exactly one plan per process.  The plan namespace contains the six tool
proxies (LoadDB, FilterDB, GetValue, Calculate, Calendar, SQLInterpreter),
exception classes named after the tool error codes, and a builtins
allowlist; only math and datetime may be imported.  Failed tool results
re-raise inside the plan as the exception class named by their code, so
an uncaught tool failure reports exactly the host's code and message.

Exit codes: 0 run completed (done or error reported), 2 protocol
violation, 3 channel failure, 4 self-termination at the deadline (armed
at timeout_s plus one second of grace so the host's own kill normally
wins; it fires even if the host is gone).

Reported line numbers are 1-based within the submitted plan text.
"""

import builtins
import json
import os
import sys
import threading

PLAN_FILENAME = "<plan>"
DEADLINE_GRACE_S = 1.0

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

_ALLOWED_IMPORTS = ("math", "datetime")


class ToolFault(Exception):
    """Base of the exception classes that mirror host-side tool errors."""


TOOL_EXCEPTIONS = {code: type(code, (ToolFault,), {}) for code in ERROR_CODES}


def _emit(out, obj):
    try:
        out.write(json.dumps(obj, ensure_ascii=False) + "\n")
        out.flush()
    except (BrokenPipeError, OSError):
        os._exit(3)


def _protocol_violation(out, message):
    _emit(out, {"type": "error", "error_type": "ProtocolViolation", "message": message, "line": None})
    os._exit(2)  # not sys.exit: must not be swallowed by the plan's except clause


def _restricted_import(name, *args, **kwargs):
    root = name.split(".")[0]
    if root in _ALLOWED_IMPORTS:
        return __import__(name, *args, **kwargs)
    raise ImportError(f"import of {name!r} is not allowed in plans")


def _make_builtins(print_fn):
    safe = {}
    for name in (
        "abs", "all", "any", "bool", "dict", "divmod", "enumerate", "filter",
        "float", "format", "frozenset", "int", "isinstance", "iter", "len",
        "list", "map", "max", "min", "next", "pow", "range", "repr",
        "reversed", "round", "set", "slice", "sorted", "str", "sum", "tuple",
        "zip",
        "ArithmeticError", "AttributeError", "Exception", "ImportError",
        "IndexError", "KeyError", "LookupError", "NameError", "RuntimeError",
        "StopIteration", "TypeError", "ValueError", "ZeroDivisionError",
    ):
        safe[name] = getattr(builtins, name)
    safe["print"] = print_fn
    safe["__import__"] = _restricted_import
    safe["True"] = True
    safe["False"] = False
    safe["None"] = None
    return safe


class Session:
    def __init__(self, stdin, stdout):
        self.stdin = stdin
        self.stdout = stdout
        self.rpc_counter = 0

    def sandbox_print(self, *args, sep=" ", end="\n"):
        text = sep.join(str(a) for a in args) + end
        _emit(self.stdout, {"type": "print", "text": text})

    def tool_proxy(self, name):
        def call(*args):
            self.rpc_counter += 1
            call_id = self.rpc_counter
            try:
                encoded = json.dumps(
                    {"type": "tool_call", "id": call_id, "name": name, "args": list(args)},
                    ensure_ascii=False,
                )
            except (TypeError, ValueError):
                raise TypeError(f"arguments to {name} must be JSON-serializable values")
            try:
                self.stdout.write(encoded + "\n")
                self.stdout.flush()
            except (BrokenPipeError, OSError):
                os._exit(3)
            line = self.stdin.readline()
            if not line:
                os._exit(3)
            try:
                result = json.loads(line)
            except ValueError:
                _protocol_violation(self.stdout, f"unparseable tool_result line: {line[:200]!r}")
            if result.get("type") != "tool_result" or result.get("id") != call_id:
                _protocol_violation(
                    self.stdout,
                    f"expected tool_result id={call_id}, got {result.get('type')!r} id={result.get('id')!r}",
                )
            if result.get("ok"):
                return result.get("value")
            code = result.get("code", "BadCondition")
            exc_class = TOOL_EXCEPTIONS.get(code, ToolFault)
            raise exc_class(result.get("message", code))

        call.__name__ = name
        return call

    def namespace(self):
        ns = {"__builtins__": _make_builtins(self.sandbox_print)}
        for name in TOOL_NAMES:
            ns[name] = self.tool_proxy(name)
        ns.update(TOOL_EXCEPTIONS)
        return ns

    def run(self, code):
        try:
            compiled = compile(code, PLAN_FILENAME, "exec")
        except SyntaxError as exc:
            _emit(
                self.stdout,
                {
                    "type": "error",
                    "error_type": "SyntaxError",
                    "message": exc.msg or str(exc),
                    "line": exc.lineno,
                },
            )
            return
        try:
            exec(compiled, self.namespace())
        except BaseException as exc:  # report, never crash the protocol
            _emit(
                self.stdout,
                {
                    "type": "error",
                    "error_type": type(exc).__name__,
                    "message": str(exc),
                    "line": _plan_line(exc),
                },
            )
            return
        _emit(self.stdout, {"type": "done"})


def _plan_line(exc):
    """Deepest traceback line inside the submitted plan, else None."""
    line = None
    tb = exc.__traceback__
    while tb is not None:
        if tb.tb_frame.f_code.co_filename == PLAN_FILENAME:
            line = tb.tb_lineno
        tb = tb.tb_next
    return line


def main(stdin=None, stdout=None):
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    first = stdin.readline()
    if not first:
        os._exit(3)
    try:
        message = json.loads(first)
    except ValueError:
        _protocol_violation(stdout, f"unparseable run message: {first[:200]!r}")
    if message.get("type") != "run" or not isinstance(message.get("code"), str):
        _protocol_violation(stdout, "first message must be {'type': 'run', 'code': str, 'timeout_s': number}")
    timeout_s = message.get("timeout_s", 30)
    try:
        timeout_s = float(timeout_s)
    except (TypeError, ValueError):
        _protocol_violation(stdout, f"bad timeout_s: {timeout_s!r}")

    # Backstop: die at the deadline even if the host no longer exists.
    killer = threading.Timer(timeout_s + DEADLINE_GRACE_S, os._exit, args=(4,))
    killer.daemon = True
    killer.start()

    Session(stdin, stdout).run(message["code"])
    killer.cancel()
    sys.exit(0)


if __name__ == "__main__":
    main()
