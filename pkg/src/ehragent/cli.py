"""Command-line surface.

    ehragent ask "<question>" [--save transcript.json]
    ehragent eval --dataset questions.jsonl [--report out.json]
                  [--fresh-memory] [--parallel N]
    ehragent memory list | clear | import <file>
    ehragent tools exec <ToolName> <args...>

Global flags (before or after the subcommand): --config FILE,
--replay TRACE, --no-knowledge, --no-memory, --no-debug.

Exit codes: 0 success, 1 the agent ran but did not solve the question,
2 usage or configuration error.  Answers go to stdout, logs to stderr.

The config file is JSON; unknown keys are rejected and relative paths
resolve against the config file's directory.  Flags override file values.
Without --replay, `ask` and `eval` need llm.base_url plus the API key
environment variable and fail fast when either is missing.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bridge import SandboxConfig, encode_value
from .evalharness import evaluate, load_dataset, trace_id_of
from .gateway import HttpBackend, ReplayBackend
from .memory import MemoryStore
from .orchestrator import Ablations, AgentConfig, Demonstration, run_query
from .store import StoreError, load_database
from .tools import TOOL_NAMES, ToolError, tool_dispatch


class ConfigError(Exception):
    pass


_DEFAULTS = {
    "database_dir": None,
    "metadata": None,
    "memory_file": None,
    "initial_demos": None,
    "knowledge_demos": None,
    "replay_trace": None,
    "llm": {
        "base_url": None,
        "model": "gpt-4",
        "api_key_env": "EHRAGENT_API_KEY",
        "temperature": 0.0,
        "timeout_s": 120.0,
    },
    "agent": {
        "k_demos": 4,
        "max_steps": 10,
        "memory_policy": "success",
        "memory_casefold": False,
        "execution_timeout_s": 30.0,
        "sandbox_command": None,
    },
}

_PATH_KEYS = ("database_dir", "metadata", "memory_file", "initial_demos", "knowledge_demos", "replay_trace")


def load_config(path: str | None) -> dict:
    config = json.loads(json.dumps(_DEFAULTS))  # deep copy
    if path is None:
        return config
    base = Path(path).resolve().parent
    try:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in loaded.items():
        if key not in config:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(config[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            for sub_key, sub_value in value.items():
                if sub_key not in config[key]:
                    raise ConfigError(f"unknown config key {key}.{sub_key}")
                config[key][sub_key] = sub_value
        else:
            config[key] = value
    for key in _PATH_KEYS:
        if config[key] is not None:
            config[key] = str((base / config[key]).resolve())
    return config


def _load_demos(path: str | None) -> list[Demonstration]:
    if path is None:
        return []
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Demonstration(r["question"], r["code"]) for r in records]


def _load_knowledge_demos(path: str | None) -> list[tuple[str, str]]:
    if path is None:
        return []
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(r["question"], r["knowledge"]) for r in records]


class Engine:
    """Everything a subcommand needs, built from config + flags."""

    def __init__(self, config: dict, args):
        self.config = config
        self.args = args

    def database(self):
        if not self.config["database_dir"] or not self.config["metadata"]:
            raise ConfigError("database_dir and metadata must be set (use --config)")
        try:
            return load_database(self.config["database_dir"], self.config["metadata"])
        except StoreError as exc:
            raise ConfigError(f"cannot load database: {exc}") from exc

    def memory_store(self) -> MemoryStore:
        return MemoryStore(self.config["memory_file"])

    def replay_path(self) -> str | None:
        return getattr(self.args, "replay", None) or self.config["replay_trace"]

    def backend(self):
        replay = self.replay_path()
        if replay is not None:
            try:
                return ReplayBackend.load(replay)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load replay trace {replay}: {exc}") from exc
        llm = self.config["llm"]
        if not llm["base_url"]:
            raise ConfigError("llm.base_url is not configured and no --replay trace was given")
        import os

        if not os.environ.get(llm["api_key_env"]):
            raise ConfigError(
                f"environment variable {llm['api_key_env']} is not set; "
                "set it or run with --replay"
            )
        return HttpBackend(llm["base_url"], llm["model"], llm["api_key_env"], llm["timeout_s"])

    def agent_config(self) -> AgentConfig:
        agent = self.config["agent"]
        ablations = Ablations(
            knowledge=not getattr(self.args, "no_knowledge", False),
            memory=not getattr(self.args, "no_memory", False),
            debug=not getattr(self.args, "no_debug", False),
        )
        sandbox = SandboxConfig(
            command=agent["sandbox_command"], timeout_s=agent["execution_timeout_s"]
        )
        memory_policy = getattr(self.args, "memory_policy", None) or agent["memory_policy"]
        try:
            return AgentConfig(
                k_demos=agent["k_demos"],
                max_steps=agent["max_steps"],
                temperature=self.config["llm"]["temperature"],
                ablations=ablations,
                memory_policy=memory_policy,
                memory_casefold=agent["memory_casefold"],
                sandbox=sandbox,
                initial_demos=_load_demos(self.config["initial_demos"]),
                knowledge_demos=_load_knowledge_demos(self.config["knowledge_demos"]),
            )
        except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad agent configuration: {exc}") from exc


# --- subcommands ----------------------------------------------------------------


def cmd_ask(engine: Engine, args) -> int:
    db = engine.database()
    result = run_query(
        engine.agent_config(), db, engine.memory_store(), engine.backend(), args.question
    )
    if args.save:
        Path(args.save).write_text(result.to_json(include_timings=True) + "\n", encoding="utf-8")
        print(f"transcript saved to {args.save}", file=sys.stderr)
    if result.status == "solved":
        print(f"ANSWER: {result.final_answer}")
        return 0
    print(
        f"unsolved after {result.steps_used} step(s); failure label: {result.failure_label}",
        file=sys.stderr,
    )
    return 1


def cmd_eval(engine: Engine, args) -> int:
    db = engine.database()
    dataset = load_dataset(args.dataset)
    replay = engine.replay_path()
    if args.parallel > 1 and not args.fresh_memory:
        print(
            "warning: shared-memory runs with --parallel > 1 are not deterministic "
            "(completion order decides the demonstration sets)",
            file=sys.stderr,
        )
    report = evaluate(
        engine.agent_config(),
        db,
        dataset,
        engine.backend(),
        store=engine.memory_store(),
        fresh_memory=args.fresh_memory,
        parallel=args.parallel,
        trace_id=trace_id_of(replay) if replay else None,
    )
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(report.to_text())
    print(f"report written to {args.report}", file=sys.stderr)
    return 0


def cmd_memory(engine: Engine, args) -> int:
    store = engine.memory_store()
    if args.action == "list":
        for entry in store.entries:
            print(f"{entry.seq}\t{entry.status}\t{entry.question}")
        print(f"{len(store)} entr{'y' if len(store) == 1 else 'ies'}", file=sys.stderr)
        return 0
    if args.action == "clear":
        store.clear()
        print("memory cleared", file=sys.stderr)
        return 0
    # import
    if not args.file:
        raise ConfigError("memory import needs a file argument")
    count = 0
    for line in Path(args.file).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        store.insert(record["question"], record["code"], record.get("status", "success"))
        count += 1
    print(f"imported {count} entr{'y' if count == 1 else 'ies'}", file=sys.stderr)
    return 0


def cmd_tools(engine: Engine, args) -> int:
    name = args.name
    if name not in TOOL_NAMES:
        print(f"unknown tool {name!r}; tools: {', '.join(TOOL_NAMES)}", file=sys.stderr)
        return 2
    db = engine.database()
    dispatch = tool_dispatch(db)
    try:
        if name in ("FilterDB", "GetValue"):
            if len(args.args) != 2:
                print(f"{name} needs: <table_name> <argument>", file=sys.stderr)
                return 2
            table = dispatch["LoadDB"](args.args[0])
            result = dispatch[name](table, args.args[1])
        else:
            result = dispatch[name](*args.args)
    except ToolError as exc:
        print(f"{exc.code}: {exc.message}", file=sys.stderr)
        return 1
    except TypeError as exc:
        print(f"bad arguments: {exc}", file=sys.stderr)
        return 2
    encoded = encode_value(result)
    if isinstance(encoded, dict) and "rows" in encoded:  # a table
        print(",".join(c["name"] for c in encoded["columns"]))
        for row in encoded["rows"]:
            print(",".join("" if cell is None else str(cell) for cell in row))
    elif isinstance(encoded, list):
        for element in encoded:
            print(json.dumps(element, ensure_ascii=False))
    else:
        print(encoded)
    return 0


# --- argument parsing --------------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--replay", default=argparse.SUPPRESS, help="replay trace (no network)")
    common.add_argument("--no-knowledge", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--no-memory", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--no-debug", action="store_true", default=argparse.SUPPRESS)
    common.add_argument(
        "--memory-policy", choices=("success", "completion"), default=argparse.SUPPRESS
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="ehragent", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", parents=[common], help="answer one question")
    ask.add_argument("question")
    ask.add_argument("--save", help="write the transcript JSON here")
    ask.set_defaults(func=cmd_ask)

    ev = sub.add_parser("eval", parents=[common], help="run a question set")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--report", default="eval_report.json")
    ev.add_argument("--fresh-memory", action="store_true")
    ev.add_argument("--parallel", type=int, default=1)
    ev.set_defaults(func=cmd_eval)

    mem = sub.add_parser("memory", parents=[common], help="inspect or edit long-term memory")
    mem.add_argument("action", choices=("list", "clear", "import"))
    mem.add_argument("file", nargs="?")
    mem.set_defaults(func=cmd_memory)

    tools = sub.add_parser("tools", parents=[common], help="invoke one tool directly")
    tools.add_argument("verb", choices=("exec",))
    tools.add_argument("name")
    tools.add_argument("args", nargs="*")
    tools.set_defaults(func=cmd_tools)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(getattr(args, "config", None))
        engine = Engine(config, args)
        return args.func(engine, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
