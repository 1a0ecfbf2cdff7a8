import os
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]
SRC = REPO / "src"
SANDBOX_SRC = REPO / "sandbox" / "src"
FIXTURES = REPO / "fixtures"

if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

# The plan runtime runs as a child process (`python -m ehrsandbox`); make it
# importable there even when the sandbox package is not pip-installed.
_existing = os.environ.get("PYTHONPATH", "")
if str(SANDBOX_SRC) not in _existing.split(os.pathsep):
    os.environ["PYTHONPATH"] = (
        str(SANDBOX_SRC) + (os.pathsep + _existing if _existing else "")
    )


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def demo_db():
    from ehragent.store import load_database

    return load_database(FIXTURES / "demo_ehr" / "tables", FIXTURES / "demo_ehr" / "metadata.json")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance" not in report.nodeid:
                continue
            name = report.nodeid.split("::")[-1]
            verdict = "PASS" if status == "passed" else "FAIL"
            lines.append(f"[ACCEPTANCE] {name}: {verdict}")
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
