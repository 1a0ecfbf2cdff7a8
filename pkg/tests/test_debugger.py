import pytest

from ehragent.bridge import ErrorTrace, PlanCode
from ehragent.debugger import DEBUG_SYSTEM, build_debug_prompt, diagnose
from ehragent.gateway import LlmError, ReplayBackend, ReplayMiss


CODE = PlanCode("t = LoadDB('patients')\nf = FilterDB(t, 'SEX=F')\nprint(f)", turn_index=0)
TRACE = ErrorTrace("UnknownColumn", "table 'patients' has no column 'SEX'", (2, None))


def test_prompt_contains_code_trace_and_location():
    prompt = build_debug_prompt(CODE, TRACE, "tool defs here")
    assert CODE.source in prompt
    assert "tool defs here" in prompt
    assert "Error type: UnknownColumn" in prompt
    assert "line 2" in prompt


def test_prompt_omits_location_when_absent():
    trace = ErrorTrace("SqlError", "bad statement")
    prompt = build_debug_prompt(CODE, trace, "defs")
    assert "Error location" not in prompt
    assert "line" not in prompt.split("Error message")[1]


def test_prompt_is_byte_stable():
    assert build_debug_prompt(CODE, TRACE, "defs") == build_debug_prompt(CODE, TRACE, "defs")


def test_diagnose_returns_cause_text():
    class Canned:
        def complete(self, messages, temperature):
            assert messages[0].content == DEBUG_SYSTEM
            assert CODE.source in messages[1].content
            return " the column name is GENDER, not SEX \n"

    diagnosis = diagnose(Canned(), CODE, TRACE, "defs", turn_index=3)
    assert diagnosis.cause_text == "the column name is GENDER, not SEX"
    assert diagnosis.turn_index == 3
    assert diagnosis.trace is TRACE


def test_diagnose_surfaces_gateway_errors():
    with pytest.raises(ReplayMiss):
        diagnose(ReplayBackend({}), CODE, TRACE, "defs")

    class Broken:
        def complete(self, messages, temperature):
            raise LlmError("boom")

    with pytest.raises(LlmError):
        diagnose(Broken(), CODE, TRACE, "defs")
