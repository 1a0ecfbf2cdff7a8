import pytest

from ehragent.gateway import ChatMessage, LlmError, RecordingBackend, ReplayBackend, fingerprint
from ehragent.knowledge import KNOWLEDGE_SYSTEM, build_knowledge_prompt, integrate_knowledge


def test_prompt_contains_metadata_verbatim_and_ends_with_question():
    meta = "db description\n\nTable: patients\n  SUBJECT_ID: id"
    prompt = build_knowledge_prompt(meta, "count female patients", [("dq1", "dk1"), ("dq2", "dk2")])
    assert prompt.startswith("db description")
    assert meta in prompt
    assert prompt.endswith("Question: count female patients\nKnowledge:")
    assert prompt.index("dq1") < prompt.index("dq2")


def test_prompt_without_demos_has_no_demo_sections():
    prompt = build_knowledge_prompt("meta", "q", [])
    assert prompt.count("Question:") == 1
    assert prompt.count("Knowledge:") == 1


def test_prompt_is_byte_stable():
    args = ("meta text", "the question", [("a", "b")])
    assert build_knowledge_prompt(*args) == build_knowledge_prompt(*args)


def test_integrate_strips_whitespace():
    class Canned:
        def complete(self, messages, temperature):
            assert messages[0].content == KNOWLEDGE_SYSTEM
            return "  the prescriptions table holds drug orders \n"

    summary = integrate_knowledge(Canned(), "meta", "where is aspirin ec?", [])
    assert summary.body == "the prescriptions table holds drug orders"
    assert summary.query == "where is aspirin ec?"


def test_integrate_under_recorded_replay(tmp_path):
    class Canned:
        def complete(self, messages, temperature):
            return "look in the prescriptions table, join d_icd_procedures by ICD9_CODE"

    trace = tmp_path / "knowledge_trace.jsonl"
    question = "how many patients received aspirin ec?"
    recorded = integrate_knowledge(RecordingBackend(Canned(), trace), "meta", question, [])
    replayed = integrate_knowledge(ReplayBackend.load(trace), "meta", question, [])
    assert replayed == recorded
    assert "prescriptions" in replayed.body


def test_offline_gateway_error_propagates():
    class Offline:
        def complete(self, messages, temperature):
            raise LlmError("connection refused", transient=False)

    with pytest.raises(LlmError):
        integrate_knowledge(Offline(), "meta", "q", [])
