"""Query-specific background knowledge, generated by the LLM.

Before planning starts, the model is shown the database metadata and
asked which tables, columns and identifiers matter for the question.
The reply is injected verbatim into the planning prompt; it is prompt
material and is never checked for factuality.
"""

from __future__ import annotations

from dataclasses import dataclass

from .gateway import ChatMessage, chat

KNOWLEDGE_SYSTEM = (
    "You are a clinical data expert. Given the description of an EHR database "
    "and a question, state which tables, columns and identifier values are "
    "needed to answer it, in a short paragraph. Do not answer the question."
)


@dataclass
class KnowledgeSummary:
    query: str
    body: str


def build_knowledge_prompt(
    metadata_text: str, question: str, demos: list[tuple[str, str]]
) -> str:
    """Deterministic user prompt: metadata, demos in order, then the question."""
    parts = [metadata_text.rstrip("\n")]
    for demo_question, demo_knowledge in demos:
        parts.append(f"Question: {demo_question}\nKnowledge:\n{demo_knowledge}")
    parts.append(f"Question: {question}\nKnowledge:")
    return "\n\n".join(parts)


def integrate_knowledge(
    backend, metadata_text: str, question: str, demos: list[tuple[str, str]], temperature: float = 0.0
) -> KnowledgeSummary:
    prompt = build_knowledge_prompt(metadata_text, question, demos)
    reply = chat(
        backend,
        [ChatMessage("system", KNOWLEDGE_SYSTEM), ChatMessage("user", prompt)],
        temperature,
    )
    return KnowledgeSummary(query=question, body=reply.strip())
