"""Long-term memory of past successful (question, plan) pairs.

Entries are retrieved as few-shot demonstrations for new questions by
smallest Levenshtein distance between question texts, ties broken by
recency.  The store is an append-only newline-delimited JSON file:

    {"seq": 0, "question": "...", "code": "...", "status": "success"}

status is "success" for solved queries; "completion" entries appear only
under the completion memory policy.  A store opened with path=None is
purely in-memory (used for ablation runs that must not persist).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path


class PersistenceError(Exception):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    question: str
    code: str
    status: str
    seq: int


def levenshtein(a: str, b: str) -> int:
    """Classic edit distance (unit insert/delete/substitute) over code points."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,  # delete
                    current[j - 1] + 1,  # insert
                    previous[j - 1] + (ca != cb),  # substitute
                )
            )
        previous = current
    return previous[-1]


class MemoryStore:
    def __init__(self, backing_path: str | Path | None = None):
        self.backing_path = Path(backing_path) if backing_path is not None else None
        self.entries: list[MemoryEntry] = []
        self._lock = threading.Lock()
        if self.backing_path is not None and self.backing_path.exists():
            self._load()

    def _load(self):
        for line_no, line in enumerate(
            self.backing_path.read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = MemoryEntry(rec["question"], rec["code"], rec["status"], rec["seq"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise PersistenceError(
                    f"corrupt memory record at {self.backing_path}:{line_no}: {exc}"
                ) from exc
            self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def next_seq(self) -> int:
        return self.entries[-1].seq + 1 if self.entries else 0

    def insert(self, question: str, code: str, status: str = "success") -> MemoryEntry:
        """Append an entry in memory and to the backing file."""
        if not question or not code:
            raise ValueError("memory entries need a non-empty question and code")
        with self._lock:
            entry = MemoryEntry(question, code, status, self.next_seq())
            if self.backing_path is not None:
                record = json.dumps(
                    {
                        "seq": entry.seq,
                        "question": entry.question,
                        "code": entry.code,
                        "status": entry.status,
                    },
                    ensure_ascii=False,
                )
                try:
                    with open(self.backing_path, "a", encoding="utf-8") as fh:
                        fh.write(record + "\n")
                except OSError as exc:
                    raise PersistenceError(f"cannot append to {self.backing_path}: {exc}") from exc
            self.entries.append(entry)
            return entry

    def clear(self):
        """Drop all entries and truncate the backing file."""
        with self._lock:
            self.entries = []
            if self.backing_path is not None and self.backing_path.exists():
                try:
                    self.backing_path.write_text("", encoding="utf-8")
                except OSError as exc:
                    raise PersistenceError(f"cannot truncate {self.backing_path}: {exc}") from exc

    def snapshot(self) -> "MemoryStore":
        """In-memory copy, detached from the backing file."""
        clone = MemoryStore(None)
        clone.entries = list(self.entries)
        return clone


def retrieve_topk(
    store: MemoryStore, question: str, k: int, casefold: bool = False
) -> list[MemoryEntry]:
    """The k entries nearest to the question by edit distance.

    Ordered by ascending distance; equal distances prefer the larger seq
    (most recent first).  Returns every entry when the store holds fewer
    than k.  Distance is computed on raw text unless casefold is set.
    """
    if k <= 0:
        return []
    query = question.casefold() if casefold else question
    ranked = sorted(
        store.entries,
        key=lambda e: (
            levenshtein(query, e.question.casefold() if casefold else e.question),
            -e.seq,
        ),
    )
    return ranked[:k]
