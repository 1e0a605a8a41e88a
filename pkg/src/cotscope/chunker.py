"""Keyword-based segmentation of a CoT into semantic chunks.

A chunk boundary opens at the start of every keyword occurrence; the text
before the first keyword forms chunk 0. Chunks tile the CoT exactly, so
concatenating their texts reproduces the input unchanged.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

# Transcribed verbatim from the cue-phrase table this tool standardizes on,
# row-major. Quirks are intentional and preserved: "go though each option"
# and the single curly apostrophe in one "Let's".
DEFAULT_KEYWORD_ENTRIES = (
    "Wait", "Let me step back", "Hang on",
    "Hold on", "Let me double check", "Hold on a minute",
    "Hold on a second", "Am I missing something", "Alternatively",
    "Instead", "Similarly", "I'll approach this from another angle",
    "Let's explore alternative approaches", "Looking at other approaches", "Let me check",
    "But let's check", "But wait", "Let's check",
    "I should check", "Let me verify", "Let's verify",
    "Another thought", "I should double-check", "Let me double-check",
    "Let me re-examine", "Let me confirm", "Looking at the options",
    "Looking at the answer choices", "Let's look at the options", "Let's look at each choice",
    "Looking at the other choices", "Looking at the answer options", "Let me just confirm",
    "Another angle", "Another check", "Let's think again",
    "Let's also think about", "Let me think about", "Another point",
    "So back to", "Another possibility", "Let's proceed step by step",
    "Looking at the candidate answers", "second thought", "Let’s break it down",
    "Let me reconsider", "Let's go back", "re-analyze",
    "re-check", "reconsider", "re-examine",
    "First,", "go though each option", "another approach",
)


@dataclass(frozen=True)
class KeywordTable:
    """Ordered keyword list; matching is case-insensitive raw-substring."""

    entries: tuple[str, ...]
    match_policy: str = "case_insensitive"
    _pattern: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.match_policy != "case_insensitive":
            raise ValueError(f"unsupported match policy {self.match_policy!r}")
        seen = set()
        deduped = []
        for kw in self.entries:
            if not kw:
                continue
            folded = kw.casefold()
            if folded in seen:
                continue
            seen.add(folded)
            deduped.append(kw)
        if not deduped:
            raise ValueError("keyword table is empty")
        object.__setattr__(self, "entries", tuple(deduped))
        # Longest alternative first so the longest keyword wins at a shared
        # start position; finditer never re-enters a consumed match.
        ordered = sorted(self.entries, key=len, reverse=True)
        pattern = re.compile("|".join(re.escape(kw) for kw in ordered), re.IGNORECASE)
        object.__setattr__(self, "_pattern", pattern)


DEFAULT_KEYWORDS = KeywordTable(entries=DEFAULT_KEYWORD_ENTRIES)


def load_keyword_table(path: str | Path) -> KeywordTable:
    """Read a keyword table from a plain-text file, one keyword per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    entries = tuple(ln for ln in (ln.strip("\n\r") for ln in lines) if ln.strip())
    return KeywordTable(entries=entries)


@dataclass(frozen=True)
class Chunk:
    index: int
    start: int
    end: int  # exclusive
    text: str

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


def segment(cot: str, table: KeywordTable = DEFAULT_KEYWORDS) -> list[Chunk]:
    """Split *cot* at every keyword occurrence.

    Boundaries sit at match starts; matches are found left to right, the
    longest keyword wins at a shared start, and later keywords inside an
    already-consumed match are skipped. Matching is raw-substring, so a
    keyword inside a longer word still splits. Empty chunks are never
    emitted; the result tiles the input exactly.
    """
    if not cot:
        return []
    boundaries = [0]
    for m in table._pattern.finditer(cot):
        if m.start() != boundaries[-1]:
            boundaries.append(m.start())
    boundaries.append(len(cot))
    chunks = []
    for i in range(len(boundaries) - 1):
        start, end = boundaries[i], boundaries[i + 1]
        if start == end:
            continue
        chunks.append(Chunk(index=len(chunks), start=start, end=end, text=cot[start:end]))
    return chunks
