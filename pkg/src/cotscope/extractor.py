"""Drives the extractor model: reasoning graph in DOT, per-node 20-word
quotes, and failed-branch analysis; aligns quotes back to CoT spans.

Alignment slides a window of the quote's word length over the CoT and scores
word-3-gram multiset overlap (Jaccard), so minor misquotations still match
while cross-document text does not. Accepted spans tile the tail of the CoT:
each node's span runs to the start of the next accepted node's span.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from . import graph as graph_mod
from .llm_client import ChatClient, user_request

GRAPH_PROMPT = """\
Parse the reasoning trace into a Graphviz diagram. Focus on these essentials:

Node Rules:
- One node per distinct reasoning step
- 'fillcolor=lightblue': Successful reasoning steps
- 'fillcolor=lightpink': Failed attempts

Edge Rules:
- Connect node A -> node B if the information or insight from A is actually used to construct the reasoning in B; branch new attempts from their starting ancestor, not from dead ends.

Requirements:
- Use 'rankdir=TB'
- Include ALL attempts (including failures), do not miss any steps in the reasoning.
- ALWAYS start with a "problem statement" node
- ALWAYS end with a "final answer" node
- Do NOT reorder or reorganize the reasoning flow

Generate complete Graphviz DOT code in dot blocks."""

QUOTES_AND_BRANCHES_PROMPT = """\
Additionally, provide a separate list with the exact format below:

List of nodes with first 20 words:
1. node id: "exact first 20 words of this reasoning step"
2. node id: "exact first 20 words of this reasoning step"
3. node id: "exact first 20 words of this reasoning step"
...

Requirements:
- Use numbered list format: "number. node id: "quoted text""
- Each entry must be on a single line
- Preserve exact formatting, punctuation, line breaks, and special characters from the original reasoning trace
- Use double quotes around the 20-word excerpts; the 20-word should be exactly the first 20 words of the reasoning step.
- Node IDs should match exactly with the DOT code node names
- This list should enable precise string matching back to the original reasoning trace

Example format:
1. problem statement: "Solve the following math problem efficiently and clearly. Please reason step by step, and put your final answer within $\\boxed{answer}$."
2. analysis step: "First, let me understand what we're given. We have a triangle with specific angle measures and need to find the missing side length."

After these, for each failed attempts you have labeled as lightpink, tract the entire reasoning branch, also provide:

Branch Analysis:
1. node id, starts from node id "name", fails to current node id.

The definition: For each failed reasoning attempt (pink node), identify the most recent successful node (blue node) from which this failed path originally diverged, marking that successful node as the branch starting point where alternative reasoning paths split off.
The next reasoning step after the current failed attempt should directly starts again from the node just before this branching starting point."""


class ExtractionError(RuntimeError):
    """Extraction reply is unusable after the retry budget."""


class ExtractionFormatError(ExtractionError):
    """Reply sections violate the extraction contract."""


@dataclass
class Branch:
    failed_node_id: str
    branch_start_node_id: str


@dataclass
class ExtractionResult:
    dot: str
    node_quotes: dict[str, str]
    branches: list[Branch]
    raw_reply: str
    graph: graph_mod.ReasoningGraph


@dataclass(frozen=True)
class NodeSpan:
    node_id: str
    start: int
    end: int  # exclusive
    match_score: float

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


def extraction_request(cot: str, model_id: str):
    text = f"{GRAPH_PROMPT}\n\n{QUOTES_AND_BRANCHES_PROMPT}\n\nReasoning trace:\n{cot}"
    return user_request(model_id, text, temperature=0.0)


_QUOTE_LINE = re.compile(r"^\s*\d+\.\s*(?P<id>[^:]+?)\s*:\s*\"(?P<quote>.*)\"\s*$")
_BRANCH_LINE = re.compile(
    r"^\s*\d+\.\s*.*?starts\s+from\s+(?:node\s+id\s+)?\"?(?P<start>[^\",]+?)\"?\s*,\s*"
    r"fails\s+to\s+(?:current\s+node\s+id\s+)?\"?(?P<fail>[^\".,]+?)\"?\s*\.?\s*$",
    re.IGNORECASE,
)


def _section_lines(reply: str, header_re: str) -> list[str]:
    m = re.search(header_re, reply, re.IGNORECASE)
    if m is None:
        return []
    lines = []
    for line in reply[m.end() :].splitlines():
        if not line.strip():
            if lines:
                break
            continue
        if not re.match(r"\s*\d+\.", line):
            break
        lines.append(line)
    return lines


def parse_extraction_reply(reply: str) -> tuple[str, dict[str, str], list[Branch]]:
    """Split a reply into (dot text, node quotes, branches).

    The quote list and branch analysis sections are independent of the DOT
    block: a missing section yields an empty map, never an error.
    """
    dot = reply  # parse_dot locates the first digraph block itself

    quotes: dict[str, str] = {}
    for line in _section_lines(reply, r"List of nodes with first 20 words\s*:"):
        m = _QUOTE_LINE.match(line)
        if m is None:
            continue
        quotes[m.group("id").strip().strip('"')] = m.group("quote")

    branches: list[Branch] = []
    for line in _section_lines(reply, r"Branch Analysis\s*:"):
        m = _BRANCH_LINE.match(line)
        if m is None:
            continue
        branches.append(
            Branch(
                failed_node_id=m.group("fail").strip(),
                branch_start_node_id=m.group("start").strip(),
            )
        )
    return dot, quotes, branches


def _validate_against_graph(
    g: graph_mod.ReasoningGraph, quotes: dict[str, str], branches: list[Branch]
) -> None:
    known = {n.id for n in g.nodes}
    for nid in quotes:
        if nid not in known:
            raise ExtractionFormatError(f"quoted node id {nid!r} not in the parsed graph")
    for br in branches:
        for nid in (br.failed_node_id, br.branch_start_node_id):
            if nid not in known:
                raise ExtractionFormatError(f"branch references unknown node {nid!r}")
        if g.node(br.failed_node_id).status != "failed":
            raise ExtractionFormatError(
                f"branch names {br.failed_node_id!r} as the failed attempt but its status is "
                f"{g.node(br.failed_node_id).status!r}"
            )


def extract(cot: str, client: ChatClient, model_id: str) -> ExtractionResult:
    """Single extraction call; one retry with parser feedback on DOT failure."""
    req = extraction_request(cot, model_id)
    reply = client.send(req)
    try:
        g = graph_mod.parse_dot(reply)
    except graph_mod.GraphParseError as first_error:
        followup = user_request(
            model_id,
            req.messages[0].text
            + f"\n\nYour previous reply could not be parsed ({first_error}). "
            "Re-emit the complete output in the required format.",
            temperature=0.0,
        )
        reply = client.send(followup)
        try:
            g = graph_mod.parse_dot(reply)
        except graph_mod.GraphParseError as second_error:
            raise ExtractionError(f"extraction unparseable after retry: {second_error}") from second_error
    dot, quotes, branches = parse_extraction_reply(reply)
    _validate_against_graph(g, quotes, branches)
    return ExtractionResult(
        dot=dot, node_quotes=quotes, branches=branches, raw_reply=reply, graph=g
    )


# ---------------------------------------------------------------------------
# Quote alignment
# ---------------------------------------------------------------------------

_WORD = re.compile(r"\S+")


def _words_with_offsets(text: str) -> list[tuple[str, int]]:
    return [(m.group(0).casefold(), m.start()) for m in _WORD.finditer(text)]


def _ngrams(words: Sequence[str], n: int) -> Counter:
    if len(words) < n:
        return Counter([tuple(words)]) if words else Counter()
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def ngram_jaccard(a: Sequence[str], b: Sequence[str], n: int = 3) -> float:
    """Jaccard overlap of word n-gram multisets; n shrinks for short inputs."""
    n = max(1, min(n, len(a), len(b)))
    ca, cb = _ngrams(a, n), _ngrams(b, n)
    inter = sum((ca & cb).values())
    union = sum((ca | cb).values())
    return inter / union if union else 0.0


def align_quotes(
    cot: str,
    node_quotes: dict[str, str],
    *,
    threshold: float = 0.5,
    ngram: int = 3,
) -> tuple[list[NodeSpan], list[str]]:
    """Align node quotes to CoT character spans.

    Quotes are processed in insertion order; each search starts one word
    past the previous accepted start, which keeps accepted spans ordered
    consistently with node numbering. For each quote the earliest window
    with the maximal n-gram score is accepted when the score clears the
    threshold. Spans tile from each accepted start to the next accepted
    start (or the end of the CoT). Returns the spans plus the node ids
    that failed to align.
    """
    words = _words_with_offsets(cot)
    accepted: list[tuple[str, int, float]] = []  # (node_id, word_index, score)
    unaligned: list[str] = []
    min_word = 0
    for node_id, quote in node_quotes.items():
        qwords = [w.casefold() for w in _WORD.findall(quote)]
        if not qwords or len(words) - min_word < 1:
            unaligned.append(node_id)
            continue
        width = min(len(qwords), len(words) - min_word)
        n = max(1, min(ngram, len(qwords), width))
        qgrams = _ngrams(qwords, n)
        best_score = -1.0
        best_idx = None
        for start in range(min_word, len(words) - width + 1):
            window = [w for w, _ in words[start : start + width]]
            cgrams = _ngrams(window, n)
            inter = sum((qgrams & cgrams).values())
            union = sum((qgrams | cgrams).values())
            score = inter / union if union else 0.0
            if score > best_score:
                best_score = score
                best_idx = start
        if best_idx is None or best_score < threshold:
            unaligned.append(node_id)
            continue
        accepted.append((node_id, best_idx, best_score))
        min_word = best_idx + 1

    spans: list[NodeSpan] = []
    for k, (node_id, widx, score) in enumerate(accepted):
        start = words[widx][1]
        if k + 1 < len(accepted):
            end = words[accepted[k + 1][1]][1]
        else:
            end = len(cot)
        spans.append(NodeSpan(node_id=node_id, start=start, end=end, match_score=score))
    return spans, unaligned
