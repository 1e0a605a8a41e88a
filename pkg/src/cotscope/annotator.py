"""Judge-model labeling of chunks (progress/review, motivation) and the
lexical metric suite computed from those labels.

Labeling is conservative by construction: an activity reply that cannot be
parsed is retried once and then defaults to ``progress``, and an unparseable
motivation defaults to ``unclear``, so flagged defaults can only understate
review behavior.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from statistics import median
from typing import Optional, Sequence

from .chunker import Chunk
from .llm_client import ChatClient, ProviderError, user_request

logger = logging.getLogger(__name__)

ACTIVITIES = ("progress", "review")
MOTIVATIONS = ("clear", "semiclear", "unclear")
MOTIVATION_WEIGHTS = {"clear": 1.0, "semiclear": 0.5, "unclear": 0.0}


class AnnotationError(RuntimeError):
    """Judge call failed for a specific chunk."""

    def __init__(self, chunk_index: int, cause: str):
        super().__init__(f"chunk {chunk_index}: {cause}")
        self.chunk_index = chunk_index


@dataclass
class ChunkAnnotation:
    chunk_index: int
    activity: str
    motivation: Optional[str] = None
    flag: Optional[str] = None

    def validate(self) -> None:
        if self.activity not in ACTIVITIES:
            raise ValueError(f"bad activity {self.activity!r}")
        if self.activity == "review":
            if self.motivation is not None and self.motivation not in MOTIVATIONS:
                raise ValueError(f"bad motivation {self.motivation!r}")
        elif self.motivation is not None:
            raise ValueError("progress chunks take no motivation")


ACTIVITY_PROMPT = """\
You are labeling one chunk of a step-by-step reasoning trace.

Label definitions:
- progress: advances the active reasoning frontier, producing information that later steps rely on.
- review: reads, checks, restates, deletes, or rewinds existing material without advancing the frontier.

Context before the chunk:
{before}

Chunk to label:
{chunk}

Context after the chunk:
{after}

Answer with exactly one word: progress or review."""

MOTIVATION_PROMPT = """\
You are labeling the motivation of one review chunk of a step-by-step reasoning trace.

Label definitions:
- clear: the chunk states a review action (verify / re-check / backtrack / reread) and cites a specific trigger or rationale for that action, such as a rule number, mismatch, explicit ambiguity, or other concrete evidence.
- semiclear: the chunk states a review action and gives only a generic reason ("make sure it's correct", "something seems off", "to be safe") with no concrete trigger.
- unclear: the chunk shows a review action but gives no stated rationale at all; the motive must not be inferred.

Context before the chunk:
{before}

Chunk to label:
{chunk}

Context after the chunk:
{after}

Answer with exactly one word: clear, semiclear, or unclear."""


def _context(chunks: Sequence[Chunk], i: int, window: int) -> tuple[str, str]:
    before = "".join(c.text for c in chunks[max(0, i - window) : i])
    after = "".join(c.text for c in chunks[i + 1 : i + 1 + window])
    return before or "(start of trace)", after or "(end of trace)"


def activity_request(chunks: Sequence[Chunk], i: int, model_id: str, window: int = 5):
    before, after = _context(chunks, i, window)
    text = ACTIVITY_PROMPT.format(before=before, chunk=chunks[i].text, after=after)
    return user_request(model_id, text, temperature=0.0)


def motivation_request(chunks: Sequence[Chunk], i: int, model_id: str, window: int = 5):
    before, after = _context(chunks, i, window)
    text = MOTIVATION_PROMPT.format(before=before, chunk=chunks[i].text, after=after)
    return user_request(model_id, text, temperature=0.0)


_ACTIVITY_RE = re.compile(r"\b(progress|review)\b", re.IGNORECASE)
_MOTIVATION_RE = re.compile(r"\b(semi-?clear|unclear|clear)\b", re.IGNORECASE)


def parse_activity_reply(reply: str) -> Optional[str]:
    m = _ACTIVITY_RE.search(reply)
    return m.group(1).lower() if m else None


def parse_motivation_reply(reply: str) -> Optional[str]:
    m = _MOTIVATION_RE.search(reply)
    if m is None:
        return None
    return m.group(1).lower().replace("-", "")


def label_activity(
    chunks: Sequence[Chunk],
    client: ChatClient,
    model_id: str,
    context_window: int = 5,
) -> list[ChunkAnnotation]:
    """One judge call per chunk (plus up to ``context_window`` neighbors on
    each side); unparseable replies are retried once, then default to
    progress with a flag."""
    reqs = [activity_request(chunks, i, model_id, context_window) for i in range(len(chunks))]
    results = client.send_batch(reqs)
    annotations = []
    for i, res in enumerate(results):
        if not res.ok:
            raise AnnotationError(i, res.error)
        label = parse_activity_reply(res.text)
        flag = None
        if label is None:
            try:
                retry = client.send(reqs[i], sample_index=1)
            except ProviderError as exc:
                raise AnnotationError(i, str(exc)) from exc
            label = parse_activity_reply(retry)
            if label is None:
                label = "progress"
                flag = "defaulted_activity"
                logger.warning("chunk %d: unparseable activity reply, defaulted to progress", i)
        annotations.append(ChunkAnnotation(chunk_index=i, activity=label, flag=flag))
    return annotations


def label_motivation(
    chunks: Sequence[Chunk],
    annotations: list[ChunkAnnotation],
    client: ChatClient,
    model_id: str,
    context_window: int = 5,
) -> list[ChunkAnnotation]:
    """Fill in clear/semiclear/unclear for every review chunk, in place."""
    review_idx = [a.chunk_index for a in annotations if a.activity == "review"]
    reqs = [motivation_request(chunks, i, model_id, context_window) for i in review_idx]
    results = client.send_batch(reqs)
    by_index = {a.chunk_index: a for a in annotations}
    for k, (i, res) in enumerate(zip(review_idx, results)):
        if not res.ok:
            raise AnnotationError(i, res.error)
        label = parse_motivation_reply(res.text)
        if label is None:
            try:
                retry = client.send(reqs[k], sample_index=1)
            except ProviderError as exc:
                raise AnnotationError(i, str(exc)) from exc
            label = parse_motivation_reply(retry)
            if label is None:
                label = "unclear"
                by_index[i].flag = "defaulted_motivation"
                logger.warning("chunk %d: unparseable motivation reply, defaulted to unclear", i)
        by_index[i].motivation = label
    return annotations


@dataclass
class LexicalMetrics:
    length_chars: int
    review_ratio: float
    review_centroid: Optional[float]
    review_chunk_fraction: float
    switch_count_norm: float
    motivation_score: Optional[float]

    def as_dict(self) -> dict:
        return {
            "length": self.length_chars,
            "review_ratio": self.review_ratio,
            "review_centroid": self.review_centroid,
            "review_chunk_fraction": self.review_chunk_fraction,
            "switch_count_norm": self.switch_count_norm,
            "motivation_score": self.motivation_score,
        }


LEXICAL_METRIC_NAMES = (
    "length",
    "review_ratio",
    "review_centroid",
    "review_chunk_fraction",
    "switch_count_norm",
    "motivation_score",
)


def lexical_metrics(chunks: Sequence[Chunk], annotations: Sequence[ChunkAnnotation]) -> LexicalMetrics:
    """Character-level metrics over labeled chunks.

    review_ratio is the fraction of characters inside review chunks; the
    centroid is the median review-chunk midpoint normalized by trace length;
    switches count review->progress adjacencies per chunk; the motivation
    score weights review characters by clear=1.0 / semiclear=0.5 /
    unclear=0.0. Centroid and motivation are None when there is no review
    chunk. Metrics depend only on spans and labels, not chunk numbering.
    """
    if len(chunks) != len(annotations):
        raise ValueError("one annotation per chunk required")
    order = sorted(range(len(chunks)), key=lambda i: chunks[i].start)
    chunks = [chunks[i] for i in order]
    annotations = [annotations[i] for i in order]

    total = sum(len(c) for c in chunks)
    if total == 0:
        return LexicalMetrics(0, 0.0, None, 0.0, 0.0, None)

    review = [
        (c, a) for c, a in zip(chunks, annotations) if a.activity == "review"
    ]
    review_chars = sum(len(c) for c, _ in review)
    ratio = review_chars / total

    centroid = None
    if review:
        midpoints = [(c.start + c.end) / 2 for c, _ in review]
        centroid = median(midpoints) / total

    chunk_fraction = len(review) / len(chunks)

    switches = sum(
        1
        for a, b in zip(annotations, annotations[1:])
        if a.activity == "review" and b.activity == "progress"
    )
    switch_norm = switches / len(chunks)

    motivation = None
    if review:
        for c, a in review:
            if a.motivation is None:
                raise ValueError(f"review chunk {a.chunk_index} has no motivation label")
        weighted = sum(len(c) * MOTIVATION_WEIGHTS[a.motivation] for c, a in review)
        motivation = weighted / review_chars

    return LexicalMetrics(
        length_chars=total,
        review_ratio=ratio,
        review_centroid=centroid,
        review_chunk_fraction=chunk_fraction,
        switch_count_norm=switch_norm,
        motivation_score=motivation,
    )


def confusion_matrix(
    chunks: Sequence[Chunk],
    true_labels: Sequence[str],
    predicted_labels: Sequence[str],
) -> dict[tuple[str, str], float]:
    """Character-level (true, predicted) percentages over activity labels.

    Cells are percentages of total characters; each count is multiplied by
    100 before the division so exact fixture proportions survive float
    arithmetic.
    """
    if not (len(chunks) == len(true_labels) == len(predicted_labels)):
        raise ValueError("labels must align with chunks")
    total = sum(len(c) for c in chunks)
    if total == 0:
        raise ValueError("empty chunk list")
    cells = {(t, p): 0 for t in ACTIVITIES for p in ACTIVITIES}
    for c, t, p in zip(chunks, true_labels, predicted_labels):
        if t not in ACTIVITIES or p not in ACTIVITIES:
            raise ValueError(f"bad label pair ({t!r}, {p!r})")
        cells[(t, p)] += len(c)
    return {key: count * 100.0 / total for key, count in cells.items()}
