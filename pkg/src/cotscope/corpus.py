"""Data model, JSONL ingestion, and answer grading for questions and traces.

A corpus is a set of benchmark questions plus the sampled reasoning traces
generated for them. Traces carry the raw thinking span (the text between the
model's think-delimiters) and the visible final answer; grading fills in the
``correct`` flag. The grader is deliberately conservative: it normalizes
obvious surface variation (whitespace, latex wrappers, sign and leading-zero
noise, rational vs. terminating-decimal forms) and rejects anything it cannot
prove equal.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

DATASETS = ("HARP", "GPQA-Diamond", "AIME25", "other")

# Closed difficulty label sets, per dataset. ``other`` accepts anything.
DIFFICULTY_LABELS = {
    "HARP": frozenset(f"level-{i}" for i in range(1, 7)),
    "GPQA-Diamond": frozenset(
        {"undergraduate", "hard-undergraduate", "hard-graduate", "post-graduate"}
    ),
    "AIME25": frozenset(),
}

MULTIPLE_CHOICE_DATASETS = frozenset({"GPQA-Diamond"})


class CorpusError(ValueError):
    """Raised on malformed or inconsistent corpus input."""


class GradingError(ValueError):
    """Raised when a grading precondition does not hold."""


@dataclass
class Question:
    id: str
    dataset: str
    prompt: str
    gold_answer: str
    difficulty: Optional[str] = None
    choices: Optional[list[str]] = None

    def is_multiple_choice(self) -> bool:
        return self.choices is not None

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise CorpusError(f"question {self.id!r}: unknown dataset {self.dataset!r}")
        if self.dataset in MULTIPLE_CHOICE_DATASETS and not self.choices:
            raise CorpusError(f"question {self.id!r}: dataset {self.dataset} requires choices")
        if self.dataset not in MULTIPLE_CHOICE_DATASETS and self.dataset != "other" and self.choices:
            raise CorpusError(f"question {self.id!r}: dataset {self.dataset} does not take choices")
        labels = DIFFICULTY_LABELS.get(self.dataset)
        if self.difficulty is not None and labels and self.difficulty not in labels:
            raise CorpusError(
                f"question {self.id!r}: difficulty {self.difficulty!r} not in the "
                f"{self.dataset} label set"
            )


@dataclass
class Trace:
    id: str
    question_id: str
    model_id: str
    temperature: float
    cot: str
    final_answer: str
    correct: Optional[bool] = None

    def validate(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise CorpusError(f"trace {self.id!r}: temperature {self.temperature} not in [0,1]")


@dataclass
class Corpus:
    """Immutable-after-ingest container for questions and traces."""

    questions: dict[str, Question] = field(default_factory=dict)
    traces: list[Trace] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    _trace_index: dict[str, Trace] = field(default_factory=dict, repr=False)

    def trace_by_id(self, trace_id: str) -> Trace:
        return self._trace_index[trace_id]

    def traces_for(self, question_id: str) -> list[Trace]:
        return [t for t in self.traces if t.question_id == question_id]

    def trace_count(self, question_id: str, model_id: str) -> int:
        return sum(
            1 for t in self.traces if t.question_id == question_id and t.model_id == model_id
        )

    def pools(self) -> dict[tuple[str, str], list[Trace]]:
        """Traces grouped by (question_id, model_id), in ingest order."""
        out: dict[tuple[str, str], list[Trace]] = {}
        for t in self.traces:
            out.setdefault((t.question_id, t.model_id), []).append(t)
        return out

    def model_ids(self) -> list[str]:
        return sorted({t.model_id for t in self.traces})


@dataclass
class IngestReport:
    path: str
    kind: str
    n_added: int
    n_duplicates: int  # identical records re-ingested, skipped


def _question_from_record(rec: dict, lineno: int) -> Question:
    try:
        q = Question(
            id=str(rec["id"]),
            dataset=str(rec["dataset"]),
            prompt=str(rec["prompt"]),
            gold_answer=str(rec["gold_answer"]),
            difficulty=rec.get("difficulty"),
            choices=list(rec["choices"]) if rec.get("choices") is not None else None,
        )
    except KeyError as exc:
        raise CorpusError(f"line {lineno}: question record missing field {exc}") from None
    try:
        q.validate()
    except CorpusError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None
    return q


def _trace_from_record(rec: dict, lineno: int) -> Trace:
    try:
        t = Trace(
            id=str(rec["id"]),
            question_id=str(rec["question_id"]),
            model_id=str(rec["model_id"]),
            temperature=float(rec["temperature"]),
            cot=str(rec["cot"]),
            final_answer=str(rec["final_answer"]),
        )
    except KeyError as exc:
        raise CorpusError(f"line {lineno}: trace record missing field {exc}") from None
    try:
        t.validate()
    except CorpusError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None
    return t


def ingest_jsonl(corpus: Corpus, path: str | Path, kind: str) -> IngestReport:
    """Ingest one JSONL file of ``questions`` or ``traces`` into the corpus.

    Re-ingesting a byte-identical record is a no-op (idempotence); a record
    that reuses an existing id with different content is a duplicate-id error.
    Every failure message carries the 1-based line number.
    """
    if kind not in ("questions", "traces"):
        raise ValueError(f"kind must be 'questions' or 'traces', got {kind!r}")
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no such file: {path}")

    n_added = 0
    n_dup = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")

            if kind == "questions":
                q = _question_from_record(rec, lineno)
                existing = corpus.questions.get(q.id)
                if existing is not None:
                    if existing == q:
                        n_dup += 1
                        continue
                    raise CorpusError(f"line {lineno}: duplicate question id {q.id!r}")
                corpus.questions[q.id] = q
            else:
                t = _trace_from_record(rec, lineno)
                if t.question_id not in corpus.questions:
                    raise CorpusError(
                        f"line {lineno}: trace {t.id!r} references unknown question "
                        f"{t.question_id!r}"
                    )
                existing_t = corpus._trace_index.get(t.id)
                if existing_t is not None:
                    if (
                        existing_t.question_id == t.question_id
                        and existing_t.model_id == t.model_id
                        and existing_t.temperature == t.temperature
                        and existing_t.cot == t.cot
                        and existing_t.final_answer == t.final_answer
                    ):
                        n_dup += 1
                        continue
                    raise CorpusError(f"line {lineno}: duplicate trace id {t.id!r}")
                corpus.traces.append(t)
                corpus._trace_index[t.id] = t
            n_added += 1
    return IngestReport(path=str(path), kind=kind, n_added=n_added, n_duplicates=n_dup)


def char_length(trace: Trace) -> int:
    """CoT length in Unicode scalar values (Python string length)."""
    return len(trace.cot)


# ---------------------------------------------------------------------------
# Answer grading
# ---------------------------------------------------------------------------

@dataclass
class GradeResult:
    correct: bool
    unparsed: bool = False
    extracted: Optional[str] = None

    def __bool__(self) -> bool:
        return self.correct


def extract_boxed(text: str) -> Optional[str]:
    """Return the content of the last ``\\boxed{...}`` in *text*, or None.

    Handles nested braces; a brace-less ``\\boxed 42`` form takes the next
    whitespace-delimited token.
    """
    last = None
    for m in re.finditer(r"\\boxed\s*", text):
        i = m.end()
        if i < len(text) and text[i] == "{":
            depth = 0
            j = i
            while j < len(text):
                c = text[j]
                if c == "\\" and j + 1 < len(text):
                    j += 2
                    continue
                if c == "{":
                    depth += 1
                elif c == "}":
                    depth -= 1
                    if depth == 0:
                        last = text[i + 1 : j]
                        break
                j += 1
        else:
            token = re.match(r"[^\s$}]+", text[i:])
            if token:
                last = token.group(0)
    return last


_LATEX_TEXT_CMDS = re.compile(r"\\(?:text|textbf|textit|mathrm|mathbf|operatorname)\s*\{([^{}]*)\}")
_LATEX_SPACING = re.compile(r"\\[,;:!]|\\ |~")
_FRAC = re.compile(r"\\[dt]?frac\s*\{")


def _replace_fracs(s: str) -> str:
    """Rewrite every ``\\frac{a}{b}`` as ``(a)/(b)``, innermost first."""
    while True:
        m = _FRAC.search(s)
        if m is None:
            return s
        # Match the two brace groups by depth counting.
        parts = []
        i = m.end() - 1
        for _ in range(2):
            if i >= len(s) or s[i] != "{":
                return s  # malformed, leave as-is
            depth = 0
            j = i
            while j < len(s):
                if s[j] == "{":
                    depth += 1
                elif s[j] == "}":
                    depth -= 1
                    if depth == 0:
                        break
                j += 1
            if depth != 0:
                return s
            parts.append(s[i + 1 : j])
            i = j + 1
            while i < len(s) and s[i].isspace():
                i += 1
        num, den = parts
        s = s[: m.start()] + f"({num})/({den})" + s[i:]


def _as_fraction(s: str) -> Optional[Fraction]:
    """Parse an integer, terminating decimal, or a/b ratio. None otherwise."""
    s = s.strip()
    if not s:
        return None
    # Strip one layer of redundant parentheses around the whole token.
    while len(s) >= 2 and s[0] == "(" and s[-1] == ")":
        depth = 0
        balanced = True
        for i, c in enumerate(s):
            if c == "(":
                depth += 1
            elif c == ")":
                depth -= 1
                if depth == 0 and i < len(s) - 1:
                    balanced = False
                    break
        if not balanced:
            break
        s = s[1:-1].strip()
    # Split only at a single top-level slash; anything else (nested or
    # chained ratios) is ambiguous and falls back to literal comparison.
    slashes = []
    depth = 0
    for i, c in enumerate(s):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        elif c == "/" and depth == 0:
            slashes.append(i)
    if len(slashes) == 1:
        num, den = s[: slashes[0]], s[slashes[0] + 1 :]
        a = _as_fraction(num)
        b = _as_fraction(den)
        if a is None or b is None or b == 0:
            return None
        return a / b
    if slashes:
        return None
    # Thousands separators: digits grouped by commas.
    if re.fullmatch(r"[+-]?\d{1,3}(,\d{3})+(\.\d+)?", s):
        s = s.replace(",", "")
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def normalize_math_answer(text: str) -> str:
    """Canonicalize a free-form math answer for string comparison.

    Strips dollar/``\\left``/``\\right`` wrappers and latex text commands,
    rewrites ``\\frac`` to a ratio, removes all whitespace, drops trailing
    sentence punctuation, and maps any integer/terminating-decimal/ratio
    form to a canonical ``Fraction`` rendering. Anything beyond that is
    compared literally, so symbolically-equal-but-differently-written
    answers grade as unequal (soundness over completeness).
    """
    s = text.strip()
    s = s.replace("$", "")
    s = re.sub(r"\\left|\\right", "", s)
    s = _LATEX_SPACING.sub(" ", s)
    prev = None
    while prev != s:
        prev = s
        s = _LATEX_TEXT_CMDS.sub(r"\1", s)
    s = _replace_fracs(s)
    s = re.sub(r"\s+", "", s)
    s = s.rstrip(".,;")
    while len(s) >= 2 and s[0] == "{" and s[-1] == "}":
        s = s[1:-1]
    frac = _as_fraction(s)
    if frac is not None:
        return str(frac)
    return s


def grade_math(trace: Trace, question: Question) -> GradeResult:
    """Grade a free-form math trace against the gold answer.

    The last boxed expression in ``final_answer`` wins; if there is none the
    last boxed expression in the CoT is used. No parseable expression at all
    grades incorrect with the ``unparsed`` flag set.
    """
    extracted = extract_boxed(trace.final_answer)
    if extracted is None:
        extracted = extract_boxed(trace.cot)
    if extracted is None:
        trace.correct = False
        return GradeResult(correct=False, unparsed=True)
    ok = normalize_math_answer(extracted) == normalize_math_answer(question.gold_answer)
    trace.correct = ok
    return GradeResult(correct=ok, extracted=extracted)


_MC_TEMPLATES = (
    r"correct\s+answer\s+is\s*:?\s*\(\s*([A-J])\s*\)",
    r"correct\s+answer\s+is\s*:?\s*\**\s*([A-J])(?![A-Za-z])",
    r"answer\s+is\s*:?\s*\(\s*([A-J])\s*\)",
)


def _gold_letter(question: Question) -> str:
    g = question.gold_answer.strip().strip("().*# ").upper()
    if len(g) != 1 or not "A" <= g <= "J":
        raise GradingError(
            f"question {question.id!r}: gold answer {question.gold_answer!r} is not an option letter"
        )
    return g


def _valid_letters(question: Question) -> frozenset[str]:
    n = len(question.choices) if question.choices else 10
    return frozenset(chr(ord("A") + i) for i in range(min(n, 10)))


def grade_multiple_choice(trace: Trace, question: Question) -> GradeResult:
    """Grade a multiple-choice trace by extracting the chosen option letter.

    Templates are tried in a fixed order, most explicit first; within a
    template the last occurrence in the reply wins. The terminal fallback is
    a standalone option letter on the last non-empty line.
    """
    gold = _gold_letter(question)
    valid = _valid_letters(question)
    text = trace.final_answer

    extracted = None
    for pattern in _MC_TEMPLATES:
        hits = [m.group(1).upper() for m in re.finditer(pattern, text, re.IGNORECASE)]
        hits = [h for h in hits if h in valid]
        if hits:
            extracted = hits[-1]
            break
    if extracted is None:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if lines:
            standalone = [
                m.group(1).upper()
                for m in re.finditer(r"(?<![A-Za-z])\(?([A-J])\)?(?![A-Za-z])", lines[-1])
            ]
            standalone = [h for h in standalone if h in valid]
            if standalone:
                extracted = standalone[-1]

    if extracted is None:
        trace.correct = False
        return GradeResult(correct=False, unparsed=True)
    ok = extracted == gold
    trace.correct = ok
    return GradeResult(correct=ok, extracted=extracted)


def grade_trace(trace: Trace, question: Question) -> GradeResult:
    if question.is_multiple_choice():
        return grade_multiple_choice(trace, question)
    return grade_math(trace, question)


def grade_corpus(corpus: Corpus) -> dict:
    """Grade every trace in place; record unparsed trace ids in provenance."""
    unparsed = []
    n_correct = 0
    for t in corpus.traces:
        q = corpus.questions[t.question_id]
        res = grade_trace(t, q)
        if res.unparsed:
            unparsed.append(t.id)
        if res.correct:
            n_correct += 1
    corpus.provenance["unparsed_trace_ids"] = sorted(unparsed)
    return {
        "graded": len(corpus.traces),
        "correct": n_correct,
        "unparsed": len(unparsed),
    }


# ---------------------------------------------------------------------------
# Corpus (de)serialization for pipeline artifacts
# ---------------------------------------------------------------------------

def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "questions": [
            {
                "id": q.id,
                "dataset": q.dataset,
                "difficulty": q.difficulty,
                "prompt": q.prompt,
                "gold_answer": q.gold_answer,
                "choices": q.choices,
            }
            for q in corpus.questions.values()
        ],
        "traces": [
            {
                "id": t.id,
                "question_id": t.question_id,
                "model_id": t.model_id,
                "temperature": t.temperature,
                "cot": t.cot,
                "final_answer": t.final_answer,
                "correct": t.correct,
            }
            for t in corpus.traces
        ],
        "provenance": corpus.provenance,
    }


def corpus_from_dict(data: dict) -> Corpus:
    corpus = Corpus(provenance=dict(data.get("provenance", {})))
    for rec in data["questions"]:
        q = Question(
            id=rec["id"],
            dataset=rec["dataset"],
            prompt=rec["prompt"],
            gold_answer=rec["gold_answer"],
            difficulty=rec.get("difficulty"),
            choices=rec.get("choices"),
        )
        q.validate()
        corpus.questions[q.id] = q
    for rec in data["traces"]:
        t = Trace(
            id=rec["id"],
            question_id=rec["question_id"],
            model_id=rec["model_id"],
            temperature=rec["temperature"],
            cot=rec["cot"],
            final_answer=rec["final_answer"],
            correct=rec.get("correct"),
        )
        if t.question_id not in corpus.questions:
            raise CorpusError(f"trace {t.id!r} references unknown question {t.question_id!r}")
        corpus.traces.append(t)
        corpus._trace_index[t.id] = t
    return corpus


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(corpus_to_dict(corpus), fh, ensure_ascii=False, sort_keys=True, indent=1)
        fh.write("\n")


def load_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return corpus_from_dict(json.load(fh))
