"""Causal probes over scored traces.

Three instruments: (1) test-time selection, ranking a fixed candidate pool
by a metric and taking the top-1, with bootstrap resampling for
uncertainty; (2) failed-branch editing, cutting an aligned branch out of a
CoT and measuring accuracy over fresh continuations of the edited prefix;
(3) the truncation probe, eliciting answers at successive prefix
truncations to trace answer entropy and compute progressiveness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import Question, Trace, grade_trace
from .extractor import ExtractionResult, NodeSpan
from .llm_client import ChatClient, user_request

DEFAULT_SELECTORS = ("fsf", "length", "review_ratio", "random")
DEFAULT_DIRECTIONS = {"fsf": "lower", "length": "lower", "review_ratio": "lower"}
DEFAULT_BOOTSTRAP_REPLICATES = 200
DEFAULT_POOL_SIZE = 64
DEFAULT_CONTINUATIONS = 8
CONTINUATION_TEMPERATURE = 0.6
DEFAULT_CONTINUATION_TEMPLATE = "{prompt}\n\n<think>\n{partial_cot}"

ENTROPY_ELICITOR = "I have thought long enough. Now let me conclude: the final answer is"
DEFAULT_TRUNCATION_FRACTIONS = (0.0, 0.25, 0.5, 0.75)

SUMMARY_PROMPT = (
    "Summarize the following abandoned reasoning attempt in 2-3 sentences, "
    "stating what was tried and why it failed.\n\n{branch_text}"
)


class InterventionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    trace_id: str
    correct: bool
    metrics: Mapping[str, Optional[float]]


def rank_select(
    candidates: Sequence[Candidate],
    selector: str,
    direction: str = "lower",
    rng: Optional[np.random.Generator] = None,
) -> Candidate:
    """Pick the extremal candidate under the selector and direction.

    Ties break on the smallest trace id; candidates whose metric is
    undefined rank last and can never win while any defined one exists.
    ``random`` draws uniformly from the given rng.
    """
    if not candidates:
        raise InterventionError("empty candidate list")
    if selector == "random":
        if rng is None:
            raise InterventionError("random selection needs a seeded generator")
        return candidates[int(rng.integers(len(candidates)))]
    if direction not in ("lower", "higher"):
        raise ValueError(f"direction must be 'lower' or 'higher', got {direction!r}")
    defined = [c for c in candidates if c.metrics.get(selector) is not None]
    if not defined:
        raise InterventionError(f"metric {selector!r} undefined for every candidate")
    sign = 1.0 if direction == "lower" else -1.0
    return min(defined, key=lambda c: (sign * float(c.metrics[selector]), c.trace_id))


@dataclass
class SelectionEntry:
    selector: str
    direction: str
    pass1_mean: float
    pass1_sd: float
    replicates: int
    seed: int
    pool_size: int  # configured candidate-pool cap
    n_problems: int


def bootstrap_pass1(
    pools: Mapping[str, Sequence[Candidate]],
    selector: str,
    direction: str = "lower",
    B: int = DEFAULT_BOOTSTRAP_REPLICATES,
    seed: int = 0,
    pool_cap: int = DEFAULT_POOL_SIZE,
) -> SelectionEntry:
    """Bootstrap pass@1 for one selector over per-problem candidate pools.

    Each replicate resamples every pool with replacement, ranks the
    resample, and records whether the top-1 is correct; replicate accuracy
    averages over problems, and the entry reports the mean and standard
    deviation across replicates. Randomness is owned by per-problem
    generators derived from (seed, problem index), so results are
    deterministic and independent of evaluation order.
    """
    if B < 1:
        raise InterventionError("need at least one bootstrap replicate")
    problems = sorted(pools)
    if not problems:
        raise InterventionError("no candidate pools")
    acc = np.zeros(B)
    for pidx, problem in enumerate(problems):
        pool = sorted(pools[problem], key=lambda c: c.trace_id)
        if not pool:
            raise InterventionError(f"problem {problem!r} has an empty pool")
        if pool_cap and len(pool) > pool_cap:
            pool = pool[:pool_cap]
        m = len(pool)
        if selector != "random":
            defined = [c.metrics.get(selector) is not None for c in pool]
            if not any(defined):
                raise InterventionError(
                    f"problem {problem!r}: metric {selector!r} undefined for every candidate"
                )
            may_draw_blank = not all(defined)
        else:
            may_draw_blank = False
        rng = np.random.default_rng([seed, pidx])
        draws = rng.integers(0, m, size=(B, m))
        for b in range(B):
            resample = [pool[i] for i in draws[b]]
            if may_draw_blank and not any(
                c.metrics.get(selector) is not None for c in resample
            ):
                # Every drawn candidate is unscored: undefined ranks last,
                # so fall back to the deterministic id tie-break.
                chosen = min(resample, key=lambda c: c.trace_id)
            else:
                chosen = rank_select(resample, selector, direction, rng=rng)
            acc[b] += 1.0 if chosen.correct else 0.0
    acc /= len(problems)
    sd = float(acc.std(ddof=1)) if B > 1 else 0.0
    return SelectionEntry(
        selector=selector,
        direction=direction,
        pass1_mean=float(acc.mean()),
        pass1_sd=sd,
        replicates=B,
        seed=seed,
        pool_size=pool_cap,
        n_problems=len(problems),
    )


def exact_pass1_expectation(
    pool: Sequence[Candidate], selector: str, direction: str = "lower"
) -> float:
    """Exact resampling expectation by enumerating all index tuples.

    Only feasible for tiny pools (m**m outcomes); used to validate the
    bootstrap against the true resampling distribution.
    """
    import itertools

    m = len(pool)
    total = 0
    correct = 0
    for combo in itertools.product(range(m), repeat=m):
        resample = [pool[i] for i in combo]
        chosen = rank_select(resample, selector, direction)
        total += 1
        correct += 1 if chosen.correct else 0
    return correct / total


# ---------------------------------------------------------------------------
# Failed-branch editing
# ---------------------------------------------------------------------------

VARIANTS = ("original", "reduced", "reduced_with_summary")
BRANCH_CHOICES = ("first", "last")


@dataclass
class EditPlan:
    trace_id: str
    branch_choice: str
    variant: str
    cut_span: tuple[int, int]
    partial_cot: str
    summary_text: Optional[str] = None
    failed_node_id: Optional[str] = None
    branch_start_node_id: Optional[str] = None


def make_summarizer(client: ChatClient, model_id: str) -> Callable[[str], str]:
    def summarize(branch_text: str) -> str:
        req = user_request(model_id, SUMMARY_PROMPT.format(branch_text=branch_text),
                           temperature=0.0)
        return client.send(req).strip()

    return summarize


def plan_edit(
    trace: Trace,
    extraction: ExtractionResult,
    spans: Sequence[NodeSpan],
    branch_choice: str,
    variant: str,
    summarizer: Optional[Callable[[str], str]] = None,
) -> EditPlan:
    """Build the edited prefix for one failed branch of a trace.

    A branch spans from the end of the branch-start node's aligned span
    (i.e. the start of the first step after it) through the end of the
    failed node's span. ``original`` keeps the branch and truncates right
    after it; ``reduced`` cuts the branch too; ``reduced_with_summary``
    appends a generated summary of the removed branch. Branches whose
    nodes are unaligned are not usable; first/last order branches by the
    start offset of the failed node's span.
    """
    if branch_choice not in BRANCH_CHOICES:
        raise ValueError(f"branch_choice must be one of {BRANCH_CHOICES}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    by_id = {s.node_id: s for s in spans}
    eligible = []
    for br in extraction.branches:
        start_span = by_id.get(br.branch_start_node_id)
        failed_span = by_id.get(br.failed_node_id)
        if start_span is None or failed_span is None:
            continue
        cut = (start_span.end, failed_span.end)
        if cut[0] >= cut[1]:
            continue  # empty branch span
        eligible.append((failed_span.start, cut, br))
    if not eligible:
        raise InterventionError(
            f"trace {trace.id!r}: no branch with both endpoints aligned"
        )
    eligible.sort(key=lambda item: item[0])
    _, cut_span, branch = eligible[0] if branch_choice == "first" else eligible[-1]
    cut_start, cut_end = cut_span

    summary_text = None
    if variant == "original":
        partial = trace.cot[:cut_end]
    elif variant == "reduced":
        partial = trace.cot[:cut_start]
    else:
        if summarizer is None:
            raise InterventionError("reduced_with_summary needs a summarizer")
        summary_text = summarizer(trace.cot[cut_start:cut_end])
        partial = trace.cot[:cut_start] + "\n" + summary_text

    return EditPlan(
        trace_id=trace.id,
        branch_choice=branch_choice,
        variant=variant,
        cut_span=cut_span,
        partial_cot=partial,
        summary_text=summary_text,
        failed_node_id=branch.failed_node_id,
        branch_start_node_id=branch.branch_start_node_id,
    )


@dataclass
class ContinuationOutcome:
    accuracy: float  # fraction of graded continuations that were correct
    n_correct: int
    n_graded: int
    n_failed: int  # transport failures, reported but excluded from grading
    answers: list = field(default_factory=list)


def continuation_request(
    plan: EditPlan,
    question: Question,
    model_id: str,
    template: str = DEFAULT_CONTINUATION_TEMPLATE,
    temperature: float = CONTINUATION_TEMPERATURE,
):
    text = template.format(prompt=question.prompt, partial_cot=plan.partial_cot)
    return user_request(model_id, text, temperature=temperature)


def continuation_accuracy(
    plan: EditPlan,
    question: Question,
    client: ChatClient,
    model_id: str,
    k: int = DEFAULT_CONTINUATIONS,
    template: str = DEFAULT_CONTINUATION_TEMPLATE,
    temperature: float = CONTINUATION_TEMPERATURE,
) -> ContinuationOutcome:
    """Sample k continuations of the edited prefix and grade each one.

    Sample indices keep the k cache keys distinct, so replay runs are
    exact. Transport failures are counted and excluded from the accuracy
    denominator, never silently dropped.
    """
    if k <= 0:
        raise InterventionError("k must be positive")
    req = continuation_request(plan, question, model_id, template, temperature)
    results = client.send_batch([req] * k, sample_indices=list(range(k)))
    n_correct = 0
    n_graded = 0
    n_failed = 0
    answers = []
    for res in results:
        if not res.ok:
            n_failed += 1
            continue
        probe = Trace(
            id=f"{plan.trace_id}-cont",
            question_id=question.id,
            model_id=model_id,
            temperature=temperature,
            cot=res.text,
            final_answer=res.text,
        )
        grade = grade_trace(probe, question)
        n_graded += 1
        n_correct += 1 if grade.correct else 0
        answers.append(grade.extracted)
    if n_graded == 0:
        raise InterventionError(f"plan {plan.trace_id!r}: every continuation failed")
    return ContinuationOutcome(
        accuracy=n_correct / n_graded,
        n_correct=n_correct,
        n_graded=n_graded,
        n_failed=n_failed,
        answers=answers,
    )


# ---------------------------------------------------------------------------
# Truncation entropy and progressiveness
# ---------------------------------------------------------------------------

@dataclass
class EntropyProfile:
    trace_id: str
    truncation_fractions: tuple[float, ...]
    entropies: list[float]  # nats, one per fraction
    progressiveness: Optional[float]
    answer_counts: list[dict]


def empirical_entropy(counts: Sequence[int]) -> float:
    """Entropy in nats of an empirical distribution given bucket counts."""
    k = sum(counts)
    if k <= 0:
        raise ValueError("no samples")
    total = math.fsum(
        -(c / k) * math.log(c / k) for c in counts if c > 0
    )
    return total + 0.0  # normalize -0.0


def canonical_elicited_answer(reply: str) -> str:
    """Map an elicited answer to its grading-canonical bucket label."""
    from .corpus import extract_boxed, normalize_math_answer

    boxed = extract_boxed(reply)
    source = boxed if boxed is not None else reply.strip().split("\n", 1)[0]
    canon = normalize_math_answer(source)
    return canon if canon else "<unparsed>"


def truncation_request(
    trace: Trace,
    question: Question,
    fraction: float,
    model_id: str,
    template: str = DEFAULT_CONTINUATION_TEMPLATE,
    temperature: float = CONTINUATION_TEMPERATURE,
):
    keep = int(len(trace.cot) * (1.0 - fraction))
    partial = trace.cot[:keep] + "\n" + ENTROPY_ELICITOR
    text = template.format(prompt=question.prompt, partial_cot=partial)
    return user_request(model_id, text, temperature=temperature)


def truncation_entropy(
    trace: Trace,
    question: Question,
    client: ChatClient,
    model_id: str,
    fractions: Sequence[float] = DEFAULT_TRUNCATION_FRACTIONS,
    k: int = DEFAULT_CONTINUATIONS,
    template: str = DEFAULT_CONTINUATION_TEMPLATE,
    temperature: float = CONTINUATION_TEMPERATURE,
) -> EntropyProfile:
    """Answer-entropy profile across prefix truncations.

    For each fraction f the first (1-f) of the CoT is kept, the conclusion
    elicitor appended, and k answers sampled; answers are bucketed by the
    grading canonicalizer (unparseable answers form their own bucket) and
    summarized as empirical entropy in nats. Progressiveness is the
    untruncated entropy minus the mean over the remaining checkpoints.
    """
    fractions = tuple(fractions)
    if not fractions or fractions[0] != 0.0:
        raise InterventionError("fractions must start at 0.0 (the untruncated profile)")
    if sorted(set(fractions)) != list(fractions):
        raise InterventionError("fractions must be strictly increasing")
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise InterventionError("fractions must lie in [0, 1)")
    if k <= 0:
        raise InterventionError("k must be positive")

    entropies = []
    answer_counts = []
    for f in fractions:
        req = truncation_request(trace, question, f, model_id, template, temperature)
        results = client.send_batch([req] * k, sample_indices=list(range(k)))
        buckets: dict[str, int] = {}
        for res in results:
            if not res.ok:
                raise InterventionError(
                    f"trace {trace.id!r}, fraction {f}: {res.error}"
                )
            label = canonical_elicited_answer(res.text)
            buckets[label] = buckets.get(label, 0) + 1
        entropies.append(empirical_entropy(list(buckets.values())))
        answer_counts.append(dict(sorted(buckets.items())))

    progressiveness = None
    if len(fractions) > 1:
        tail = entropies[1:]
        progressiveness = entropies[0] - math.fsum(tail) / len(tail)
    return EntropyProfile(
        trace_id=trace.id,
        truncation_fractions=fractions,
        entropies=entropies,
        progressiveness=progressiveness,
        answer_counts=answer_counts,
    )
