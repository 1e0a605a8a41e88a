import math

import numpy as np
import pytest

from cotscope.corpus import Question, Trace
from cotscope.extractor import align_quotes, parse_extraction_reply
from cotscope.graph import parse_dot
from cotscope.interventions import (
    Candidate,
    InterventionError,
    bootstrap_pass1,
    canonical_elicited_answer,
    continuation_accuracy,
    continuation_request,
    empirical_entropy,
    exact_pass1_expectation,
    make_summarizer,
    plan_edit,
    rank_select,
    truncation_entropy,
    truncation_request,
    DEFAULT_BOOTSTRAP_REPLICATES,
    DEFAULT_POOL_SIZE,
    ENTROPY_ELICITOR,
)
from cotscope.llm_client import CacheEntry, ChatClient, ResponseCache, request_key

import trace_fixtures as fx


def cand(tid, correct, value, metric="fsf"):
    return Candidate(trace_id=tid, correct=correct, metrics={metric: value})


def scripted_client(tmp_path, replies):
    cache = ResponseCache(tmp_path / "cache")
    for (req, idx), text in replies.items():
        cache.put(
            CacheEntry(
                key=request_key(req, idx),
                request=req.to_dict(),
                sample_index=idx,
                response_text=text,
                timestamp=0.0,
            )
        )
    return ChatClient(cache=cache, transport=None)


class TestRankSelect:
    def test_argmin(self):
        pool = [cand("a", False, 0.4), cand("b", True, 0.1), cand("c", False, 0.3)]
        assert rank_select(pool, "fsf", "lower").trace_id == "b"

    def test_direction_higher(self):
        pool = [cand("a", False, 0.4), cand("b", True, 0.1)]
        assert rank_select(pool, "fsf", "higher").trace_id == "a"

    def test_tie_breaks_on_smallest_trace_id(self):
        pool = [cand("c", False, 0.2), cand("a", True, 0.2), cand("b", False, 0.2)]
        assert rank_select(pool, "fsf", "lower").trace_id == "a"

    def test_undefined_never_wins(self):
        pool = [cand("a", True, None), cand("b", False, 0.2), cand("c", True, 0.5)]
        assert rank_select(pool, "fsf", "lower").trace_id == "b"

    def test_all_undefined_rejected(self):
        pool = [cand("a", True, None), cand("b", False, None)]
        with pytest.raises(InterventionError, match="undefined"):
            rank_select(pool, "fsf", "lower")

    def test_empty_pool_rejected(self):
        with pytest.raises(InterventionError, match="empty"):
            rank_select([], "fsf")

    def test_random_uses_rng(self):
        pool = [cand(f"t{i}", i % 2 == 0, float(i)) for i in range(8)]
        rng = np.random.default_rng(5)
        picks = {rank_select(pool, "random", rng=rng).trace_id for _ in range(64)}
        assert len(picks) > 1  # actually random across draws

    @pytest.mark.parametrize("transform", [lambda v: 2 * v + 1, lambda v: v ** 3])
    def test_invariant_under_monotone_transform(self, transform):
        rng = np.random.default_rng(11)
        for _ in range(50):
            values = rng.normal(size=6)
            pool = [cand(f"t{i}", bool(i % 2), float(v)) for i, v in enumerate(values)]
            mapped = [
                cand(f"t{i}", bool(i % 2), float(transform(v)))
                for i, v in enumerate(values)
            ]
            for direction in ("lower", "higher"):
                assert (
                    rank_select(pool, "fsf", direction).trace_id
                    == rank_select(mapped, "fsf", direction).trace_id
                )


class TestBootstrapPass1:
    def test_all_correct_pool(self):
        pools = {"p0": [cand(f"t{i}", True, float(i)) for i in range(6)]}
        entry = bootstrap_pass1(pools, "fsf", "lower", B=50, seed=1)
        assert entry.pass1_mean == 1.0
        assert entry.pass1_sd == 0.0

    def test_perfect_metric_finds_correct_when_present(self):
        # Correct candidates all have strictly lower fsf.
        pools = {
            "p0": [cand(f"c{i}", True, 0.1 + 0.001 * i) for i in range(8)]
            + [cand(f"w{i}", False, 0.5 + 0.001 * i) for i in range(8)],
        }
        entry = bootstrap_pass1(pools, "fsf", "lower", B=200, seed=3)
        assert entry.pass1_mean == 1.0  # P(no correct in resample) ~ 2^-16 per draw

    def test_random_selector_tracks_base_rate(self):
        pools = {
            "p0": [cand(f"t{i:02d}", i < 8, float(i)) for i in range(16)],
        }
        entry = bootstrap_pass1(pools, "random", B=200, seed=7)
        assert abs(entry.pass1_mean - 0.5) <= 3 * max(entry.pass1_sd, 1e-9)

    def test_deterministic_for_seed(self):
        pools = {
            "p0": [cand(f"t{i:02d}", i % 3 == 0, float(i % 5)) for i in range(12)],
            "p1": [cand(f"u{i:02d}", i % 2 == 0, float(-i)) for i in range(12)],
        }
        a = bootstrap_pass1(pools, "fsf", "lower", B=100, seed=9)
        b = bootstrap_pass1(pools, "fsf", "lower", B=100, seed=9)
        assert (a.pass1_mean, a.pass1_sd) == (b.pass1_mean, b.pass1_sd)
        c = bootstrap_pass1(pools, "fsf", "lower", B=100, seed=10)
        assert (a.pass1_mean, a.pass1_sd) != (c.pass1_mean, c.pass1_sd)

    def test_converges_to_exact_enumeration(self):
        pool = [
            cand("a", True, 0.3),
            cand("b", False, 0.1),
            cand("c", True, 0.2),
            cand("d", False, 0.4),
        ]
        exact = exact_pass1_expectation(pool, "fsf", "lower")
        entry = bootstrap_pass1({"p": pool}, "fsf", "lower", B=20000, seed=2)
        se = entry.pass1_sd / math.sqrt(entry.replicates)
        assert abs(entry.pass1_mean - exact) < max(5 * se, 0.01)

    def test_defaults_match_contract(self):
        assert DEFAULT_BOOTSTRAP_REPLICATES == 200
        assert DEFAULT_POOL_SIZE == 64

    def test_pool_cap_applies(self):
        pools = {"p": [cand(f"t{i:03d}", i == 0, float(i)) for i in range(100)]}
        entry = bootstrap_pass1(pools, "fsf", "lower", B=10, seed=0, pool_cap=64)
        assert entry.pool_size == 64

    def test_partially_undefined_pool_survives(self):
        # Resamples sometimes draw only unscored candidates; the id
        # tie-break takes over instead of crashing.
        pools = {"p": [cand("a", True, None), cand("b", False, 0.2)]}
        entry = bootstrap_pass1(pools, "fsf", "lower", B=400, seed=4)
        # 'b' wins whenever drawn (~3/4 of replicates); 'a' via fallback.
        assert 0.0 < entry.pass1_mean < 0.6

    def test_fully_undefined_pool_rejected(self):
        pools = {"p": [cand("a", True, None), cand("b", False, None)]}
        with pytest.raises(InterventionError, match="undefined"):
            bootstrap_pass1(pools, "fsf", "lower", B=10, seed=0)


def fixture_extraction():
    _, quotes, _ = parse_extraction_reply(fx.REPLY)
    from cotscope.extractor import ExtractionResult

    g = parse_dot(fx.DOT)
    _, parsed_quotes, branches = parse_extraction_reply(fx.REPLY)
    result = ExtractionResult(
        dot=fx.DOT, node_quotes=parsed_quotes, branches=branches, raw_reply=fx.REPLY, graph=g
    )
    spans, _ = align_quotes(fx.COT, parsed_quotes)
    return result, spans


def fixture_trace():
    return Trace(
        id="edit-t0",
        question_id="q-edit",
        model_id="m",
        temperature=1.0,
        cot=fx.COT,
        final_answer="\\boxed{13}",
    )


def fixture_question():
    return Question(
        id="q-edit", dataset="other", prompt="Find the value.", gold_answer="12"
    )


class TestPlanEdit:
    def test_reduced_first_is_exact_prefix(self):
        extraction, spans = fixture_extraction()
        plan = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        assert plan.partial_cot == fx.COT[: fx.OFF_F1]
        assert plan.cut_span == (fx.OFF_F1, fx.OFF_S2)

    def test_original_contains_reduced(self):
        extraction, spans = fixture_extraction()
        reduced = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        original = plan_edit(fixture_trace(), extraction, spans, "first", "original")
        assert original.partial_cot == fx.COT[: fx.OFF_S2]
        assert original.partial_cot.startswith(reduced.partial_cot)
        assert len(original.partial_cot) > len(reduced.partial_cot)

    def test_last_branch(self):
        extraction, spans = fixture_extraction()
        plan = plan_edit(fixture_trace(), extraction, spans, "last", "reduced")
        assert plan.cut_span == (fx.OFF_F2, fx.OFF_S3)
        assert plan.partial_cot == fx.COT[: fx.OFF_F2]
        assert plan.failed_node_id == "f2"

    def test_single_branch_first_equals_last(self):
        extraction, spans = fixture_extraction()
        extraction.branches = extraction.branches[:1]
        first = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        last = plan_edit(fixture_trace(), extraction, spans, "last", "reduced")
        assert first.cut_span == last.cut_span
        assert first.partial_cot == last.partial_cot
        assert first.failed_node_id == last.failed_node_id

    def test_summary_variant(self, tmp_path):
        extraction, spans = fixture_extraction()
        from cotscope.llm_client import user_request
        from cotscope.interventions import SUMMARY_PROMPT

        branch_text = fx.COT[fx.OFF_F1 : fx.OFF_S2]
        req = user_request("judge", SUMMARY_PROMPT.format(branch_text=branch_text))
        client = scripted_client(tmp_path, {(req, 0): "Tried factoring; roots were not integers."})
        plan = plan_edit(
            fixture_trace(), extraction, spans, "first", "reduced_with_summary",
            summarizer=make_summarizer(client, "judge"),
        )
        assert plan.partial_cot == (
            fx.COT[: fx.OFF_F1] + "\nTried factoring; roots were not integers."
        )
        assert plan.summary_text == "Tried factoring; roots were not integers."

    def test_no_aligned_branch_excluded(self):
        extraction, spans = fixture_extraction()
        spans = [s for s in spans if s.node_id not in ("f1", "f2")]
        with pytest.raises(InterventionError, match="aligned"):
            plan_edit(fixture_trace(), extraction, spans, "first", "reduced")

    def test_all_variant_prefixes_byte_exact(self):
        extraction, spans = fixture_extraction()
        trace = fixture_trace()
        expected = {
            ("first", "original"): fx.COT[: fx.OFF_S2],
            ("first", "reduced"): fx.COT[: fx.OFF_F1],
            ("last", "original"): fx.COT[: fx.OFF_S3],
            ("last", "reduced"): fx.COT[: fx.OFF_F2],
        }
        for (choice, variant), want in expected.items():
            plan = plan_edit(trace, extraction, spans, choice, variant)
            assert plan.partial_cot == want, (choice, variant)


class TestContinuationAccuracy:
    def prime_continuations(self, tmp_path, plan, question, answers):
        req = continuation_request(plan, question, "cont-model")
        replies = {
            (req, i): f"continuing the thought...</think>\nThe value is \\boxed{{{a}}}."
            for i, a in enumerate(answers)
        }
        return scripted_client(tmp_path, replies)

    def test_fixture_fraction(self, tmp_path):
        extraction, spans = fixture_extraction()
        plan = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        q = fixture_question()
        answers = ["12", "11", "12", "10", "12", "7", "9", "8"]  # 3 of 8 correct
        client = self.prime_continuations(tmp_path, plan, q, answers)
        out = continuation_accuracy(plan, q, client, "cont-model", k=8)
        assert out.accuracy == 0.375
        assert out.n_graded == 8
        assert out.n_failed == 0

    def test_k_zero_rejected(self, tmp_path):
        extraction, spans = fixture_extraction()
        plan = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        client = scripted_client(tmp_path, {})
        with pytest.raises(InterventionError, match="positive"):
            continuation_accuracy(plan, fixture_question(), client, "cont-model", k=0)

    def test_replay_deterministic(self, tmp_path):
        extraction, spans = fixture_extraction()
        plan = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        q = fixture_question()
        client = self.prime_continuations(tmp_path, plan, q, ["12"] * 4 + ["9"] * 4)
        a = continuation_accuracy(plan, q, client, "cont-model", k=8)
        b = continuation_accuracy(plan, q, client, "cont-model", k=8)
        assert a == b

    def test_distinct_sample_indices_distinct_cache_keys(self):
        extraction, spans = fixture_extraction()
        plan = plan_edit(fixture_trace(), extraction, spans, "first", "reduced")
        req = continuation_request(plan, fixture_question(), "cont-model")
        assert request_key(req, 0) != request_key(req, 7)


class TestEntropy:
    def test_empirical_entropy_exact_values(self):
        assert empirical_entropy([8]) == 0.0
        assert empirical_entropy([1] * 8) == math.log(8)
        assert empirical_entropy([4, 4]) == math.log(2)

    def test_entropy_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(1, 9))
            counts = rng.multinomial(k, np.ones(4) / 4)
            counts = [int(c) for c in counts if c > 0]
            h = empirical_entropy(counts)
            assert 0.0 <= h <= math.log(sum(counts)) + 1e-12

    def test_canonical_answer_buckets(self):
        assert canonical_elicited_answer(" \\boxed{0.5} ") == "1/2"
        assert canonical_elicited_answer("12.") == "12"
        assert canonical_elicited_answer("") == "<unparsed>"

    def prime_entropy(self, tmp_path, trace, question, per_fraction_answers):
        replies = {}
        for f, answers in per_fraction_answers.items():
            req = truncation_request(trace, question, f, "cont-model")
            for i, a in enumerate(answers):
                replies[(req, i)] = a
        return scripted_client(tmp_path, replies)

    def test_profile_and_progressiveness(self, tmp_path):
        trace = fixture_trace()
        q = fixture_question()
        per_fraction = {
            0.0: ["12"] * 8,                       # point mass -> 0
            0.25: ["12"] * 4 + ["7"] * 4,          # 4/4 split -> ln 2
            0.5: [str(i) for i in range(8)],       # uniform -> ln 8
            0.75: ["12"] * 4 + ["7"] * 4,          # ln 2
        }
        client = self.prime_entropy(tmp_path, trace, q, per_fraction)
        profile = truncation_entropy(trace, q, client, "cont-model")
        assert profile.entropies[0] == 0.0
        assert profile.entropies[1] == math.log(2)
        assert profile.entropies[2] == math.log(8)
        assert profile.entropies[3] == math.log(2)
        want = 0.0 - math.fsum([math.log(2), math.log(8), math.log(2)]) / 3
        assert profile.progressiveness == want
        assert profile.progressiveness <= profile.entropies[0]

    def test_elicitor_text_in_request(self):
        req = truncation_request(fixture_trace(), fixture_question(), 0.25, "m")
        assert ENTROPY_ELICITOR in req.messages[0].text

    def test_truncation_keeps_prefix(self):
        trace = fixture_trace()
        req = truncation_request(trace, fixture_question(), 0.75, "m")
        kept = trace.cot[: int(len(trace.cot) * 0.25)]
        assert kept in req.messages[0].text

    def test_fractions_must_start_at_zero(self, tmp_path):
        client = scripted_client(tmp_path, {})
        with pytest.raises(InterventionError, match="start at 0"):
            truncation_entropy(
                fixture_trace(), fixture_question(), client, "m", fractions=(0.25, 0.5)
            )
