import json

import pytest
from hypothesis import given, strategies as st

from cotscope.corpus import (
    Corpus,
    CorpusError,
    Question,
    Trace,
    char_length,
    extract_boxed,
    grade_corpus,
    grade_math,
    grade_multiple_choice,
    grade_trace,
    ingest_jsonl,
    normalize_math_answer,
)


def make_question(**kw):
    base = dict(id="q1", dataset="HARP", prompt="Compute.", gold_answer="42", difficulty="level-4")
    base.update(kw)
    return Question(**base)


def make_trace(**kw):
    base = dict(
        id="t1",
        question_id="q1",
        model_id="m",
        temperature=0.6,
        cot="thinking",
        final_answer="\\boxed{42}",
    )
    base.update(kw)
    return Trace(**base)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


QUESTION_REC = {
    "id": "q1",
    "dataset": "HARP",
    "difficulty": "level-4",
    "prompt": "Compute.",
    "gold_answer": "42",
}


def trace_rec(i, question_id="q1"):
    return {
        "id": f"t{i}",
        "question_id": question_id,
        "model_id": "m",
        "temperature": 0.6,
        "cot": f"thinking {i}",
        "final_answer": "\\boxed{42}",
    }


class TestIngest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        corpus = Corpus()
        report = ingest_jsonl(corpus, path, "questions")
        assert report.n_added == 0
        assert corpus.questions == {}

    def test_one_question_sixteen_traces(self, tmp_path):
        qpath = tmp_path / "questions.jsonl"
        tpath = tmp_path / "traces.jsonl"
        write_jsonl(qpath, [QUESTION_REC])
        write_jsonl(tpath, [trace_rec(i) for i in range(16)])
        corpus = Corpus()
        ingest_jsonl(corpus, qpath, "questions")
        report = ingest_jsonl(corpus, tpath, "traces")
        assert report.n_added == 16
        assert len(corpus.traces) == 16
        assert corpus.trace_count("q1", "m") == 16

    def test_unknown_question_reports_id_and_line(self, tmp_path):
        qpath = tmp_path / "questions.jsonl"
        tpath = tmp_path / "traces.jsonl"
        write_jsonl(qpath, [QUESTION_REC])
        write_jsonl(tpath, [trace_rec(0), trace_rec(1, question_id="q99")])
        corpus = Corpus()
        ingest_jsonl(corpus, qpath, "questions")
        with pytest.raises(CorpusError) as err:
            ingest_jsonl(corpus, tpath, "traces")
        assert "q99" in str(err.value)
        assert "line 2" in str(err.value)

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(QUESTION_REC) + "\n{not json\n")
        corpus = Corpus()
        with pytest.raises(CorpusError, match="line 2"):
            ingest_jsonl(corpus, path, "questions")

    def test_reingest_is_idempotent(self, tmp_path):
        qpath = tmp_path / "questions.jsonl"
        tpath = tmp_path / "traces.jsonl"
        write_jsonl(qpath, [QUESTION_REC])
        write_jsonl(tpath, [trace_rec(i) for i in range(3)])
        corpus = Corpus()
        ingest_jsonl(corpus, qpath, "questions")
        ingest_jsonl(corpus, tpath, "traces")
        before = [t.id for t in corpus.traces]
        report = ingest_jsonl(corpus, tpath, "traces")
        assert report.n_added == 0
        assert report.n_duplicates == 3
        assert [t.id for t in corpus.traces] == before

    def test_conflicting_duplicate_id_is_an_error(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        rec = trace_rec(0)
        other = dict(rec, cot="different thinking")
        write_jsonl(path, [rec, other])
        corpus = Corpus()
        corpus.questions["q1"] = make_question()
        with pytest.raises(CorpusError, match="duplicate"):
            ingest_jsonl(corpus, path, "traces")

    def test_difficulty_label_validated(self, tmp_path):
        path = tmp_path / "questions.jsonl"
        write_jsonl(path, [dict(QUESTION_REC, difficulty="level-9")])
        with pytest.raises(CorpusError, match="level-9"):
            ingest_jsonl(Corpus(), path, "questions")


class TestCharLength:
    def test_empty(self):
        assert char_length(make_trace(cot="")) == 0

    def test_ascii(self):
        assert char_length(make_trace(cot="abc")) == 3

    def test_unicode_scalar_values(self):
        assert char_length(make_trace(cot="α=1\n")) == 4

    @given(st.text(max_size=50), st.text(max_size=50))
    def test_additive_under_concatenation(self, a, b):
        assert char_length(make_trace(cot=a + b)) == char_length(
            make_trace(cot=a)
        ) + char_length(make_trace(cot=b))


class TestBoxedExtraction:
    def test_simple(self):
        assert extract_boxed("so \\boxed{42}") == "42"

    def test_nested_braces(self):
        assert extract_boxed("\\boxed{\\frac{1}{2}}") == "\\frac{1}{2}"

    def test_last_wins(self):
        assert extract_boxed("\\boxed{1} then \\boxed{2}") == "2"

    def test_none(self):
        assert extract_boxed("no box here") is None

    def test_braceless(self):
        assert extract_boxed("\\boxed 42") == "42"


class TestMathNormalization:
    @pytest.mark.parametrize(
        "raw,canon",
        [
            ("42", "42"),
            (" 42 ", "42"),
            ("+42", "42"),
            ("042", "42"),
            ("1/2", "1/2"),
            ("0.5", "1/2"),
            ("0.50", "1/2"),
            (".5", "1/2"),
            ("2/4", "1/2"),
            ("-0", "0"),
            ("$42$", "42"),
            ("\\frac{1}{2}", "1/2"),
            ("\\dfrac{3}{6}", "1/2"),
            ("\\text{42}", "42"),
            ("1,234", "1234"),
            ("42.", "42"),
        ],
    )
    def test_canonical_forms(self, raw, canon):
        assert normalize_math_answer(raw) == canon

    def test_non_numeric_kept_literal(self):
        assert normalize_math_answer("x + 1") == "x+1"
        assert normalize_math_answer("\\pi") == "\\pi"

    def test_nested_fraction_resolves(self):
        assert normalize_math_answer("\\frac{\\frac{1}{2}}{2}") == "1/4"
        assert normalize_math_answer("(1/2)/2") == "1/4"

    def test_negative_rational_forms(self):
        assert normalize_math_answer("-1/2") == normalize_math_answer("-0.5")
        assert normalize_math_answer("\\frac{-1}{2}") == "-1/2"

    def test_chained_slashes_refused(self):
        # Ambiguous without a convention; compared literally, not resolved.
        assert normalize_math_answer("1/2/3") == "1/2/3"

    def test_wrapped_fraction(self):
        assert normalize_math_answer("\\left( \\frac{2}{4} \\right)") == "1/2"

    def test_symbolic_equivalence_rejected(self):
        # sqrt(4) == 2 mathematically, but the grader does not prove it.
        assert normalize_math_answer("\\sqrt{4}") != normalize_math_answer("2")


class TestGradeMath:
    def test_exact_match(self):
        q = make_question(gold_answer="42")
        t = make_trace(final_answer="The answer is \\boxed{42}.")
        res = grade_math(t, q)
        assert res.correct and not res.unparsed
        assert t.correct is True

    def test_rational_decimal_equivalence(self):
        q = make_question(gold_answer="0.5")
        t = make_trace(final_answer="\\boxed{ 1/2 }")
        assert grade_math(t, q).correct

    def test_unparsed_flag(self):
        q = make_question(gold_answer="7")
        t = make_trace(final_answer="I am not sure.", cot="no boxes at all")
        res = grade_math(t, q)
        assert not res.correct and res.unparsed
        assert t.correct is False

    def test_falls_back_to_cot(self):
        q = make_question(gold_answer="9")
        t = make_trace(final_answer="see above", cot="so \\boxed{9} it is")
        assert grade_math(t, q).correct

    def test_deterministic(self):
        q = make_question(gold_answer="42")
        t = make_trace(final_answer="\\boxed{41}")
        first = grade_math(t, q)
        second = grade_math(t, q)
        assert (first.correct, first.unparsed) == (second.correct, second.unparsed)


def mc_question(gold="B"):
    return Question(
        id="g1",
        dataset="GPQA-Diamond",
        prompt="Pick one.",
        gold_answer=gold,
        difficulty="hard-graduate",
        choices=["one", "two", "three", "four"],
    )


class TestGradeMultipleChoice:
    def test_primary_template(self):
        t = make_trace(question_id="g1", final_answer="The correct answer is (B)")
        assert grade_multiple_choice(t, mc_question()).correct

    def test_fallback_extracts_wrong_letter(self):
        t = make_trace(question_id="g1", final_answer="Answer: C")
        res = grade_multiple_choice(t, mc_question())
        assert res.extracted == "C"
        assert not res.correct and not res.unparsed

    def test_free_prose_unparsed(self):
        t = make_trace(question_id="g1", final_answer="It depends on the reaction.")
        res = grade_multiple_choice(t, mc_question())
        assert not res.correct and res.unparsed

    def test_bare_letter_template(self):
        t = make_trace(question_id="g1", final_answer="the correct answer is B.")
        assert grade_multiple_choice(t, mc_question()).correct

    def test_letter_outside_choice_range_ignored(self):
        t = make_trace(question_id="g1", final_answer="The correct answer is (F)")
        res = grade_multiple_choice(t, mc_question())
        assert res.unparsed  # only A-D are valid for four choices

    def test_last_occurrence_wins_within_template(self):
        t = make_trace(
            question_id="g1",
            final_answer="The correct answer is (A)... wait. The correct answer is (B).",
        )
        assert grade_multiple_choice(t, mc_question()).correct


class TestGradeCorpus:
    def test_unparsed_surfaced_in_provenance(self):
        corpus = Corpus()
        corpus.questions["q1"] = make_question()
        good = make_trace(id="t-good")
        bad = make_trace(id="t-bad", final_answer="no box", cot="none")
        corpus.traces = [good, bad]
        corpus._trace_index = {t.id: t for t in corpus.traces}
        summary = grade_corpus(corpus)
        assert summary == {"graded": 2, "correct": 1, "unparsed": 1}
        assert corpus.provenance["unparsed_trace_ids"] == ["t-bad"]
        assert all(t.correct in (True, False) for t in corpus.traces)

    def test_dispatch_by_choices(self):
        q = mc_question()
        t = make_trace(question_id="g1", final_answer="The correct answer is (B)")
        assert grade_trace(t, q).correct
