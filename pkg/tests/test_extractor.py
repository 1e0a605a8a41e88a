import pytest

from cotscope.extractor import (
    Branch,
    ExtractionFormatError,
    align_quotes,
    extract,
    extraction_request,
    ngram_jaccard,
    parse_extraction_reply,
    _validate_against_graph,
)
from cotscope.graph import parse_dot
from cotscope.llm_client import CacheEntry, ChatClient, ResponseCache, request_key

import trace_fixtures as fx


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


class TestReplyParsing:
    def test_full_fixture_reply(self):
        dot, quotes, branches = parse_extraction_reply(fx.REPLY)
        g = parse_dot(dot)
        assert len(g.nodes) == 7
        assert set(quotes) == {"problem", "s1", "f1", "s2", "f2", "s3"}
        assert branches == [
            Branch(failed_node_id="f1", branch_start_node_id="s1"),
            Branch(failed_node_id="f2", branch_start_node_id="s2"),
        ]

    def test_missing_quote_list_is_benign(self):
        reply = f"```dot\n{fx.DOT}\n```\n"
        dot, quotes, branches = parse_extraction_reply(reply)
        assert quotes == {}
        assert branches == []
        assert parse_dot(dot).problem_node == "problem"

    def test_branch_to_success_node_rejected(self):
        g = parse_dot(fx.DOT)
        bad = [Branch(failed_node_id="s2", branch_start_node_id="s1")]
        with pytest.raises(ExtractionFormatError, match="s2"):
            _validate_against_graph(g, {}, bad)

    def test_reply_naming_success_node_as_failed_rejected(self, tmp_path):
        # End to end through extract(): the branch analysis claims the
        # lightblue node s2 failed; the invariant error must name it.
        reply = fx.REPLY.replace(
            '1. f1, starts from node id "s1", fails to f1.',
            '1. s2, starts from node id "s1", fails to s2.',
        )
        req = extraction_request(fx.COT, "extractor-model")
        client = scripted_client(tmp_path, {(req, 0): reply})
        with pytest.raises(ExtractionFormatError, match="s2"):
            extract(fx.COT, client, "extractor-model")

    def test_unknown_quoted_node_rejected(self):
        g = parse_dot(fx.DOT)
        with pytest.raises(ExtractionFormatError, match="ghost"):
            _validate_against_graph(g, {"ghost": "words"}, [])


class TestExtract:
    def test_cached_fixture_reply(self, tmp_path):
        req = extraction_request(fx.COT, "extractor-model")
        client = scripted_client(tmp_path, {(req, 0): fx.REPLY})
        result = extract(fx.COT, client, "extractor-model")
        assert len(result.graph.nodes) == 7
        assert len(result.branches) == 2
        assert result.node_quotes["s1"].startswith("First I set up")

    def test_retry_with_feedback_then_success(self, tmp_path):
        req = extraction_request(fx.COT, "extractor-model")
        client = scripted_client(tmp_path, {(req, 0): "no graph here, sorry"})

        # The retry request embeds the parse error; reconstruct it the same
        # way extract() does to prime the cache.
        from cotscope.graph import GraphParseError, parse_dot as _p
        try:
            _p("no graph here, sorry")
        except GraphParseError as exc:
            error_text = str(exc)
        from cotscope.llm_client import user_request
        retry_req = user_request(
            "extractor-model",
            req.messages[0].text
            + f"\n\nYour previous reply could not be parsed ({error_text}). "
            "Re-emit the complete output in the required format.",
            temperature=0.0,
        )
        client.cache.put(
            CacheEntry(
                key=request_key(retry_req, 0),
                request=retry_req.to_dict(),
                sample_index=0,
                response_text=fx.REPLY,
                timestamp=0.0,
            )
        )
        result = extract(fx.COT, client, "extractor-model")
        assert len(result.graph.nodes) == 7

    def test_unparseable_after_retry_raises(self, tmp_path):
        req = extraction_request(fx.COT, "extractor-model")
        client = scripted_client(tmp_path, {(req, 0): "still not a graph"})
        # No retry reply in the cache: the retry itself misses, which also
        # counts as a failed extraction path (provider error).
        with pytest.raises(Exception):
            extract(fx.COT, client, "extractor-model")


class TestNgramScore:
    def test_identical_sequences(self):
        words = "one two three four five".split()
        assert ngram_jaccard(words, words) == 1.0

    def test_one_substitution_in_twenty_clears_threshold(self):
        a = [f"w{i}" for i in range(20)]
        b = list(a)
        b[10] = "SWAPPED"
        score = ngram_jaccard(a, b)
        assert score >= 0.5
        # Hand computation: 18 trigrams each, 3 broken, inter=15, union=21.
        assert score == pytest.approx(15 / 21)

    def test_disjoint_sequences(self):
        assert ngram_jaccard(list("abcdef"), list("uvwxyz")) == 0.0


class TestAlignQuotes:
    def test_verbatim_quotes_align_exactly(self):
        _, quotes, _ = parse_extraction_reply(fx.REPLY)
        spans, unaligned = align_quotes(fx.COT, quotes)
        assert unaligned == ["problem"]  # prompt text, not in the CoT
        by_id = {s.node_id: s for s in spans}
        assert by_id["s1"].start == fx.OFF_S1
        assert by_id["f1"].start == fx.OFF_F1
        assert by_id["s2"].start == fx.OFF_S2
        assert by_id["f2"].start == fx.OFF_F2
        assert by_id["s3"].start == fx.OFF_S3
        assert all(s.match_score == 1.0 for s in spans)

    def test_spans_tile_the_tail(self):
        _, quotes, _ = parse_extraction_reply(fx.REPLY)
        spans, _ = align_quotes(fx.COT, quotes)
        for a, b in zip(spans, spans[1:]):
            assert a.end == b.start
        assert spans[-1].end == len(fx.COT)

    def test_one_substituted_word_still_accepted(self):
        _, quotes, _ = parse_extraction_reply(fx.REPLY)
        words = quotes["f1"].split()
        words[7] = "answers"  # substitute one word out of twenty
        quotes["f1"] = " ".join(words)
        spans, unaligned = align_quotes(fx.COT, quotes)
        assert "f1" not in unaligned
        f1 = next(s for s in spans if s.node_id == "f1")
        assert f1.start == fx.OFF_F1
        assert 0.5 <= f1.match_score < 1.0

    def test_cross_document_quote_unaligned(self):
        quotes = {
            "alien": "completely unrelated sentence about marine biology and deep sea vents"
        }
        spans, unaligned = align_quotes(fx.COT, quotes)
        assert unaligned == ["alien"]
        assert spans == []

    def test_spans_ordered_and_nonoverlapping(self):
        _, quotes, _ = parse_extraction_reply(fx.REPLY)
        spans, _ = align_quotes(fx.COT, quotes)
        for a, b in zip(spans, spans[1:]):
            assert a.start < b.start
            assert a.end <= b.start + 1

    def test_deterministic(self):
        _, quotes, _ = parse_extraction_reply(fx.REPLY)
        assert align_quotes(fx.COT, quotes) == align_quotes(fx.COT, quotes)
