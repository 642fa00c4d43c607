"""Tagged-response parser: block extraction, violations, totality."""

import numpy as np

from microvlm.grammar import (
    extract_conclusion,
    parse,
    reflection_stats,
)
from microvlm.vocab import TAG_TOKENS, default_vocab

CANONICAL = (
    "<SUMMARY>s</SUMMARY><CAPTION>c</CAPTION><REASONING>r</REASONING>"
    "<REFLECTION>f</REFLECTION><CONCLUSION>a</CONCLUSION>"
)


class TestParse:
    def test_canonical_five_blocks(self):
        resp = parse(CANONICAL)
        assert [b.kind for b in resp.blocks] == [
            "SUMMARY", "CAPTION", "REASONING", "REFLECTION", "CONCLUSION",
        ]
        assert resp.violations == []

    def test_nested_reflection_flagged(self):
        resp = parse(
            "<SUMMARY>s</SUMMARY><CAPTION>c</CAPTION>"
            "<REASONING>r <REFLECTION>f</REFLECTION> r</REASONING>"
            "<CONCLUSION>a</CONCLUSION>"
        )
        kinds = {v.kind for v in resp.violations}
        assert "nested-tag" in kinds

    def test_empty_reflection_is_legal(self):
        resp = parse(CANONICAL.replace("<REFLECTION>f</REFLECTION>", "<REFLECTION></REFLECTION>"))
        assert resp.violations == []
        refl = resp.blocks_of("REFLECTION")[0]
        assert refl.text == ()

    def test_missing_block(self):
        resp = parse(CANONICAL.replace("<CAPTION>c</CAPTION>", ""))
        assert any(v.kind == "missing-block" for v in resp.violations)

    def test_duplicate_block(self):
        resp = parse("<SUMMARY>x</SUMMARY>" + CANONICAL)
        assert any(v.kind == "duplicate-block" for v in resp.violations)

    def test_wrong_order(self):
        resp = parse(
            "<CAPTION>c</CAPTION><SUMMARY>s</SUMMARY><REASONING>r</REASONING>"
            "<REFLECTION>f</REFLECTION><CONCLUSION>a</CONCLUSION>"
        )
        assert any(v.kind == "block-order" for v in resp.violations)

    def test_unclosed_tag(self):
        resp = parse("<SUMMARY>s</SUMMARY><CAPTION>never closed")
        assert any(v.kind == "unclosed-tag" for v in resp.violations)

    def test_overlap(self):
        resp = parse(
            "<SUMMARY>s<CAPTION>c</SUMMARY>d</CAPTION>"
        )
        kinds = {v.kind for v in resp.violations}
        assert "nested-tag" in kinds or "overlapping-tags" in kinds

    def test_stray_text(self):
        resp = parse("hello " + CANONICAL)
        assert any(v.kind == "stray-text" for v in resp.violations)

    def test_reflection_before_summary_is_order_legal(self):
        resp = parse("<REFLECTION>early</REFLECTION>" + CANONICAL.replace("<REFLECTION>f</REFLECTION>", ""))
        assert resp.violations == []

    def test_accepts_token_ids(self):
        vocab = default_vocab()
        ids = vocab.encode(vocab.tokenize_text(CANONICAL.replace("s", "i").replace(">c<", ">the<")
                                               .replace(">r<", ">look<").replace(">f<", ">again<")
                                               .replace(">a<", ">yes<")))
        resp = parse(ids)
        assert resp.violations == []


class TestRoundTrip:
    def test_serialize_parse_identity(self):
        vocab = default_vocab()
        rng = np.random.default_rng(0)
        words = ["the", "image", "shows", "a", "red", "square", "yes", "2"]
        for _ in range(200):
            tokens = []
            for kind in ("SUMMARY", "CAPTION", "REASONING", "REFLECTION", "CONCLUSION"):
                tokens.append(f"<{kind}>")
                tokens.extend(rng.choice(words, size=int(rng.integers(0, 6))))
                tokens.append(f"</{kind}>")
            resp = parse(tokens)
            assert resp.violations == []
            assert resp.serialize() == tuple(tokens)

    def test_fuzz_totality(self):
        """parse never raises on arbitrary tag soup (10k cases)."""
        rng = np.random.default_rng(1)
        pool = list(TAG_TOKENS) + ["a", "red", "2", "yes", "look", "the"]
        for _ in range(10_000):
            n = int(rng.integers(0, 24))
            tokens = [pool[int(i)] for i in rng.integers(0, len(pool), size=n)]
            resp = parse(tokens)
            covered = set()
            for b in resp.blocks:
                span = set(range(b.start, b.end))
                assert not (span & covered), "block spans overlap"
                covered |= span

    def test_spans_partition_tagged_regions(self):
        resp = parse(CANONICAL)
        covered = sorted(i for b in resp.blocks for i in range(b.start, b.end))
        assert covered == list(range(len(resp.tokens)))


class TestReflectionStats:
    def test_zero_reflections(self):
        resp = parse("<SUMMARY>s</SUMMARY>")
        stats = reflection_stats(resp)
        assert (stats.n_r, stats.l_r_total) == (0, 0)

    def test_two_reflections_hand_count(self):
        resp = parse(
            "<REFLECTION>a b c</REFLECTION><REFLECTION>d e f g h</REFLECTION>"
        )
        stats = reflection_stats(resp)
        assert (stats.n_r, stats.l_r_total, stats.lengths) == (2, 8, (3, 5))

    def test_stats_survive_reserialization(self):
        resp = parse(CANONICAL)
        again = parse(list(resp.serialize()))
        assert reflection_stats(resp) == reflection_stats(again)


class TestExtractConclusion:
    def test_trailing_number_wins(self):
        resp = parse("<CONCLUSION> the answer is 2 </CONCLUSION>")
        assert extract_conclusion(resp) == "2"

    def test_plain_option_word(self):
        resp = parse("<CONCLUSION>no</CONCLUSION>")
        assert extract_conclusion(resp) == "no"

    def test_color_shape_pair(self):
        resp = parse("<CONCLUSION>the answer is green triangle</CONCLUSION>")
        assert extract_conclusion(resp) == "green triangle"

    def test_missing_conclusion(self):
        resp = parse("<SUMMARY>s</SUMMARY>")
        assert extract_conclusion(resp) is None

    def test_survives_violations_elsewhere(self):
        resp = parse("stray <CONCLUSION>yes</CONCLUSION>")
        assert resp.violations
        assert extract_conclusion(resp) == "yes"
