"""Sentence segmentation and ambiguity scanning."""

import pytest

from skillpanel.corpus import JobPosting
from skillpanel.textproc import (
    CORE_AMBIGUOUS_PHRASES,
    AmbiguityLexicon,
    LexiconError,
    SegmentationConfig,
    normalize_text,
    scan_ambiguity,
    segment_sentences,
    split_sentences,
)


def posting(body: str) -> JobPosting:
    return JobPosting("p1", "f1", 2020, "analyst", body)


class TestSplitSentences:
    def test_one_boundary_per_terminal_mark(self):
        assert split_sentences("A. B! C?") == ["A.", "B!", "C?"]

    def test_no_terminal_punctuation_is_single_sentence(self):
        body = "no terminal punctuation here"
        assert split_sentences(body) == [body]

    def test_fullwidth_marks_split(self):
        got = split_sentences("要求：熟悉Python；良好沟通能力。")
        assert got == ["要求：熟悉Python；", "良好沟通能力。"]

    def test_empty_body_yields_no_sentences(self):
        assert split_sentences("") == []
        assert split_sentences("   \n  ") == []

    def test_newline_runs_and_bullets(self):
        assert split_sentences("- item one\n- item two") == ["item one", "item two"]

    def test_short_unterminated_fragment_merges_backwards(self):
        assert split_sentences("Hello there world.\nOk") == ["Hello there world. Ok"]

    def test_leading_short_fragment_is_kept(self):
        # nothing before it to merge into
        assert split_sentences("Ok\nthen a real sentence.") == [
            "Ok",
            "then a real sentence.",
        ]

    def test_terminated_fragment_stands_alone_regardless_of_length(self):
        assert split_sentences("Go. Stop.") == ["Go.", "Stop."]

    def test_scorer_overrides_rules(self):
        scorer = lambda text, i: 1.0 if text[i] == "|" else 0.0
        got = split_sentences("abcd|efgh", SegmentationConfig(scorer=scorer))
        assert got == ["abcd|", "efgh"]

    def test_deterministic(self):
        body = "First point; second point. Third!\n- bullet item\nTail?"
        assert split_sentences(body) == split_sentences(body)


class TestSegmentSentences:
    def test_records_are_indexed_in_order(self):
        records = segment_sentences(posting("A. B! C?"))
        assert [r.index for r in records] == [0, 1, 2]
        assert all(r.posting_id == "p1" for r in records)

    def test_record_count_adds_up_over_postings(self):
        bodies = ["A. B.", "only one", "x! y? z."]
        total = sum(len(segment_sentences(posting(b))) for b in bodies)
        assert total == 2 + 1 + 3

    def test_concatenation_recovers_body_modulo_separators(self):
        body = "First point; second point. Third!\n- bullet item\nTail?"
        records = segment_sentences(posting(body))
        joined = "".join(r.text for r in records)
        strip = lambda s: "".join(s.split()).replace("-", "")
        assert strip(joined) == strip(body)


class TestAmbiguityLexicon:
    def test_default_contains_core_phrases(self):
        lex = AmbiguityLexicon.default()
        assert set(CORE_AMBIGUOUS_PHRASES) <= set(lex.phrases)

    def test_missing_core_phrase_rejected(self):
        with pytest.raises(LexiconError):
            AmbiguityLexicon(("familiar with",))

    def test_duplicates_rejected(self):
        with pytest.raises(LexiconError):
            AmbiguityLexicon(CORE_AMBIGUOUS_PHRASES + ("Familiar  With",))

    def test_empty_rejected(self):
        with pytest.raises(LexiconError):
            AmbiguityLexicon(())

    def test_from_file_roundtrip(self, tmp_path):
        path = tmp_path / "lexicon.txt"
        path.write_text(
            "\n".join(CORE_AMBIGUOUS_PHRASES + ("nice to have",)), encoding="utf-8"
        )
        lex = AmbiguityLexicon.from_file(path)
        assert "nice to have" in lex.phrases


class TestScanAmbiguity:
    def test_hand_count_single_phrase(self):
        freq, share = scan_ambiguity(
            ["Familiar with SQL", "Expert in SQL"], ["familiar with"]
        )
        assert (freq, share) == (1, 0.5)

    def test_no_sentences(self):
        assert scan_ambiguity([], ["familiar with"]) == (0, 0.0)

    def test_two_occurrences_one_sentence(self):
        freq, share = scan_ambiguity(
            ["familiar with X and familiar with Y"], ["familiar with"]
        )
        assert (freq, share) == (2, 1.0)

    def test_full_lexicon_accepted(self):
        freq, share = scan_ambiguity(
            ["Some knowledge of Python is expected."], AmbiguityLexicon.default()
        )
        assert (freq, share) == (1, 1.0)

    def test_case_and_whitespace_insensitive(self):
        freq, share = scan_ambiguity(["FAMILIAR   WITH databases"], ["familiar with"])
        assert (freq, share) == (1, 1.0)

    def test_chinese_phrases_match(self):
        freq, share = scan_ambiguity(["要求：熟悉Python；"], AmbiguityLexicon.default())
        assert freq == 1 and share == 1.0

    def test_empty_phrase_collection_rejected(self):
        with pytest.raises(LexiconError):
            scan_ambiguity(["a sentence"], [])

    def test_share_bounds_and_frequency_floor(self, rng):
        words = ["familiar with", "python", "sql", "ability to learn", "cloud"]
        sentences = [
            " ".join(rng.choice(words, size=rng.integers(1, 6)))
            for _ in range(50)
        ]
        freq, share = scan_ambiguity(sentences, ["familiar with", "ability to learn"])
        assert 0.0 <= share <= 1.0
        assert freq >= share * len(sentences)

    def test_adding_phrase_is_monotone(self, rng):
        words = ["familiar with", "python", "experience preferred", "golang"]
        sentences = [
            " ".join(rng.choice(words, size=rng.integers(1, 6)))
            for _ in range(40)
        ]
        f1, s1 = scan_ambiguity(sentences, ["familiar with"])
        f2, s2 = scan_ambiguity(sentences, ["familiar with", "experience preferred"])
        assert f2 >= f1 and s2 >= s1


def test_normalize_text_collapses_and_lowercases():
    assert normalize_text("  Mixed\tCASE\n text ") == "mixed case text"
