"""Sentence segmentation and ambiguous-phrase scanning for posting text."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import JobPosting

# Sentence-final punctuation, Latin and CJK.
TERMINAL_MARKS = ".!?;。！？；"

# Leading list markers stripped as separators: symbol bullets and short
# enumerators like "1." / "2)" / "3、" at the start of a line.
_BULLET_RE = re.compile(r"^\s*(?:[-*•·●◦▪]+|\(?\d{1,2}[.、)])\s*")
_WS_RE = re.compile(r"\s+")
_NEWLINE_RUN_RE = re.compile(r"[\r\n]+")

# The five phrases flagged as ambiguous requirement language, plus common
# Chinese renderings. Custom lexicons must keep the English five.
CORE_AMBIGUOUS_PHRASES = (
    "familiar with",
    "basic understanding of",
    "some knowledge of",
    "experience preferred",
    "ability to learn",
)
_CHINESE_AMBIGUOUS_PHRASES = (
    "熟悉",                          # familiar with
    "基本了解",              # basic understanding of
    "有一定了解",        # some knowledge of
    "有经验者优先",  # experience preferred
    "学习能力",              # ability to learn
)


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return _WS_RE.sub(" ", text.strip()).lower()


@dataclass(frozen=True)
class SentenceRecord:
    """One segmented sentence, keyed by posting and position."""

    posting_id: str
    index: int
    text: str


@dataclass(frozen=True)
class SegmentationConfig:
    """Rule set for sentence splitting.

    min_chars: unterminated fragments shorter than this merge into the
        preceding sentence. Pieces that end in a terminal mark always stand
        alone, whatever their length.
    scorer: optional learned boundary model mapping (text, position) to a
        probability; when present it overrides the rule-based boundaries. A
        boundary at position i cuts between text[i] and text[i + 1], taken
        wherever the scorer returns p >= 0.5.
    """

    min_chars: int = 4
    terminal_marks: str = TERMINAL_MARKS
    scorer: Callable[[str, int], float] | None = None


def _strip_bullet(piece: str) -> str:
    return _BULLET_RE.sub("", piece, count=1)


def _rule_pieces(text: str, marks: str) -> list[str]:
    pieces: list[str] = []
    for line in _NEWLINE_RUN_RE.split(text):
        line = _strip_bullet(line)
        start = 0
        for i, ch in enumerate(line):
            if ch in marks:
                pieces.append(line[start : i + 1])
                start = i + 1
        if start < len(line):
            pieces.append(line[start:])
    return pieces


def _scorer_pieces(text: str, scorer: Callable[[str, int], float]) -> list[str]:
    pieces: list[str] = []
    start = 0
    for i in range(len(text) - 1):
        if scorer(text, i) >= 0.5:
            pieces.append(text[start : i + 1])
            start = i + 1
    pieces.append(text[start:])
    return [_strip_bullet(p) for p in pieces]


def split_sentences(text: str, config: SegmentationConfig | None = None) -> list[str]:
    """Split raw text into sentences.

    Rule path: boundaries at sentence-final punctuation (kept with the
    sentence), newline runs, and list bullets (markers dropped). Unterminated
    fragments shorter than config.min_chars merge into the preceding
    sentence; a leading fragment with nothing before it is kept.
    """
    cfg = config or SegmentationConfig()
    if cfg.scorer is not None:
        raw = _scorer_pieces(text, cfg.scorer)
    else:
        raw = _rule_pieces(text, cfg.terminal_marks)

    sentences: list[str] = []
    for piece in raw:
        piece = piece.strip()
        if not piece:
            continue
        terminated = piece[-1] in cfg.terminal_marks
        if sentences and not terminated and len(piece) < cfg.min_chars:
            sentences[-1] = sentences[-1] + " " + piece
        else:
            sentences.append(piece)
    return sentences


def segment_sentences(
    posting: JobPosting, config: SegmentationConfig | None = None
) -> list[SentenceRecord]:
    """Segment a posting body into ordered SentenceRecords."""
    return [
        SentenceRecord(posting_id=posting.posting_id, index=i, text=s)
        for i, s in enumerate(split_sentences(posting.body, config))
    ]


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class AmbiguityLexicon:
    """Phrase list for vague requirement language.

    Must be non-empty, duplicate-free after normalization, and contain the
    five core English phrases.
    """

    phrases: tuple[str, ...]

    def __post_init__(self) -> None:
        normalized = [normalize_text(p) for p in self.phrases]
        if not normalized or any(not p for p in normalized):
            raise LexiconError("lexicon phrases must be non-empty")
        if len(set(normalized)) != len(normalized):
            raise LexiconError("lexicon contains duplicate phrases")
        missing = [p for p in CORE_AMBIGUOUS_PHRASES if p not in normalized]
        if missing:
            raise LexiconError(f"lexicon is missing core phrases: {missing}")
        object.__setattr__(self, "phrases", tuple(normalized))

    @classmethod
    def default(cls) -> "AmbiguityLexicon":
        return cls(CORE_AMBIGUOUS_PHRASES + _CHINESE_AMBIGUOUS_PHRASES)

    @classmethod
    def from_file(cls, path: str | Path) -> "AmbiguityLexicon":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))


def scan_ambiguity(
    sentences: Iterable[str],
    lexicon: "AmbiguityLexicon | Iterable[str]",
) -> tuple[int, float]:
    """Count ambiguous-phrase hits over sentences.

    Returns (frequency, share): frequency is the total number of phrase
    occurrences (case-insensitive substring match after whitespace
    collapsing, non-overlapping per phrase); share is the fraction of
    sentences containing at least one match, 0.0 when there are no
    sentences. Accepts a full AmbiguityLexicon or any plain collection of
    phrases (the latter skips lexicon validation).
    """
    if isinstance(lexicon, AmbiguityLexicon):
        phrases: tuple[str, ...] = lexicon.phrases
    else:
        phrases = tuple(sorted({normalize_text(p) for p in lexicon}))
        if not phrases:
            raise LexiconError("no phrases to scan for")
    total = 0
    matched = 0
    n = 0
    for sentence in sentences:
        n += 1
        text = normalize_text(sentence)
        hits = sum(text.count(p) for p in phrases)
        total += hits
        if hits:
            matched += 1
    share = matched / n if n else 0.0
    return total, share
