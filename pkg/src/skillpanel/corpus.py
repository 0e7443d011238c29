"""Posting and control-table ingestion plus seeded synthetic training sentences."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:  # circular at runtime only for typing
    from .taxonomy import SkillTaxonomy

logger = logging.getLogger(__name__)

LEVELS = ("beginner", "intermediate", "advanced")

LEVEL_QUALIFIERS = {
    "beginner": "basic familiarity with",
    "intermediate": "solid working experience in",
    "advanced": "expert-level command of",
}

TRAIN_SHARE_BUCKETS = 8  # hash mod 10 < 8 -> train split


class CorpusError(ValueError):
    pass


class DuplicatePostingError(CorpusError):
    pass


@dataclass(frozen=True)
class JobPosting:
    """One vacancy ad: identity, firm, year, title, free-text body."""

    posting_id: str
    firm_id: str
    year: int
    title: str
    body: str


@dataclass(frozen=True)
class FirmYearControls:
    """Balance-sheet controls and the AI patent-application flow for one firm-year."""

    firm_id: str
    year: int
    log_assets: float
    roa: float
    leverage: float
    rnd_intensity: float
    ai_flow: float


@dataclass(frozen=True)
class SyntheticPair:
    """A generated (sentence, skill) training pair with its proficiency level and split."""

    sentence: str
    skill_id: str
    level: str
    split: str  # "train" | "eval"


def stable_hash(text: str) -> int:
    """Platform-stable 64-bit hash (sha256 prefix)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _coerce_posting(raw: dict) -> JobPosting:
    posting_id = str(raw["posting_id"])
    firm_id = str(raw["firm_id"])
    year = int(raw["year"])
    title = str(raw["title"])
    body = str(raw["body"])
    if not posting_id or not firm_id or not title.strip() or not body.strip():
        raise ValueError("empty required field")
    return JobPosting(posting_id, firm_id, year, title, body)


def load_postings(
    path: str | Path,
    year_window: tuple[int, int] | None = None,
) -> tuple[list[JobPosting], int]:
    """Load line-delimited posting records (JSON per line).

    Malformed lines are logged and counted, not fatal. A duplicate
    posting_id raises DuplicatePostingError naming the id. Records outside
    year_window (inclusive) count as rejects. Returns (postings, rejected).
    """
    postings: list[JobPosting] = []
    seen: set[str] = set()
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = _coerce_posting(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                logger.warning("skipping malformed posting at line %d: %s", lineno, exc)
                rejected += 1
                continue
            if year_window is not None and not (
                year_window[0] <= record.year <= year_window[1]
            ):
                logger.warning(
                    "skipping posting %s: year %d outside window %s",
                    record.posting_id,
                    record.year,
                    year_window,
                )
                rejected += 1
                continue
            if record.posting_id in seen:
                raise DuplicatePostingError(
                    f"duplicate posting_id {record.posting_id!r} at line {lineno}"
                )
            seen.add(record.posting_id)
            postings.append(record)
    return postings, rejected


CONTROL_COLUMNS = (
    "firm_id",
    "year",
    "log_assets",
    "roa",
    "leverage",
    "rnd_intensity",
    "ai_flow",
)


def load_controls(path: str | Path) -> list[FirmYearControls]:
    """Load the firm-year control table (CSV with header). One row per (firm, year)."""
    out: list[FirmYearControls] = []
    seen: set[tuple[str, int]] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CONTROL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CorpusError(f"controls file missing columns: {missing}")
        for i, row in enumerate(reader, start=2):
            try:
                rec = FirmYearControls(
                    firm_id=str(row["firm_id"]),
                    year=int(row["year"]),
                    log_assets=float(row["log_assets"]),
                    roa=float(row["roa"]),
                    leverage=float(row["leverage"]),
                    rnd_intensity=float(row["rnd_intensity"]),
                    ai_flow=float(row["ai_flow"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"bad controls row at line {i}: {exc}") from exc
            if rec.ai_flow < 0:
                raise CorpusError(f"negative ai_flow at line {i}")
            key = (rec.firm_id, rec.year)
            if key in seen:
                raise CorpusError(f"duplicate controls row for {key}")
            seen.add(key)
            out.append(rec)
    return out


# Sentence templates for synthetic pairs: 3 shapes x 10 tail fragments gives
# 30 distinct sentences per (skill, level).
_SENTENCE_SHAPES = (
    "{qualifier} {skill} {fragment}.",
    "The role requires {qualifier} {skill} {fragment}.",
    "Candidates should bring {qualifier} {skill} {fragment}.",
)
_FRAGMENTS = (
    "for day-to-day delivery",
    "across multiple client projects",
    "in a fast-paced team",
    "to support business goals",
    "with minimal supervision",
    "alongside senior colleagues",
    "in production settings",
    "under tight deadlines",
    "for internal and external stakeholders",
    "as part of the core workflow",
)
PAIR_CAPACITY_PER_LEVEL = len(_SENTENCE_SHAPES) * len(_FRAGMENTS)


def _pair_sentence(label: str, level: str, seed: int, skill_id: str, i: int) -> str:
    base = stable_hash(f"{seed}:{skill_id}:{level}")
    idx = (base + i) % PAIR_CAPACITY_PER_LEVEL
    shape = _SENTENCE_SHAPES[idx // len(_FRAGMENTS)]
    fragment = _FRAGMENTS[idx % len(_FRAGMENTS)]
    sentence = shape.format(
        qualifier=LEVEL_QUALIFIERS[level], skill=label, fragment=fragment
    )
    return sentence[0].upper() + sentence[1:]


def split_for_sentence(sentence: str) -> str:
    """Stable 80/20 split assignment by sentence content."""
    return "train" if stable_hash(sentence) % 10 < TRAIN_SHARE_BUCKETS else "eval"


def generate_synthetic_pairs(
    taxonomy: "SkillTaxonomy", per_level: int, seed: int
) -> list[SyntheticPair]:
    """Generate per_level sentences per (skill, level) from a seeded template bank.

    Pure function of (taxonomy, per_level, seed): identical seeds give
    byte-identical output. Pairs come back in canonical order (skill_id,
    proficiency level, index) and each carries its stable train/eval split.
    """
    if per_level < 1:
        raise ValueError("per_level must be >= 1")
    if per_level > PAIR_CAPACITY_PER_LEVEL:
        raise ValueError(
            f"per_level {per_level} exceeds template capacity {PAIR_CAPACITY_PER_LEVEL}"
        )
    pairs: list[SyntheticPair] = []
    for skill_id in sorted(taxonomy.skills):
        label = taxonomy.skills[skill_id].label
        for level in LEVELS:
            for i in range(per_level):
                sentence = _pair_sentence(label, level, seed, skill_id, i)
                pairs.append(
                    SyntheticPair(
                        sentence=sentence,
                        skill_id=skill_id,
                        level=level,
                        split=split_for_sentence(sentence),
                    )
                )
    return pairs


# Non-skill boilerplate: negatives for the sentence pre-screener.
_BOILERPLATE_SHAPES = (
    "Bachelor's degree or above in any major.",
    "Competitive salary with a {n}-month annual bonus.",
    "Five social insurances and a housing fund are provided.",
    "At least {n} years of total work experience.",
    "Flexible working hours and paid annual leave.",
    "Our office is located in {city} with subway access.",
    "We offer annual health checks and team-building trips.",
    "Positions are open in our {city} branch.",
    "Resumes are reviewed on a rolling basis.",
    "Employment type is full time with a {n}-month probation period.",
)
_CITIES = ("Beijing", "Shanghai", "Shenzhen", "Hangzhou", "Chengdu", "Guangzhou")


def generate_boilerplate_sentences(count: int, seed: int) -> list[str]:
    """Deterministic non-skill sentences (benefits, logistics, requirements)."""
    if count < 0:
        raise ValueError("count must be >= 0")
    out: list[str] = []
    for i in range(count):
        h = stable_hash(f"boilerplate:{seed}:{i}")
        shape = _BOILERPLATE_SHAPES[i % len(_BOILERPLATE_SHAPES)]
        out.append(
            shape.format(n=2 + h % 5, city=_CITIES[(h >> 8) % len(_CITIES)])
        )
    return out


def write_pairs(pairs: Iterable[SyntheticPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sentence", "skill_id", "level", "split"])
        for p in pairs:
            writer.writerow([p.sentence, p.skill_id, p.level, p.split])


def read_pairs(path: str | Path) -> list[SyntheticPair]:
    out: list[SyntheticPair] = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                SyntheticPair(
                    sentence=row["sentence"],
                    skill_id=row["skill_id"],
                    level=row["level"],
                    split=row["split"],
                )
            )
    return out
