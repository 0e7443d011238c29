"""Posting-level skill extraction and firm-occupation-year panel aggregation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from .corpus import FirmYearControls, JobPosting
from .taxonomy import EmbeddingIndex
from .textproc import (
    AmbiguityLexicon,
    SegmentationConfig,
    scan_ambiguity,
    segment_sentences,
)
from .trainer import PrescreenerParams, prescreen_probabilities

logger = logging.getLogger(__name__)


class AlignmentError(ValueError):
    """Alignment was requested against a missing baseline set."""


@dataclass(frozen=True)
class PostingSkills:
    """Extraction output for one posting.

    skills is a set (a skill mentioned in several sentences counts once);
    sentence_matches records, per skill, which sentence indices produced it.
    aligned / nonaligned stay None until classified against a baseline.
    """

    posting_id: str
    skills: frozenset[str]
    sentence_matches: Mapping[str, tuple[int, ...]]
    kept_sentences: tuple[tuple[int, str], ...]
    occ_id: str | None = None
    aligned: frozenset[str] | None = None
    nonaligned: frozenset[str] | None = None


def extract_skills(
    posting: JobPosting,
    clf: PrescreenerParams,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    index: EmbeddingIndex,
    threshold: float = 0.6,
    cap: int = 5,
    max_len: int = 64,
    seg_config: SegmentationConfig | None = None,
) -> PostingSkills:
    """Segment, pre-screen, and match each kept sentence against the index.

    Per kept sentence: skills with similarity >= threshold, at most cap of
    them by descending similarity (ties toward the lowest skill id). The
    posting-level set is the union over kept sentences.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    records = segment_sentences(posting, seg_config)
    texts = [r.text for r in records]
    kept: list[tuple[int, str]] = []
    if texts:
        probs = prescreen_probabilities(texts, clf, params, vocab, max_len)
        kept = [(r.index, r.text) for r, p in zip(records, probs) if p >= 0.5]

    matches: dict[str, list[int]] = {}
    if kept:
        vectors = enc.encode_texts([t for _, t in kept], params, vocab, max_len)
        for (idx, _), vec in zip(kept, vectors):
            for sid, _sim in index.top_k(vec, cap, min_sim=threshold):
                matches.setdefault(sid, []).append(idx)
    return PostingSkills(
        posting_id=posting.posting_id,
        skills=frozenset(matches),
        sentence_matches={s: tuple(v) for s, v in matches.items()},
        kept_sentences=tuple(kept),
    )


def extract_skills_bulk(
    postings: Sequence[JobPosting],
    clf: PrescreenerParams,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    index: EmbeddingIndex,
    threshold: float = 0.6,
    cap: int = 5,
    max_len: int = 64,
    seg_config: SegmentationConfig | None = None,
) -> list[PostingSkills]:
    """extract_skills over many postings with whole-corpus encoder batches.

    Produces exactly what per-posting calls would, but screens and embeds
    every sentence in large batches instead of a handful at a time.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    per_posting = [segment_sentences(p, seg_config) for p in postings]
    flat = [r.text for recs in per_posting for r in recs]
    probs = prescreen_probabilities(flat, clf, params, vocab, max_len) if flat else []

    kept_all: list[tuple[int, int, str]] = []  # (posting row, sentence index, text)
    cursor = 0
    for row, recs in enumerate(per_posting):
        for r in recs:
            if probs[cursor] >= 0.5:
                kept_all.append((row, r.index, r.text))
            cursor += 1

    vectors = (
        enc.encode_texts([t for _, _, t in kept_all], params, vocab, max_len)
        if kept_all
        else np.zeros((0, 1))
    )
    matches_by_row: dict[int, dict[str, list[int]]] = {}
    kept_by_row: dict[int, list[tuple[int, str]]] = {}
    for (row, idx, text), vec in zip(kept_all, vectors):
        kept_by_row.setdefault(row, []).append((idx, text))
        row_matches = matches_by_row.setdefault(row, {})
        for sid, _sim in index.top_k(vec, cap, min_sim=threshold):
            row_matches.setdefault(sid, []).append(idx)
    return [
        PostingSkills(
            posting_id=p.posting_id,
            skills=frozenset(matches_by_row.get(row, {})),
            sentence_matches={
                s: tuple(v) for s, v in matches_by_row.get(row, {}).items()
            },
            kept_sentences=tuple(kept_by_row.get(row, [])),
        )
        for row, p in enumerate(postings)
    ]


def classify_alignment(
    skills: frozenset[str], baseline: frozenset[str] | None
) -> tuple[frozenset[str], frozenset[str]]:
    """Partition a posting's skills against the occupation baseline set."""
    if baseline is None:
        raise AlignmentError("no baseline skill set for this occupation")
    aligned = frozenset(skills & baseline)
    return aligned, frozenset(skills - aligned)


def classify_posting(
    result: PostingSkills,
    occ_id: str,
    baseline_sets: Mapping[str, frozenset[str]],
) -> PostingSkills:
    """Attach the assigned occupation and the aligned/non-aligned partition."""
    aligned, nonaligned = classify_alignment(
        result.skills, baseline_sets.get(occ_id)
    )
    return replace(result, occ_id=occ_id, aligned=aligned, nonaligned=nonaligned)


def ai_stock(
    flows: Mapping[int, float] | Sequence[tuple[int, float]],
    depreciation: float = 0.15,
) -> dict[int, float]:
    """Perpetual-inventory stock over the observed year range.

    stock_t = (1 - depreciation) * stock_{t-1} + flow_t, starting from zero
    before the first observed year; missing interior years contribute zero
    flow but still depreciate. Depreciation must lie strictly inside (0, 1)
    and flows must be non-negative.
    """
    if not 0.0 < depreciation < 1.0:
        raise ValueError(f"depreciation must be in (0, 1), got {depreciation}")
    flow_map = dict(flows if isinstance(flows, Mapping) else dict(flows))
    if not flow_map:
        return {}
    for year, flow in flow_map.items():
        if not np.isfinite(flow) or flow < 0:
            raise ValueError(f"flow for year {year} must be finite and >= 0")
    stock = 0.0
    out: dict[int, float] = {}
    for year in range(min(flow_map), max(flow_map) + 1):
        stock = (1.0 - depreciation) * stock + flow_map.get(year, 0.0)
        out[year] = stock
    return out


def text_consistency(doc_embeddings: np.ndarray) -> float | None:
    """Mean pairwise cosine similarity across posting embeddings.

    Returns None when fewer than two postings. Bit-identical rows score
    exactly 1.0 against each other.
    """
    X = np.asarray(doc_embeddings, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        return None
    norms = np.linalg.norm(X, axis=1)
    if (norms < 1e-12).any():
        raise ValueError("zero-norm embedding in consistency input")
    U = X / norms[:, None]
    sims = U @ U.T
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1.0 if np.array_equal(X[i], X[j]) else float(sims[i, j])
    return total / (n * (n - 1) / 2)


def forward_measures(
    fl_count: int,
    nonaligned_count: int,
    posting_count: int,
    fl_mentions: int | None = None,
    intensity_mentions: bool = False,
) -> tuple[float, float]:
    """Forward-looking share and intensity for one cell.

    share = fl_count / nonaligned_count (0 when the denominator is 0);
    intensity = fl_count / posting_count, or mention-based when requested.
    """
    if posting_count < 1:
        raise ValueError("cell must contain at least one posting")
    share = fl_count / nonaligned_count if nonaligned_count else 0.0
    numerator = fl_mentions if (intensity_mentions and fl_mentions is not None) else fl_count
    return share, numerator / posting_count


@dataclass(frozen=True)
class PanelCell:
    """One firm-occupation-year aggregate."""

    firm_id: str
    occ_id: str
    year: int
    posting_count: int
    aligned_count: int
    nonaligned_count: int
    fl_count: int
    fl_share: float
    fl_intensity: float
    consistency: float | None
    ambiguity_frequency: int
    ambiguity_share: float
    ai_stock: float
    controls: FirmYearControls | None
    ambiguity_per_posting: float = 0.0  # mean phrase hits per posting (extra normalization)


def aggregate_panel(
    results: Sequence[tuple[JobPosting, PostingSkills]],
    fl_sets: Mapping[str, frozenset[str]],
    stocks: Mapping[tuple[str, int], float],
    doc_embeddings: Mapping[str, np.ndarray],
    controls: Mapping[tuple[str, int], FirmYearControls],
    lexicon: AmbiguityLexicon,
    intensity_mentions: bool = False,
) -> list[PanelCell]:
    """Aggregate classified postings into firm-occupation-year cells.

    Every result must already carry occ_id and the aligned/non-aligned
    partition. Cells with zero postings are never materialized. Counts use
    per-posting set semantics summed within the cell.
    """
    groups: dict[tuple[str, str, int], list[tuple[JobPosting, PostingSkills]]] = {}
    for posting, skills in results:
        if skills.occ_id is None or skills.aligned is None or skills.nonaligned is None:
            raise ValueError(f"posting {posting.posting_id} is not classified yet")
        groups.setdefault((posting.firm_id, skills.occ_id, posting.year), []).append(
            (posting, skills)
        )

    cells: list[PanelCell] = []
    for (firm_id, occ_id, year) in sorted(groups):
        members = groups[(firm_id, occ_id, year)]
        fl = fl_sets.get(occ_id, frozenset())
        aligned = sum(len(s.aligned) for _, s in members)
        nonaligned = sum(len(s.nonaligned) for _, s in members)
        fl_count = sum(len(s.skills & fl) for _, s in members)
        fl_mentions = sum(
            len(s.sentence_matches[sid])
            for _, s in members
            for sid in (s.skills & fl)
        )
        share, intensity = forward_measures(
            fl_count, nonaligned, len(members), fl_mentions, intensity_mentions
        )
        sentences = [text for _, s in members for _, text in s.kept_sentences]
        freq, amb_share = scan_ambiguity(sentences, lexicon)
        embs = [
            doc_embeddings[p.posting_id]
            for p, _ in members
            if p.posting_id in doc_embeddings
        ]
        consistency = text_consistency(np.stack(embs)) if len(embs) >= 2 else None
        cells.append(
            PanelCell(
                firm_id=firm_id,
                occ_id=occ_id,
                year=year,
                posting_count=len(members),
                aligned_count=aligned,
                nonaligned_count=nonaligned,
                fl_count=fl_count,
                fl_share=share,
                fl_intensity=intensity,
                consistency=consistency,
                ambiguity_frequency=freq,
                ambiguity_share=amb_share,
                ai_stock=stocks.get((firm_id, year), 0.0),
                controls=controls.get((firm_id, year)),
                ambiguity_per_posting=freq / len(members),
            )
        )
    return cells


PANEL_HEADER = (
    "firm_id",
    "occ_id",
    "year",
    "postings",
    "aligned",
    "nonaligned",
    "fl_count",
    "fl_share",
    "fl_intensity",
    "consistency",
    "ambig_freq",
    "ambig_share",
    "ai_stock",
    "log_assets",
    "roa",
    "leverage",
    "rnd_intensity",
)


def write_panel(cells: Sequence[PanelCell], path) -> None:
    """Serialize cells with the pinned header; null consistency is an empty field."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_HEADER)
        for c in cells:
            ctrl = c.controls
            writer.writerow(
                [
                    c.firm_id,
                    c.occ_id,
                    c.year,
                    c.posting_count,
                    c.aligned_count,
                    c.nonaligned_count,
                    c.fl_count,
                    repr(c.fl_share),
                    repr(c.fl_intensity),
                    "" if c.consistency is None else repr(c.consistency),
                    c.ambiguity_frequency,
                    repr(c.ambiguity_share),
                    repr(c.ai_stock),
                    "" if ctrl is None else repr(ctrl.log_assets),
                    "" if ctrl is None else repr(ctrl.roa),
                    "" if ctrl is None else repr(ctrl.leverage),
                    "" if ctrl is None else repr(ctrl.rnd_intensity),
                ]
            )


def read_panel(path):
    """Load a serialized panel into a DataFrame (empty consistency -> NaN)."""
    import pandas as pd

    return pd.read_csv(path, dtype={"firm_id": str, "occ_id": str})
