"""Skill and occupation taxonomies, embedding indexes over them, and
taxonomy-to-taxonomy stability statistics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from .trainer import skill_text

logger = logging.getLogger(__name__)


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Skill:
    skill_id: str
    label: str
    description: str


@dataclass(frozen=True)
class Occupation:
    occ_id: str
    title: str
    tasks: tuple[str, ...]


@dataclass
class SkillTaxonomy:
    """A versioned skill dictionary keyed by stable skill ids."""

    version: str
    skills: dict[str, Skill]

    @classmethod
    def from_csv(cls, path: str | Path) -> "SkillTaxonomy":
        skills: dict[str, Skill] = {}
        version = ""
        with open(path, encoding="utf-8", newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    skill = Skill(
                        skill_id=row["skill_id"],
                        label=row["label"],
                        description=row["description"],
                    )
                    version = row["version"]
                except KeyError as exc:
                    raise TaxonomyError(f"skills file missing column {exc} at line {i}")
                if skill.skill_id in skills:
                    raise TaxonomyError(f"duplicate skill_id {skill.skill_id!r}")
                skills[skill.skill_id] = skill
        if not skills:
            raise TaxonomyError(f"no skills loaded from {path}")
        return cls(version=version, skills=skills)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["version", "skill_id", "label", "description"])
            for sid in sorted(self.skills):
                s = self.skills[sid]
                writer.writerow([self.version, s.skill_id, s.label, s.description])


@dataclass
class OccupationTaxonomy:
    """Versioned occupations with their task statements."""

    version: str
    occupations: dict[str, Occupation]

    @classmethod
    def from_csv(
        cls, occupations_path: str | Path, tasks_path: str | Path
    ) -> "OccupationTaxonomy":
        titles: dict[str, str] = {}
        version = ""
        with open(occupations_path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                if row["occ_id"] in titles:
                    raise TaxonomyError(f"duplicate occ_id {row['occ_id']!r}")
                titles[row["occ_id"]] = row["title"]
                version = row["version"]
        tasks: dict[str, list[str]] = {occ: [] for occ in titles}
        with open(tasks_path, encoding="utf-8", newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh), start=2):
                occ = row["occ_id"]
                if occ not in tasks:
                    raise TaxonomyError(
                        f"task at line {i} references unknown occ_id {occ!r}"
                    )
                tasks[occ].append(row["task_text"])
        occupations = {
            occ: Occupation(occ_id=occ, title=titles[occ], tasks=tuple(tasks[occ]))
            for occ in titles
        }
        if not occupations:
            raise TaxonomyError(f"no occupations loaded from {occupations_path}")
        return cls(version=version, occupations=occupations)

    def to_csv(self, occupations_path: str | Path, tasks_path: str | Path) -> None:
        with open(occupations_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["version", "occ_id", "title"])
            for occ in sorted(self.occupations):
                writer.writerow([self.version, occ, self.occupations[occ].title])
        with open(tasks_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["version", "occ_id", "task_text"])
            for occ in sorted(self.occupations):
                for task in self.occupations[occ].tasks:
                    writer.writerow([self.version, occ, task])


# --- embedding index ---------------------------------------------------------

def _kmeans(
    vectors: np.ndarray, n_clusters: int, seed: int, n_iter: int = 15
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Lloyd's iterations; returns (centroids, assignments)."""
    n = vectors.shape[0]
    rng = np.random.default_rng(seed)
    centroids = vectors[rng.choice(n, size=n_clusters, replace=False)].copy()
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        # squared L2 distance up to a per-point constant
        scores = (centroids * centroids).sum(axis=1)[None, :] - 2.0 * (
            vectors @ centroids.T
        )
        assignments = scores.argmin(axis=1)
        for j in range(n_clusters):
            members = assignments == j
            if members.any():
                centroids[j] = vectors[members].mean(axis=0)
    return centroids, assignments


@dataclass
class EmbeddingIndex:
    """Distance index over unit-norm label embeddings.

    Rows are stored in ascending id order so similarity ties resolve to the
    lowest id. Exact mode scans the full matrix; approximate mode restricts
    the scan to the n_probe nearest k-means cells.
    """

    ids: tuple[str, ...]
    vectors: np.ndarray  # (K, m), unit rows, ascending id order
    mode: str = "exact"
    centroids: np.ndarray | None = None
    assignments: np.ndarray | None = None
    n_probe: int = 1

    @classmethod
    def from_vectors(
        cls,
        ids: Sequence[str],
        vectors: np.ndarray,
        mode: str = "exact",
        n_clusters: int | None = None,
        n_probe: int | None = None,
        seed: int = 0,
    ) -> "EmbeddingIndex":
        if mode not in ("exact", "approximate"):
            raise ValueError(f"unknown index mode {mode!r}")
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(ids) != vectors.shape[0]:
            raise ValueError("ids and vectors disagree on length")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in index")
        order = np.argsort(np.asarray(ids, dtype=object))
        sorted_ids = tuple(ids[int(i)] for i in order)
        vectors = vectors[order]
        index = cls(ids=sorted_ids, vectors=vectors, mode=mode)
        if mode == "approximate":
            K = vectors.shape[0]
            clusters = n_clusters or max(1, int(round(np.sqrt(K))))
            clusters = min(clusters, K)
            index.centroids, index.assignments = _kmeans(vectors, clusters, seed)
            index.n_probe = n_probe or max(1, clusters // 8)
        return index

    @property
    def size(self) -> int:
        return len(self.ids)

    def _candidate_rows(self, query: np.ndarray) -> np.ndarray:
        if self.mode == "exact" or self.centroids is None:
            return np.arange(self.size)
        scores = (self.centroids * self.centroids).sum(axis=1) - 2.0 * (
            self.centroids @ query
        )
        probe = min(self.n_probe, len(scores))
        cells = np.argpartition(scores, probe - 1)[:probe]
        return np.flatnonzero(np.isin(self.assignments, cells))

    def top_k(
        self, query: np.ndarray, k: int, min_sim: float | None = None
    ) -> list[tuple[str, float]]:
        """Best k entries by similarity, ties broken by ascending id."""
        rows = self._candidate_rows(query)
        if rows.size == 0:
            return []
        sims = self.vectors[rows] @ query
        if min_sim is not None:
            keep = sims >= min_sim
            rows, sims = rows[keep], sims[keep]
        if rows.size == 0:
            return []
        order = np.lexsort((rows, -sims))[:k]
        return [(self.ids[int(rows[i])], float(sims[i])) for i in order]

    def top1(self, query: np.ndarray) -> str:
        hits = self.top_k(query, 1)
        if not hits:
            raise ValueError("empty index probe; no candidates")
        return hits[0][0]

    def all_at_least(self, query: np.ndarray, threshold: float) -> list[tuple[str, float]]:
        """Every entry with similarity >= threshold (always a full exact scan)."""
        sims = self.vectors @ query
        keep = np.flatnonzero(sims >= threshold)
        order = keep[np.lexsort((keep, -sims[keep]))]
        return [(self.ids[int(i)], float(sims[i])) for i in order]


def build_skill_index(
    taxonomy: SkillTaxonomy,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    mode: str = "exact",
    max_len: int = 64,
    n_clusters: int | None = None,
    n_probe: int | None = None,
    seed: int = 0,
) -> EmbeddingIndex:
    """Embed every skill's label + description and index the vectors."""
    ids = sorted(taxonomy.skills)
    texts = [
        skill_text(taxonomy.skills[s].label, taxonomy.skills[s].description)
        for s in ids
    ]
    vectors = enc.encode_texts(texts, params, vocab, max_len)
    return EmbeddingIndex.from_vectors(
        ids, vectors, mode=mode, n_clusters=n_clusters, n_probe=n_probe, seed=seed
    )


def build_title_index(
    taxonomy: OccupationTaxonomy,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    mode: str = "exact",
    max_len: int = 64,
) -> EmbeddingIndex:
    """Index occupation titles only; used for posting-to-occupation assignment."""
    ids = sorted(taxonomy.occupations)
    vectors = enc.encode_texts(
        [taxonomy.occupations[o].title for o in ids], params, vocab, max_len
    )
    return EmbeddingIndex.from_vectors(ids, vectors, mode=mode)


# --- task-to-skill mapping ---------------------------------------------------

@dataclass
class BaselineSkillMap:
    """Occupation -> baseline skill set at a similarity threshold."""

    version: str
    threshold: float
    sets: dict[str, frozenset[str]]


def map_tasks_to_skills(
    occupation: Occupation,
    index: EmbeddingIndex,
    threshold: float,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int = 64,
) -> list[frozenset[str]]:
    """Per-task sets of skills whose similarity clears the threshold (inclusive)."""
    if not occupation.tasks:
        return []
    vectors = enc.encode_texts(list(occupation.tasks), params, vocab, max_len)
    return [
        frozenset(sid for sid, _ in index.all_at_least(vec, threshold))
        for vec in vectors
    ]


def build_baseline_sets(
    taxonomy: OccupationTaxonomy,
    index: EmbeddingIndex,
    threshold: float,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int = 64,
) -> BaselineSkillMap:
    """Union per-task threshold matches into each occupation's baseline set."""
    sets: dict[str, frozenset[str]] = {}
    for occ_id in sorted(taxonomy.occupations):
        task_sets = map_tasks_to_skills(
            taxonomy.occupations[occ_id], index, threshold, params, vocab, max_len
        )
        union: set[str] = set()
        for s in task_sets:
            union |= s
        sets[occ_id] = frozenset(union)
    return BaselineSkillMap(version=taxonomy.version, threshold=threshold, sets=sets)


def assign_occupation(
    title: str,
    title_index: EmbeddingIndex,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int = 64,
) -> str:
    """Most similar occupation title; no threshold, ties to the lowest occ id."""
    vec = enc.encode_texts([title], params, vocab, max_len)[0]
    return title_index.top1(vec)


def assign_occupations(
    titles: Sequence[str],
    title_index: EmbeddingIndex,
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int = 64,
) -> list[str]:
    """Batched occupation assignment for many posting titles."""
    if not titles:
        return []
    vectors = enc.encode_texts(list(titles), params, vocab, max_len)
    return [title_index.top1(vec) for vec in vectors]


def forward_looking_sets(
    baseline_old: BaselineSkillMap,
    baseline_new: BaselineSkillMap,
) -> tuple[dict[str, frozenset[str]], dict[str, str]]:
    """Per occupation: skills linked in the new version but not the old.

    Occupations missing from either map get an error entry instead of a set;
    the rest proceed.
    """
    sets: dict[str, frozenset[str]] = {}
    errors: dict[str, str] = {}
    for occ_id in sorted(set(baseline_old.sets) | set(baseline_new.sets)):
        if occ_id not in baseline_old.sets:
            errors[occ_id] = "missing from the old baseline map"
        elif occ_id not in baseline_new.sets:
            errors[occ_id] = "missing from the new baseline map"
        else:
            sets[occ_id] = frozenset(baseline_new.sets[occ_id] - baseline_old.sets[occ_id])
    return sets, errors


# --- version-to-version stability --------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    """Share of occupations unchanged between two taxonomy versions."""

    kind: str  # "occupation-list" | "task-sets"
    stability: float
    compared: int
    unchanged: int
    changed_tasks: tuple[tuple[str, int], ...] = ()

    def to_text(self) -> str:
        lines = [
            f"kind={self.kind}",
            f"stability={self.stability!r}",
            f"compared={self.compared}",
            f"unchanged={self.unchanged}",
        ]
        for occ_id, n in self.changed_tasks:
            lines.append(f"changed\t{occ_id}\t{n}")
        return "\n".join(lines) + "\n"


def taxonomy_stability(
    version_a: OccupationTaxonomy,
    version_b: OccupationTaxonomy,
    kind: str = "occupation-list",
) -> StabilityReport:
    """Stability of version_b relative to version_a.

    occupation-list: share of version_a's occupation ids that persist in
    version_b with an identical title.
    task-sets: over id-matched occupations, share whose task text sets are
    exactly equal; changed occupations are ranked by the size of the
    symmetric difference, descending.
    """
    if kind == "occupation-list":
        ids_a = version_a.occupations
        compared = len(ids_a)
        unchanged = sum(
            1
            for occ_id, occ in ids_a.items()
            if occ_id in version_b.occupations
            and version_b.occupations[occ_id].title == occ.title
        )
        return StabilityReport(
            kind=kind,
            stability=unchanged / compared if compared else 1.0,
            compared=compared,
            unchanged=unchanged,
        )
    if kind == "task-sets":
        matched = sorted(set(version_a.occupations) & set(version_b.occupations))
        unchanged = 0
        changed: list[tuple[str, int]] = []
        for occ_id in matched:
            set_a = set(version_a.occupations[occ_id].tasks)
            set_b = set(version_b.occupations[occ_id].tasks)
            if set_a == set_b:
                unchanged += 1
            else:
                changed.append((occ_id, len(set_a ^ set_b)))
        changed.sort(key=lambda item: (-item[1], item[0]))
        return StabilityReport(
            kind=kind,
            stability=unchanged / len(matched) if matched else 1.0,
            compared=len(matched),
            unchanged=unchanged,
            changed_tasks=tuple(changed),
        )
    raise ValueError(f"unknown stability kind {kind!r}")
