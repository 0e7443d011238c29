"""Shared fixtures: the synthetic data bundle, one full pipeline run, and a
small trained encoder.

The expensive fixtures are session-scoped so the pipeline and the training
loop each run once and are reused by the CLI, taxonomy, and acceptance
tests.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from skillpanel import cli
from skillpanel.corpus import SyntheticPair, generate_synthetic_pairs
from skillpanel.encoder import EncoderParams, Vocabulary
from skillpanel.fixtures import build_skill_taxonomies, generate_fixture
from skillpanel.taxonomy import EmbeddingIndex, SkillTaxonomy, build_skill_index
from skillpanel.trainer import TrainingConfig, skill_text, train_biencoder


@pytest.fixture(scope="session")
def bundle_config(tmp_path_factory) -> Path:
    """Config path of a freshly generated toy data bundle."""
    out = tmp_path_factory.mktemp("bundle")
    return generate_fixture(out, seed=7)


@dataclass(frozen=True)
class PipelineRun:
    config_path: Path
    cfg: cli.PipelineConfig
    workdir: Path
    elapsed: float


@pytest.fixture(scope="session")
def pipeline(bundle_config: Path) -> PipelineRun:
    """One complete `all` run over the bundle; reused wherever possible."""
    start = time.perf_counter()
    code = cli.main(["all", "--config", str(bundle_config)])
    elapsed = time.perf_counter() - start
    assert code == cli.EXIT_OK, "pipeline run failed"
    cfg = cli.PipelineConfig.from_ini(bundle_config)
    return PipelineRun(bundle_config, cfg, cfg.workdir, elapsed)


@dataclass(frozen=True)
class TrainedModel:
    taxonomy: SkillTaxonomy
    pairs: list[SyntheticPair]
    vocab: Vocabulary
    params: EncoderParams
    trace: list[float]
    index: EmbeddingIndex
    train_seconds: float


@pytest.fixture(scope="session")
def trained_model() -> TrainedModel:
    """Bi-encoder trained on the bundled 50-skill synthetic corpus."""
    taxonomy, _ = build_skill_taxonomies()
    pairs = generate_synthetic_pairs(taxonomy, per_level=6, seed=7)
    texts = [p.sentence for p in pairs] + [
        skill_text(s.label, s.description) for s in taxonomy.skills.values()
    ]
    vocab = Vocabulary.build(texts)
    start = time.perf_counter()
    params, trace = train_biencoder(
        pairs, taxonomy, vocab, TrainingConfig(epochs=12, seed=7)
    )
    train_seconds = time.perf_counter() - start
    index = build_skill_index(taxonomy, params, vocab)
    return TrainedModel(taxonomy, list(pairs), vocab, params, trace, index, train_seconds)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
