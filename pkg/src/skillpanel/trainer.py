"""Contrastive training for the bi-encoder, the sentence pre-screener, and
retrieval evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import encoder as enc
from .corpus import SyntheticPair

if TYPE_CHECKING:
    from .taxonomy import EmbeddingIndex, SkillTaxonomy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    """Knobs for contrastive bi-encoder training.

    Negatives are re-sampled every epoch from a per-epoch RNG derived from
    (seed, epoch), so runs with the same config and seed are identical.
    """

    margin: float = 0.5
    negatives: int = 5
    batch_size: int = 32
    epochs: int = 25
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    max_len: int = 64
    seed: int = 0


@dataclass(frozen=True)
class MetricsReport:
    """Retrieval quality summary over a query set."""

    mrr: float
    recall_at_5: float
    query_count: int

    def to_text(self) -> str:
        return (
            f"mrr={self.mrr!r}\n"
            f"recall_at_5={self.recall_at_5!r}\n"
            f"q={self.query_count}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        fields = dict(
            line.split("=", 1) for line in text.splitlines() if "=" in line
        )
        return cls(
            mrr=float(fields["mrr"]),
            recall_at_5=float(fields["recall_at_5"]),
            query_count=int(fields["q"]),
        )


def contrastive_loss(
    sentence_embs: np.ndarray,
    positives: Sequence[np.ndarray],
    negatives: Sequence[np.ndarray],
    margin: float = 0.5,
) -> tuple[float, np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Margin contrastive loss over a batch of embedded samples.

    Per sample: mean over positives of (1 - s.p) plus mean over negatives of
    max(0, s.n - margin); the batch loss is the sample mean. Gradients are
    returned for the sentence matrix and each positive/negative stack. The
    gradient w.r.t. a negative is exactly zero whenever its similarity does
    not exceed the margin.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    sentence_embs = np.asarray(sentence_embs, dtype=np.float64)
    B = sentence_embs.shape[0]
    if not (B == len(positives) == len(negatives)):
        raise ValueError("batch size mismatch between sentences and labels")
    loss = 0.0
    d_sent = np.zeros_like(sentence_embs)
    d_pos: list[np.ndarray] = []
    d_neg: list[np.ndarray] = []
    for i in range(B):
        s = sentence_embs[i]
        P = np.asarray(positives[i], dtype=np.float64)
        N = np.asarray(negatives[i], dtype=np.float64)
        if P.ndim != 2 or P.shape[0] < 1:
            raise ValueError(f"sample {i} needs at least one positive")
        if N.ndim != 2 or N.shape[0] < 1:
            raise ValueError(f"sample {i} needs at least one negative")
        pos_sims = P @ s
        loss_i = float(np.mean(1.0 - pos_sims))
        d_s = -P.mean(axis=0)
        d_p = np.tile(-s / P.shape[0], (P.shape[0], 1))
        neg_sims = N @ s
        slack = neg_sims - margin
        active = slack > 0
        loss_i += float(np.where(active, slack, 0.0).mean())
        d_s = d_s + (active[:, None] * N).sum(axis=0) / N.shape[0]
        d_n = np.where(active[:, None], s[None, :], 0.0) / N.shape[0]
        loss += loss_i / B
        d_sent[i] = d_s / B
        d_pos.append(d_p / B)
        d_neg.append(d_n / B)
    return loss, d_sent, d_pos, d_neg


def batch_loss_and_grads(
    params: enc.EncoderParams,
    samples: Sequence[tuple[np.ndarray, Sequence[np.ndarray], Sequence[np.ndarray]]],
    margin: float = 0.5,
    need_grads: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """End-to-end loss (and parameter gradients) for id-level samples.

    Each sample is (sentence_ids, positive id rows, negative id rows).
    Duplicate texts across the batch are encoded once; their loss gradients
    accumulate before the single backward pass.
    """
    row_of: dict[bytes, int] = {}
    rows: list[np.ndarray] = []

    def intern(ids: np.ndarray) -> int:
        key = ids.tobytes()
        if key not in row_of:
            row_of[key] = len(rows)
            rows.append(ids)
        return row_of[key]

    indexed = [
        (
            intern(np.asarray(s)),
            [intern(np.asarray(p)) for p in pos],
            [intern(np.asarray(n)) for n in neg],
        )
        for s, pos, neg in samples
    ]
    mat = np.stack(rows)
    batch = enc.encode_batch(mat, params, with_cache=need_grads)
    E = batch.embeddings

    sent = np.stack([E[i] for i, _, _ in indexed])
    positives = [E[p] for _, p, _ in indexed]
    negatives = [
        E[n] if n else np.zeros((0, E.shape[1])) for _, _, n in indexed
    ]
    loss, d_sent, d_pos, d_neg = contrastive_loss(sent, positives, negatives, margin)
    if not need_grads:
        return loss, None

    dE = np.zeros_like(E)
    for k, (si, pidx, nidx) in enumerate(indexed):
        dE[si] += d_sent[k]
        for j, pi in enumerate(pidx):
            dE[pi] += d_pos[k][j]
        for j, ni in enumerate(nidx):
            dE[ni] += d_neg[k][j]
    grads = enc.encode_backward(dE, batch.cache, params)
    return loss, grads


def sample_negatives(
    positive_sets: Sequence[Iterable[str]],
    skill_ids: Sequence[str],
    n: int,
    seed: int,
) -> list[list[str]]:
    """Uniform negatives without replacement, excluding each sample's positives."""
    rng = np.random.default_rng(seed)
    return _sample_negatives(positive_sets, list(skill_ids), n, rng)


def _sample_negatives(
    positive_sets: Sequence[Iterable[str]],
    skill_ids: list[str],
    n: int,
    rng: np.random.Generator,
) -> list[list[str]]:
    if n < 1:
        raise ValueError("need at least one negative per sample")
    out: list[list[str]] = []
    for positives in positive_sets:
        pos = set(positives)
        candidates = [s for s in skill_ids if s not in pos]
        if len(candidates) < n:
            raise ValueError(
                f"taxonomy too small: {len(candidates)} candidates for {n} negatives"
            )
        picks = rng.choice(len(candidates), size=n, replace=False)
        out.append([candidates[int(i)] for i in picks])
    return out


class _Adam:
    """Per-tensor first/second moment steps with bias correction."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in sorted(arrays):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            arrays[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def skill_text(label: str, description: str) -> str:
    """Skill-side encoder input: label joined with its description."""
    return f"{label}. {description}"


def train_biencoder(
    pairs: Sequence[SyntheticPair],
    taxonomy: "SkillTaxonomy",
    vocab: enc.Vocabulary,
    config: TrainingConfig = TrainingConfig(),
    init_params: enc.EncoderParams | None = None,
) -> tuple[enc.EncoderParams, list[float]]:
    """Train the shared-weight bi-encoder on (sentence, skill) pairs.

    Only split == "train" pairs are used. Returns the trained parameters and
    the per-epoch mean loss trace. Zero epochs returns an untouched copy of
    the initial parameters.
    """
    params = (
        init_params.copy()
        if init_params is not None
        else enc.EncoderParams.initialize(vocab.size, seed=config.seed)
    )
    params.validate()
    train = [p for p in pairs if p.split == "train"]
    if not train:
        raise ValueError("no training pairs after split filtering")
    skill_ids = sorted(taxonomy.skills)
    skill_rows = {
        sid: enc.tokenize(
            skill_text(taxonomy.skills[sid].label, taxonomy.skills[sid].description),
            vocab,
            config.max_len,
        )[0]
        for sid in skill_ids
    }
    sent_rows = [enc.tokenize(p.sentence, vocab, config.max_len)[0] for p in train]

    optimizer = _Adam(config.learning_rate)
    arrays = params.arrays()
    trace: list[float] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train))
        negatives = _sample_negatives(
            [{train[i].skill_id} for i in order], skill_ids, config.negatives, rng
        )
        epoch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            samples = [
                (
                    sent_rows[i],
                    [skill_rows[train[i].skill_id]],
                    [skill_rows[sid] for sid in negatives[start + k]],
                )
                for k, i in enumerate(chunk)
            ]
            loss, grads = batch_loss_and_grads(params, samples, config.margin)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {start // config.batch_size}"
                )
            clip_gradients(grads, config.clip_norm)
            optimizer.step(arrays, grads)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
        logger.info("epoch %d: mean loss %.6f", epoch, trace[-1])
    return params, trace


# --- sentence pre-screener -------------------------------------------------

@dataclass
class PrescreenerParams:
    """Logistic head over the encoder's attention context vector."""

    weights: np.ndarray  # (2u,)
    bias: float


@dataclass(frozen=True)
class PrescreenerConfig:
    learning_rate: float = 0.05
    epochs: int = 300
    max_len: int = 64


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def binary_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _contexts(
    texts: Sequence[str],
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int,
    batch_size: int = 256,
) -> np.ndarray:
    ids, _ = enc.tokenize_batch(texts, vocab, max_len)
    chunks = [
        enc.encode_batch(ids[i : i + batch_size], params).contexts
        for i in range(0, len(texts), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def train_prescreener(
    examples: Sequence[tuple[str, int]],
    encoder_params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    config: PrescreenerConfig = PrescreenerConfig(),
) -> PrescreenerParams:
    """Fit the binary keep/discard head on frozen-encoder contexts.

    Full-batch Adam from a zero init (deterministic, no RNG). Requires both
    classes to be present.
    """
    if not examples:
        raise ValueError("no training examples")
    labels = np.array([y for _, y in examples], dtype=np.float64)
    if set(np.unique(labels)) != {0.0, 1.0}:
        raise ValueError("prescreener training needs both classes present")
    X = _contexts([t for t, _ in examples], encoder_params, vocab, config.max_len)

    clf = PrescreenerParams(weights=np.zeros(X.shape[1]), bias=0.0)
    arrays = {"w": clf.weights, "b": np.zeros(1)}
    optimizer = _Adam(config.learning_rate)
    n = len(examples)
    for _ in range(config.epochs):
        z = X @ arrays["w"] + arrays["b"][0]
        p = _sigmoid(z)
        dz = (p - labels) / n
        grads = {"w": X.T @ dz, "b": np.array([dz.sum()])}
        optimizer.step(arrays, grads)
    clf.bias = float(arrays["b"][0])
    return clf


def prescreen_probabilities(
    sentences: Sequence[str],
    clf: PrescreenerParams,
    encoder_params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int = 64,
) -> np.ndarray:
    """Keep-probability per sentence: sigmoid over the context projection."""
    if not sentences:
        return np.zeros(0)
    X = _contexts(sentences, encoder_params, vocab, max_len)
    return _sigmoid(X @ clf.weights + clf.bias)


def prescreen(
    sentences: Sequence[str],
    clf: PrescreenerParams,
    encoder_params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    max_len: int = 64,
) -> list[str]:
    """Filter to sentences with keep-probability >= 0.5 (boundary kept), order preserved."""
    probs = prescreen_probabilities(sentences, clf, encoder_params, vocab, max_len)
    return [s for s, p in zip(sentences, probs) if p >= 0.5]


def save_prescreener(path: str | Path, clf: PrescreenerParams) -> None:
    np.savez(path, weights=clf.weights, bias=np.array(clf.bias))


def load_prescreener(path: str | Path) -> PrescreenerParams:
    with np.load(path, allow_pickle=False) as data:
        return PrescreenerParams(weights=data["weights"], bias=float(data["bias"]))


# --- retrieval evaluation ---------------------------------------------------

def metrics_from_ranks(ranks: Sequence[int]) -> MetricsReport:
    """MRR and recall@5 from 1-based ranks of the true label."""
    if not ranks:
        raise ValueError("no ranks to score")
    arr = np.asarray(ranks, dtype=np.float64)
    if (arr < 1).any():
        raise ValueError("ranks are 1-based")
    return MetricsReport(
        mrr=float(np.mean(1.0 / arr)),
        recall_at_5=float(np.mean(arr <= 5)),
        query_count=len(ranks),
    )


def retrieval_ranks(
    pairs: Sequence[SyntheticPair],
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    index: "EmbeddingIndex",
    max_len: int = 64,
) -> list[int]:
    """Rank of each pair's true skill among all indexed skills.

    Ranking is by descending similarity with ties broken by ascending skill
    id (index rows are stored in ascending id order).
    """
    if not pairs:
        raise ValueError("no evaluation pairs")
    position = {sid: i for i, sid in enumerate(index.ids)}
    missing = [p.skill_id for p in pairs if p.skill_id not in position]
    if missing:
        raise KeyError(f"pairs reference skills not in the index: {missing[:5]}")
    embs = enc.encode_texts([p.sentence for p in pairs], params, vocab, max_len)
    sims = embs @ index.vectors.T  # (Q, K)
    K = sims.shape[1]
    cols = np.arange(K)
    ranks: list[int] = []
    for q, pair in enumerate(pairs):
        pos = position[pair.skill_id]
        s_true = sims[q, pos]
        better = int((sims[q] > s_true).sum())
        tied_before = int(((sims[q] == s_true) & (cols < pos)).sum())
        ranks.append(1 + better + tied_before)
    return ranks


def evaluate_retrieval(
    pairs: Sequence[SyntheticPair],
    params: enc.EncoderParams,
    vocab: enc.Vocabulary,
    index: "EmbeddingIndex",
    max_len: int = 64,
) -> MetricsReport:
    """Score retrieval quality of the encoder against an embedded skill index."""
    return metrics_from_ranks(retrieval_ranks(pairs, params, vocab, index, max_len))
