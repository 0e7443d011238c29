"""Character-level text encoder mapping sentences onto the unit sphere.

Pipeline: token embedding lookup -> bidirectional LSTM -> additive attention
pooling -> linear projection -> L2 normalization. Everything runs in float64
numpy with explicit forward caches so the analytic backward pass can be
checked coordinate-by-coordinate against central finite differences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .textproc import normalize_text

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

INIT_SCALE = 0.08  # uniform[-0.08, 0.08] init
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Parameter or input tensors disagree on dimensions."""


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id map over corpus characters plus frequent character bigrams.

    Ids 0 and 1 are reserved for padding and unknown. Unseen characters map
    to the unknown id at tokenize time.
    """

    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def bigrams(self) -> frozenset[str]:
        return frozenset(t for t in self.token_to_id if len(t) == 2)

    @classmethod
    def build(
        cls,
        texts: Iterable[str],
        max_bigrams: int = 512,
        min_count: int = 2,
    ) -> "Vocabulary":
        """Collect all characters and the most frequent bigrams.

        Bigrams are selected by descending count (ties by token) subject to
        min_count, capped at max_bigrams; ids are assigned in lexicographic
        order after the reserved and character ids.
        """
        char_counts: dict[str, int] = {}
        bigram_counts: dict[str, int] = {}
        for text in texts:
            norm = normalize_text(text)
            for ch in norm:
                char_counts[ch] = char_counts.get(ch, 0) + 1
            for i in range(len(norm) - 1):
                bg = norm[i : i + 2]
                bigram_counts[bg] = bigram_counts.get(bg, 0) + 1
        selected = sorted(
            (bg for bg, c in bigram_counts.items() if c >= min_count),
            key=lambda bg: (-bigram_counts[bg], bg),
        )[:max_bigrams]
        tokens = [PAD_TOKEN, UNK_TOKEN] + sorted(char_counts) + sorted(selected)
        return cls(token_to_id={t: i for i, t in enumerate(tokens)})


def tokenize(text: str, vocab: Vocabulary, max_len: int = 64) -> tuple[np.ndarray, int]:
    """Greedy bigram-first tokenization to a fixed-width id row.

    Returns (ids, length) where ids has shape (max_len,), padding fills the
    suffix, and length >= 1. Empty text maps to a single unknown token.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    norm = normalize_text(text)
    ids = np.zeros(max_len, dtype=np.int64)
    if not norm:
        ids[0] = UNK_ID
        return ids, 1
    bigrams = vocab.bigrams
    lookup = vocab.token_to_id
    pos = 0
    count = 0
    while pos < len(norm) and count < max_len:
        pair = norm[pos : pos + 2]
        if len(pair) == 2 and pair in bigrams:
            ids[count] = lookup[pair]
            pos += 2
        else:
            ids[count] = lookup.get(norm[pos], UNK_ID)
            pos += 1
        count += 1
    return ids, count


def tokenize_batch(
    texts: Sequence[str], vocab: Vocabulary, max_len: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    ids = np.zeros((len(texts), max_len), dtype=np.int64)
    lengths = np.zeros(len(texts), dtype=np.int64)
    for i, text in enumerate(texts):
        ids[i], lengths[i] = tokenize(text, vocab, max_len)
    return ids, lengths


@dataclass
class LstmWeights:
    """Stacked-gate LSTM weights: rows ordered input, forget, cell, output."""

    wx: np.ndarray  # (4u, e)
    wh: np.ndarray  # (4u, u)
    bias: np.ndarray  # (4u,)


@dataclass
class EncoderParams:
    """All trainable tensors for the encoder."""

    embedding: np.ndarray  # (V, e)
    fwd: LstmWeights
    bwd: LstmWeights
    attn_w: np.ndarray  # (a, 2u)
    attn_b: np.ndarray  # (a,)
    attn_v: np.ndarray  # (a,)
    proj_w: np.ndarray  # (m, 2u)
    proj_b: np.ndarray  # (m,)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def lstm_dim(self) -> int:
        return self.fwd.wh.shape[1]

    @property
    def attn_dim(self) -> int:
        return self.attn_w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.proj_w.shape[0]

    @classmethod
    def initialize(
        cls,
        vocab_size: int,
        embed_dim: int = 64,
        lstm_dim: int = 64,
        attn_dim: int = 64,
        out_dim: int = 128,
        seed: int = 0,
    ) -> "EncoderParams":
        if min(vocab_size, embed_dim, lstm_dim, attn_dim, out_dim) < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        rng = np.random.default_rng(seed)

        def u(*shape: int) -> np.ndarray:
            return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

        def lstm() -> LstmWeights:
            return LstmWeights(
                wx=u(4 * lstm_dim, embed_dim),
                wh=u(4 * lstm_dim, lstm_dim),
                bias=u(4 * lstm_dim),
            )

        return cls(
            embedding=u(vocab_size, embed_dim),
            fwd=lstm(),
            bwd=lstm(),
            attn_w=u(attn_dim, 2 * lstm_dim),
            attn_b=u(attn_dim),
            attn_v=u(attn_dim),
            proj_w=u(out_dim, 2 * lstm_dim),
            proj_b=u(out_dim),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of every trainable tensor, in a fixed order."""
        return {
            "embedding": self.embedding,
            "fwd_wx": self.fwd.wx,
            "fwd_wh": self.fwd.wh,
            "fwd_bias": self.fwd.bias,
            "bwd_wx": self.bwd.wx,
            "bwd_wh": self.bwd.wh,
            "bwd_bias": self.bwd.bias,
            "attn_w": self.attn_w,
            "attn_b": self.attn_b,
            "attn_v": self.attn_v,
            "proj_w": self.proj_w,
            "proj_b": self.proj_b,
        }

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            embedding=self.embedding.copy(),
            fwd=LstmWeights(self.fwd.wx.copy(), self.fwd.wh.copy(), self.fwd.bias.copy()),
            bwd=LstmWeights(self.bwd.wx.copy(), self.bwd.wh.copy(), self.bwd.bias.copy()),
            attn_w=self.attn_w.copy(),
            attn_b=self.attn_b.copy(),
            attn_v=self.attn_v.copy(),
            proj_w=self.proj_w.copy(),
            proj_b=self.proj_b.copy(),
        )

    def validate(self) -> None:
        e, u, a, m = self.embed_dim, self.lstm_dim, self.attn_dim, self.out_dim
        expected = {
            "fwd_wx": (4 * u, e),
            "fwd_wh": (4 * u, u),
            "fwd_bias": (4 * u,),
            "bwd_wx": (4 * u, e),
            "bwd_wh": (4 * u, u),
            "bwd_bias": (4 * u,),
            "attn_w": (a, 2 * u),
            "attn_b": (a,),
            "attn_v": (a,),
            "proj_w": (m, 2 * u),
            "proj_b": (m,),
        }
        arrays = self.arrays()
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeError(
                    f"tensor {name} has shape {arrays[name].shape}, expected {shape}"
                )


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays().items()}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _LstmCache:
    gates: np.ndarray  # (L, n, 4u) post-activation [i, f, g, o]
    c_prev: np.ndarray  # (L, n, u) carry before the step
    h_prev: np.ndarray  # (L, n, u)
    tanh_c: np.ndarray  # (L, n, u) tanh of the new cell state
    outputs: np.ndarray  # (n, L, u) post-mask hidden states


@dataclass
class EncodeCache:
    ids: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray  # (n, L) float 0/1
    H: np.ndarray  # (n, L, e) embedded inputs
    fwd: _LstmCache
    bwd: _LstmCache
    O: np.ndarray  # (n, L, 2u)
    attn_u: np.ndarray  # (n, L, a)
    alpha: np.ndarray  # (n, L)
    context: np.ndarray  # (n, 2u)
    raw: np.ndarray  # (n, m) pre-normalization projection
    norms: np.ndarray  # (n,)
    embeddings: np.ndarray  # (n, m)


@dataclass
class EncodedBatch:
    embeddings: np.ndarray  # (n, m) unit rows
    contexts: np.ndarray  # (n, 2u) attention pooling output
    attention: np.ndarray  # (n, L) weights, zero over padding
    cache: EncodeCache | None = None


def _run_lstm(
    H: np.ndarray,
    mask: np.ndarray,
    weights: LstmWeights,
    reverse: bool,
) -> _LstmCache:
    n, L, _ = H.shape
    u = weights.wh.shape[1]
    x_proj = H @ weights.wx.T + weights.bias  # (n, L, 4u)
    h = np.zeros((n, u))
    c = np.zeros((n, u))
    gates = np.zeros((L, n, 4 * u))
    c_prev = np.zeros((L, n, u))
    h_prev = np.zeros((L, n, u))
    tanh_c = np.zeros((L, n, u))
    outputs = np.zeros((n, L, u))
    order = range(L - 1, -1, -1) if reverse else range(L)
    for t in order:
        m = mask[:, t : t + 1]
        pre = x_proj[:, t] + h @ weights.wh.T
        i = _sigmoid(pre[:, :u])
        f = _sigmoid(pre[:, u : 2 * u])
        g = np.tanh(pre[:, 2 * u : 3 * u])
        o = _sigmoid(pre[:, 3 * u :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        gates[t] = np.concatenate([i, f, g, o], axis=1)
        c_prev[t] = c
        h_prev[t] = h
        tanh_c[t] = tc
        # Padded rows carry state through unchanged.
        c = m * c_new + (1.0 - m) * c
        h = m * h_new + (1.0 - m) * h
        outputs[:, t] = h
    return _LstmCache(gates=gates, c_prev=c_prev, h_prev=h_prev, tanh_c=tanh_c, outputs=outputs)


def _lstm_backward(
    d_out: np.ndarray,
    cache: _LstmCache,
    H: np.ndarray,
    mask: np.ndarray,
    weights: LstmWeights,
    reverse: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backprop through time for one direction.

    d_out: (n, L, u) gradient w.r.t. the post-mask hidden states.
    Returns (dH, d_wx, d_wh, d_bias).
    """
    n, L, _ = H.shape
    u = weights.wh.shape[1]
    d_wx = np.zeros_like(weights.wx)
    d_wh = np.zeros_like(weights.wh)
    d_bias = np.zeros_like(weights.bias)
    dH = np.zeros_like(H)
    dh_carry = np.zeros((n, u))
    dc_carry = np.zeros((n, u))
    order = range(L) if reverse else range(L - 1, -1, -1)
    for t in order:
        m = mask[:, t : t + 1]
        gates = cache.gates[t]
        i, f = gates[:, :u], gates[:, u : 2 * u]
        g, o = gates[:, 2 * u : 3 * u], gates[:, 3 * u :]
        tc = cache.tanh_c[t]
        dh_total = d_out[:, t] + dh_carry
        dh_new = m * dh_total
        dc_new = m * dc_carry + dh_new * o * (1.0 - tc * tc)
        do = dh_new * tc
        di = dc_new * g
        df = dc_new * cache.c_prev[t]
        dg = dc_new * i
        d_pre = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        d_wx += d_pre.T @ H[:, t]
        d_wh += d_pre.T @ cache.h_prev[t]
        d_bias += d_pre.sum(axis=0)
        dH[:, t] = d_pre @ weights.wx
        dh_carry = d_pre @ weights.wh + (1.0 - m) * dh_total
        dc_carry = dc_new * f + (1.0 - m) * dc_carry
    return dH, d_wx, d_wh, d_bias


def encode_batch(
    ids: np.ndarray,
    params: EncoderParams,
    with_cache: bool = False,
) -> EncodedBatch:
    """Encode a batch of fixed-width id rows into unit-norm embeddings.

    ids: (n, L) int array, pad id 0 filling the suffix of each row; every
    row must contain at least one non-pad token. Attention weights are
    masked over padding and renormalized, so padding never contributes to
    the pooled context.
    """
    params.validate()
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"tensor ids has shape {ids.shape}, expected (n, L)")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise ShapeError("tensor ids holds values outside the vocabulary")
    lengths = (ids != PAD_ID).sum(axis=1)
    if (lengths < 1).any():
        raise ValueError("every row must contain at least one non-pad token")
    n, L = ids.shape
    mask = (ids != PAD_ID).astype(np.float64)

    H = params.embedding[ids]  # (n, L, e)
    fwd = _run_lstm(H, mask, params.fwd, reverse=False)
    bwd = _run_lstm(H, mask, params.bwd, reverse=True)
    O = np.concatenate([fwd.outputs, bwd.outputs], axis=2)  # (n, L, 2u)

    attn_u = np.tanh(O @ params.attn_w.T + params.attn_b)  # (n, L, a)
    scores = attn_u @ params.attn_v  # (n, L)
    neg = np.where(mask > 0, scores, -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)
    exp = np.where(mask > 0, np.exp(shifted), 0.0)
    alpha = exp / exp.sum(axis=1, keepdims=True)  # (n, L)

    context = np.einsum("nl,nld->nd", alpha, O)  # (n, 2u)
    raw = context @ params.proj_w.T + params.proj_b  # (n, m)
    norms = np.linalg.norm(raw, axis=1)
    if (norms < 1e-12).any():
        raise ValueError("projection produced a near-zero vector; cannot normalize")
    embeddings = raw / norms[:, None]

    cache = None
    if with_cache:
        cache = EncodeCache(
            ids=ids,
            lengths=lengths,
            mask=mask,
            H=H,
            fwd=fwd,
            bwd=bwd,
            O=O,
            attn_u=attn_u,
            alpha=alpha,
            context=context,
            raw=raw,
            norms=norms,
            embeddings=embeddings,
        )
    return EncodedBatch(
        embeddings=embeddings, contexts=context, attention=alpha, cache=cache
    )


def encode(ids: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Encode a single id row into a unit-norm embedding vector."""
    return encode_batch(np.asarray(ids)[None, :], params).embeddings[0]


def encode_texts(
    texts: Sequence[str],
    params: EncoderParams,
    vocab: Vocabulary,
    max_len: int = 64,
    batch_size: int = 256,
) -> np.ndarray:
    """Convenience wrapper: tokenize and encode texts in batches."""
    if not texts:
        return np.zeros((0, params.out_dim))
    ids, _ = tokenize_batch(texts, vocab, max_len)
    chunks = [
        encode_batch(ids[i : i + batch_size], params).embeddings
        for i in range(0, len(texts), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def encode_backward(
    d_embeddings: np.ndarray,
    cache: EncodeCache,
    params: EncoderParams,
) -> dict[str, np.ndarray]:
    """Analytic gradients of every parameter given d(loss)/d(embeddings)."""
    grads = zero_grads(params)
    u = params.lstm_dim

    # L2 normalization: e = r / |r|.
    e = cache.embeddings
    inner = (d_embeddings * e).sum(axis=1, keepdims=True)
    d_raw = (d_embeddings - inner * e) / cache.norms[:, None]

    grads["proj_w"] += d_raw.T @ cache.context
    grads["proj_b"] += d_raw.sum(axis=0)
    d_context = d_raw @ params.proj_w  # (n, 2u)

    # Attention pooling: context = sum_t alpha_t O_t.
    d_alpha = np.einsum("nd,nld->nl", d_context, cache.O)
    d_O = cache.alpha[:, :, None] * d_context[:, None, :]
    # Softmax over valid positions.
    dot = (cache.alpha * d_alpha).sum(axis=1, keepdims=True)
    d_scores = cache.alpha * (d_alpha - dot)  # zero where alpha is zero
    grads["attn_v"] += np.einsum("nl,nla->a", d_scores, cache.attn_u)
    d_u = d_scores[:, :, None] * params.attn_v[None, None, :]
    d_pre_u = d_u * (1.0 - cache.attn_u**2)
    grads["attn_w"] += np.einsum("nla,nld->ad", d_pre_u, cache.O)
    grads["attn_b"] += d_pre_u.sum(axis=(0, 1))
    d_O += d_pre_u @ params.attn_w

    dH_f, dwx_f, dwh_f, dbias_f = _lstm_backward(
        d_O[:, :, :u], cache.fwd, cache.H, cache.mask, params.fwd, reverse=False
    )
    dH_b, dwx_b, dwh_b, dbias_b = _lstm_backward(
        d_O[:, :, u:], cache.bwd, cache.H, cache.mask, params.bwd, reverse=True
    )
    grads["fwd_wx"] += dwx_f
    grads["fwd_wh"] += dwh_f
    grads["fwd_bias"] += dbias_f
    grads["bwd_wx"] += dwx_b
    grads["bwd_wh"] += dwh_b
    grads["bwd_bias"] += dbias_b

    dH = dH_f + dH_b
    np.add.at(grads["embedding"], cache.ids, dH)
    return grads


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity with exact +/-1.0 for identical or negated inputs."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"tensor v has shape {v.shape}, expected {u.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise ValueError("cosine similarity undefined for zero vectors")
    if np.array_equal(u, v):
        return 1.0
    if np.array_equal(u, -v):
        return -1.0
    return float(u @ v / (nu * nv))


def grad_check(
    params: EncoderParams,
    batch: Sequence[tuple[np.ndarray, Sequence[np.ndarray], Sequence[np.ndarray]]],
    epsilon: float = 1e-5,
    margin: float = 0.5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic loss gradients against central finite differences.

    batch: samples of (sentence_ids, positive_ids_list, negative_ids_list),
    each an id row of equal width. Samples max_coords coordinates across all
    parameter tensors and returns the maximum relative error
    |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
    """
    from .trainer import batch_loss_and_grads  # deferred: avoids an import cycle

    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    _, grads = batch_loss_and_grads(params, batch, margin)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite analytic gradient in {name}")

    names = list(params.arrays())
    sizes = [params.arrays()[k].size for k in names]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(max_coords, total), replace=False)

    arrays = params.arrays()
    worst = 0.0
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(int(flat - offsets[k]), arrays[name].shape)
        original = arrays[name][idx]
        arrays[name][idx] = original + epsilon
        loss_plus, _ = batch_loss_and_grads(params, batch, margin, need_grads=False)
        arrays[name][idx] = original - epsilon
        loss_minus, _ = batch_loss_and_grads(params, batch, margin, need_grads=False)
        arrays[name][idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        analytic = grads[name][idx]
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, rel)
    return worst


def save_checkpoint(
    path: str | Path, params: EncoderParams, vocab: Vocabulary
) -> None:
    """Persist parameters and vocabulary; float64 tensors round-trip bit-exactly."""
    tokens = sorted(vocab.token_to_id, key=vocab.token_to_id.get)
    np.savez(
        path,
        format_version=np.array(CHECKPOINT_VERSION, dtype=np.int64),
        vocab_json=np.array(json.dumps(tokens, ensure_ascii=False)),
        **params.arrays(),
    )


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, Vocabulary]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tokens = json.loads(str(data["vocab_json"]))
        params = EncoderParams(
            embedding=data["embedding"],
            fwd=LstmWeights(data["fwd_wx"], data["fwd_wh"], data["fwd_bias"]),
            bwd=LstmWeights(data["bwd_wx"], data["bwd_wh"], data["bwd_bias"]),
            attn_w=data["attn_w"],
            attn_b=data["attn_b"],
            attn_v=data["attn_v"],
            proj_w=data["proj_w"],
            proj_b=data["proj_b"],
        )
    params.validate()
    vocab = Vocabulary(token_to_id={t: i for i, t in enumerate(tokens)})
    return params, vocab
