"""Contrastive fine-tuning of the hashing bi-encoder.

Per triplet (q, d+, d-...) the loss is InfoNCE over similarity scores s
at temperature tau:

    L = -ln( exp(s+/tau) / (exp(s+/tau) + sum_i exp(s_i-/tau)) )

computed through a shifted log-sum-exp so score uniformity gives exactly
ln(N+1). Scores come from the selected scoring mode; gradients flow back
through normalization, projection, and the embedding lookup analytically
(`encoder.encode_backward`), and `gradient_check` verifies them against
central finite differences.

Optimization is plain Adam (beta1 0.9, beta2 0.999, eps 1e-8) over the
embedding table and projection matrix, with a seeded shuffle each epoch
and the positives of other in-batch queries added as extra negatives.
Gradients are reduced in triplet index order so runs are reproducible.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .corpus import DocumentCollection, Qrels, Query, QuerySet
from .encoder import (
    EncodedText,
    EncoderParams,
    EncodingTape,
    ScoringMode,
    TokenCache,
    encode_backward,
    encode_forward,
    hash_subwords,
    make_params,
)
from .errors import NonFiniteLoss, NoPositives
from .lexical import AnalyzerConfig, BM25Params, InvertedIndex, analyze, bm25_search


@dataclass(frozen=True)
class TrainingTriplet:
    query: Query
    positive_doc_id: str
    negative_doc_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.negative_doc_ids) < 1:
            raise ValueError(f"triplet for {self.query.query_id}: no negatives")
        if self.positive_doc_id in self.negative_doc_ids:
            raise ValueError(
                f"triplet for {self.query.query_id}: positive listed as negative"
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    temperature: float = 0.05
    negatives_per_query: int = 4
    negative_source: str = "bm25_hard"  # "bm25_hard" | "random" | "mixed"
    seed: int = 0
    loss_mode: ScoringMode = ScoringMode.MULTI_VECTOR_MAXSIM

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negatives_per_query < 1:
            raise ValueError("negatives_per_query must be >= 1")
        if self.negative_source not in ("bm25_hard", "random", "mixed"):
            raise ValueError(f"unknown negative_source {self.negative_source!r}")
        if ScoringMode(self.loss_mode) == ScoringMode.RERANK:
            raise ValueError("rerank is not a trainable scoring mode")


@dataclass
class LossReport:
    epoch_mean_loss: list[float]
    epoch_grad_norm: list[float]
    final_version: str
    triplet_count: int


@dataclass
class TripletBuild:
    triplets: list[TrainingTriplet]
    skipped_queries: int


def build_triplets(
    queries: QuerySet,
    qrels: Qrels,
    coll: DocumentCollection,
    cfg: TrainConfig,
    index: InvertedIndex | None = None,
    bm25_params: BM25Params = BM25Params(),
) -> TripletBuild:
    """One triplet per (query, positive); negatives drawn per config.

    bm25_hard negatives are the top-scoring non-relevant documents for the
    query, backfilled with seeded random draws when the scan comes up
    short. Queries without a positive (or without any possible negative)
    are skipped and counted.
    """
    needs_index = cfg.negative_source in ("bm25_hard", "mixed")
    if needs_index and index is None:
        raise ValueError(f"negative_source {cfg.negative_source!r} requires an index")
    rng = random.Random(cfg.seed)
    all_ids = coll.doc_ids()
    triplets: list[TrainingTriplet] = []
    skipped = 0
    for q in queries:
        judged = qrels.get(q.query_id, {})
        positives = [d for d, g in judged.items() if g >= 1]
        nonrel = [d for d in all_ids if judged.get(d, 0) < 1]
        if not positives or not nonrel:
            skipped += 1
            continue
        hard: list[str] = []
        if needs_index:
            depth = cfg.negatives_per_query + len(positives) + 8
            ranking = bm25_search(q, index, bm25_params, k=depth)
            hard = [d for d, _ in ranking if judged.get(d, 0) < 1]
        for pos in positives:
            n = cfg.negatives_per_query
            if cfg.negative_source == "random":
                negs = rng.sample(nonrel, min(n, len(nonrel)))
            else:
                take = n if cfg.negative_source == "bm25_hard" else (n + 1) // 2
                negs = hard[:take]
                if len(negs) < n:
                    remaining = [d for d in nonrel if d not in set(negs)]
                    fill = min(n - len(negs), len(remaining))
                    if fill:
                        negs = negs + rng.sample(remaining, fill)
            triplets.append(TrainingTriplet(q, pos, tuple(negs)))
    if not triplets:
        raise NoPositives("no query yielded a training triplet")
    return TripletBuild(triplets, skipped)


class _Entity:
    """One text inside a batch: forward results plus gradient buffers."""

    __slots__ = ("tokens", "enc", "tape", "d_v", "d_p")

    def __init__(self, tokens: list[str], enc: EncodedText, tape: EncodingTape):
        self.tokens = tokens
        self.enc = enc
        self.tape = tape
        self.d_v: np.ndarray | None = None
        self.d_p: np.ndarray | None = None


def _score_pair(q: _Entity, d: _Entity, mode: ScoringMode) -> tuple[float, np.ndarray | None]:
    if mode == ScoringMode.SINGLE_VECTOR:
        return float(q.enc.pooled_vector @ d.enc.pooled_vector), None
    sims = q.enc.token_vectors @ d.enc.token_vectors.T
    am = sims.argmax(axis=1)
    score = float(sims[np.arange(sims.shape[0]), am].sum())
    return score, am


def _add_pair_grad(
    q: _Entity, d: _Entity, g: float, am: np.ndarray | None, mode: ScoringMode
) -> None:
    if mode == ScoringMode.SINGLE_VECTOR:
        if q.d_p is None:
            q.d_p = np.zeros_like(q.enc.pooled_vector)
        if d.d_p is None:
            d.d_p = np.zeros_like(d.enc.pooled_vector)
        q.d_p += g * d.enc.pooled_vector
        d.d_p += g * q.enc.pooled_vector
        return
    if q.d_v is None:
        q.d_v = np.zeros_like(q.enc.token_vectors)
    if d.d_v is None:
        d.d_v = np.zeros_like(d.enc.token_vectors)
    q.d_v += g * d.enc.token_vectors[am]
    np.add.at(d.d_v, am, g * q.enc.token_vectors)


def _infonce_from_scores(s_pos: float, s_negs: list[float], tau: float) -> tuple[float, np.ndarray]:
    """Loss and dL/ds for [positive, negatives], via shifted log-sum-exp."""
    z = np.concatenate(([s_pos], np.asarray(s_negs, dtype=np.float64))) / tau
    m = float(z.max())
    ex = np.exp(z - m)
    total = float(ex.sum())
    loss = (m - z[0]) + math.log(total)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss {loss} is not finite")
    g = ex / (total * tau)
    g[0] -= 1.0 / tau
    return loss, g


def infonce_loss(
    query_tokens: list[str],
    positive_tokens: list[str],
    negative_token_lists: list[list[str]],
    params: EncoderParams,
    temperature: float = 0.05,
    mode: ScoringMode = ScoringMode.MULTI_VECTOR_MAXSIM,
    cache: TokenCache | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss for one triplet plus gradients over all encoder parameters.

    Returns (loss, dL/dEmbedding, dL/dProjection); the gradient arrays
    match the shapes of the corresponding parameter matrices.
    """
    mode = ScoringMode(mode)
    if mode == ScoringMode.RERANK:
        raise ValueError("rerank is not a trainable scoring mode")
    if not negative_token_lists:
        raise ValueError("at least one negative is required")
    entities = [
        _Entity(toks, *encode_forward(toks, params, cache))
        for toks in [query_tokens, positive_tokens, *negative_token_lists]
    ]
    q, pos, negs = entities[0], entities[1], entities[2:]
    s_pos, am_pos = _score_pair(q, pos, mode)
    records = [(pos, am_pos)]
    s_negs = []
    for ent in negs:
        s, am = _score_pair(q, ent, mode)
        s_negs.append(s)
        records.append((ent, am))
    loss, g = _infonce_from_scores(s_pos, s_negs, temperature)
    for (ent, am), g_i in zip(records, g):
        _add_pair_grad(q, ent, float(g_i), am, mode)
    grad_e = np.zeros_like(params.embedding)
    grad_p = np.zeros_like(params.projection)
    for ent in entities:
        if ent.d_v is not None or ent.d_p is not None:
            encode_backward(ent.tape, ent.d_v, ent.d_p, params, grad_e, grad_p)
    return loss, grad_e, grad_p


def _prepare_texts(
    triplets: list[TrainingTriplet],
    coll: DocumentCollection,
    analyzer: AnalyzerConfig,
) -> tuple[list[list[str]], dict[str, list[str]]]:
    """Analyze every query and referenced document once."""
    doc_tokens: dict[str, list[str]] = {}
    query_tokens: list[list[str]] = []
    for tri in triplets:
        query_tokens.append(analyze(tri.query.text, analyzer))
        for doc_id in (tri.positive_doc_id, *tri.negative_doc_ids):
            if doc_id not in doc_tokens:
                doc_tokens[doc_id] = analyze(coll.get(doc_id).text, analyzer)
    return query_tokens, doc_tokens


def train(
    init: EncoderParams,
    triplets: list[TrainingTriplet],
    coll: DocumentCollection,
    cfg: TrainConfig,
    analyzer: AnalyzerConfig = AnalyzerConfig(),
) -> tuple[EncoderParams, LossReport]:
    """Adam over InfoNCE batches; returns new params, never mutating `init`.

    Same seed and inputs reproduce the returned parameters bit for bit.
    """
    if not triplets:
        raise NoPositives("cannot train on an empty triplet list")
    mode = ScoringMode(cfg.loss_mode)
    query_tokens, doc_tokens = _prepare_texts(triplets, coll, analyzer)

    emb = init.embedding.copy()
    proj = init.projection.copy()
    m_emb = np.zeros_like(emb)
    v_emb = np.zeros_like(emb)
    m_proj = np.zeros_like(proj)
    v_proj = np.zeros_like(proj)
    grad_e = np.zeros_like(emb)
    grad_p = np.zeros_like(proj)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    rng = np.random.default_rng(cfg.seed)
    n = len(triplets)
    epoch_mean_loss: list[float] = []
    epoch_grad_norm: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        norm_sum = 0.0
        batch_count = 0
        for start in range(0, n, cfg.batch_size):
            batch = [triplets[i] for i in order[start : start + cfg.batch_size]]
            batch_qtok = [query_tokens[i] for i in order[start : start + cfg.batch_size]]
            cur = EncoderParams(emb, proj, init.hasher, init.seed, "<training>")
            cache: TokenCache = {}
            entities: dict[tuple[str, object], _Entity] = {}

            def entity(key: tuple[str, object], tokens: list[str]) -> _Entity:
                ent = entities.get(key)
                if ent is None:
                    ent = _Entity(tokens, *encode_forward(tokens, cur, cache))
                    entities[key] = ent
                return ent

            grad_e.fill(0.0)
            grad_p.fill(0.0)
            scale = 1.0 / len(batch)
            for b_i, tri in enumerate(batch):
                q_ent = entity(("q", b_i), batch_qtok[b_i])
                neg_ids = list(tri.negative_doc_ids)
                seen = set(neg_ids) | {tri.positive_doc_id}
                for other in batch:
                    pid = other.positive_doc_id
                    if pid not in seen:
                        neg_ids.append(pid)
                        seen.add(pid)
                pos_ent = entity(("d", tri.positive_doc_id), doc_tokens[tri.positive_doc_id])
                s_pos, am_pos = _score_pair(q_ent, pos_ent, mode)
                records = [(pos_ent, am_pos)]
                s_negs = []
                for doc_id in neg_ids:
                    ent = entity(("d", doc_id), doc_tokens[doc_id])
                    s, am = _score_pair(q_ent, ent, mode)
                    s_negs.append(s)
                    records.append((ent, am))
                try:
                    loss, g = _infonce_from_scores(s_pos, s_negs, cfg.temperature)
                except NonFiniteLoss as e:
                    raise NonFiniteLoss(f"epoch {epoch}, batch {batch_count}: {e}") from e
                loss_sum += loss
                for (ent, am), g_i in zip(records, g):
                    _add_pair_grad(q_ent, ent, float(g_i) * scale, am, mode)
            for ent in entities.values():
                if ent.d_v is not None or ent.d_p is not None:
                    encode_backward(ent.tape, ent.d_v, ent.d_p, cur, grad_e, grad_p)
            norm_sum += math.sqrt(float((grad_e * grad_e).sum()) + float((grad_p * grad_p).sum()))
            batch_count += 1
            step += 1
            for theta, g_arr, m_arr, v_arr in (
                (emb, grad_e, m_emb, v_emb),
                (proj, grad_p, m_proj, v_proj),
            ):
                m_arr *= beta1
                m_arr += (1.0 - beta1) * g_arr
                v_arr *= beta2
                v_arr += (1.0 - beta2) * g_arr * g_arr
                m_hat = m_arr / (1.0 - beta1**step)
                v_hat = v_arr / (1.0 - beta2**step)
                theta -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + adam_eps)
        epoch_mean_loss.append(loss_sum / n)
        epoch_grad_norm.append(norm_sum / batch_count)
    final = make_params(emb, proj, init.hasher, init.seed)
    report = LossReport(epoch_mean_loss, epoch_grad_norm, final.version, n)
    return final, report


def _relative_error(a: float, b: float) -> float:
    if a == 0.0 and b == 0.0:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def gradient_check(
    params: EncoderParams,
    triplets: list[TrainingTriplet],
    coll: DocumentCollection,
    eps: float = 1e-4,
    coordinates: int = 100,
    mode: ScoringMode = ScoringMode.MULTI_VECTOR_MAXSIM,
    temperature: float = 0.05,
    seed: int = 0,
    analyzer: AnalyzerConfig = AnalyzerConfig(),
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled over the projection matrix and the embedding
    rows the triplets actually touch; a coordinate where both sides are
    exactly zero contributes zero error.
    """
    if not triplets:
        raise NoPositives("gradient check needs at least one triplet")
    mode = ScoringMode(mode)
    query_tokens, doc_tokens = _prepare_texts(triplets, coll, analyzer)
    prepared = [
        (
            query_tokens[i],
            doc_tokens[tri.positive_doc_id],
            [doc_tokens[d] for d in tri.negative_doc_ids],
        )
        for i, tri in enumerate(triplets)
    ]

    grad_e = np.zeros_like(params.embedding)
    grad_p = np.zeros_like(params.projection)
    for q_tok, p_tok, n_toks in prepared:
        _, g_e, g_p = infonce_loss(q_tok, p_tok, n_toks, params, temperature, mode)
        grad_e += g_e
        grad_p += g_p

    emb = params.embedding.copy()
    proj = params.projection.copy()

    def total_loss() -> float:
        par = EncoderParams(emb, proj, params.hasher, params.seed, "<fd>")
        cache: TokenCache = {}
        total = 0.0
        for q_tok, p_tok, n_toks in prepared:
            q = _Entity(q_tok, *encode_forward(q_tok, par, cache))
            pos = _Entity(p_tok, *encode_forward(p_tok, par, cache))
            s_pos, _ = _score_pair(q, pos, mode)
            s_negs = []
            for toks in n_toks:
                ent = _Entity(toks, *encode_forward(toks, par, cache))
                s, _ = _score_pair(q, ent, mode)
                s_negs.append(s)
            loss, _ = _infonce_from_scores(s_pos, s_negs, temperature)
            total += loss
        return total

    all_token_lists = (
        [q for q, _, _ in prepared]
        + [p for _, p, _ in prepared]
        + [t for _, _, ns in prepared for t in ns]
    )
    touched = sorted(
        {
            b
            for toks in all_token_lists
            for tok in toks
            for b in hash_subwords(tok, params.hasher)
        }
    )
    dim = params.dim
    pool: list[tuple[str, int, int]] = [
        ("P", i, j) for i in range(dim) for j in range(dim)
    ] + [("E", b, j) for b in touched for j in range(dim)]
    rng = np.random.default_rng(seed)
    count = min(coordinates, len(pool))
    chosen = rng.choice(len(pool), size=count, replace=False)
    worst = 0.0
    for c in chosen:
        kind, i, j = pool[int(c)]
        target = proj if kind == "P" else emb
        analytic = grad_p[i, j] if kind == "P" else grad_e[i, j]
        original = target[i, j]
        target[i, j] = original + eps
        up = total_loss()
        target[i, j] = original - eps
        down = total_loss()
        target[i, j] = original
        fd = (up - down) / (2.0 * eps)
        worst = max(worst, _relative_error(float(analytic), fd))
    return worst
