"""Hashing bi-encoder: subword ids, token/pooled vectors, and dense search.

Tokens are decorated as "<token>" and decomposed into character n-grams of
lengths ngram_min..ngram_max; each n-gram is mapped to one of bucket_count
embedding rows with the 32-bit FNV-1a hash over its UTF-8 bytes. A token
vector is the L2-normalized projection of the mean of its subword rows;
the pooled vector is the L2-normalized mean of the pre-normalization token
vectors. All arithmetic is float64.

The forward pass can return an EncodingTape holding every intermediate,
and `encode_backward` pushes loss gradients from the token/pooled vectors
back onto the embedding table and projection matrix. Training and the
finite-difference gradient checks both build on this pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import DocumentCollection, Query, Ranking
from .errors import (
    DegenerateEmbedding,
    DimensionMismatch,
    EmptyCollection,
    EmptyText,
    EmptyToken,
    IoFailure,
    MalformedRecord,
    StaleEncodings,
    UnknownDocId,
)
from .lexical import AnalyzerConfig, analyze

_NORM_FLOOR = 1e-12

_FNV_OFFSET = 2166136261
_FNV_PRIME = 16777619
_MASK32 = 0xFFFFFFFF


class ScoringMode(str, Enum):
    SINGLE_VECTOR = "single_vector"
    MULTI_VECTOR_MAXSIM = "multi_vector_maxsim"
    RERANK = "rerank"


@dataclass(frozen=True)
class SubwordHasherConfig:
    ngram_min: int = 3
    ngram_max: int = 5
    bucket_count: int = 32768

    def __post_init__(self) -> None:
        if self.ngram_min < 1 or self.ngram_max < self.ngram_min:
            raise ValueError(
                f"bad n-gram range [{self.ngram_min}, {self.ngram_max}]"
            )
        if self.bucket_count < 2:
            raise ValueError(f"bucket_count {self.bucket_count} < 2")


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK32
    return h


_hash_cache: dict[tuple[str, SubwordHasherConfig], tuple[int, ...]] = {}


def hash_subwords(token: str, cfg: SubwordHasherConfig = SubwordHasherConfig()) -> list[int]:
    """Bucket ids (with multiplicity) for every n-gram of "<token>"."""
    if not token:
        raise EmptyToken("cannot hash an empty token")
    key = (token, cfg)
    cached = _hash_cache.get(key)
    if cached is None:
        decorated = f"<{token}>"
        ids: list[int] = []
        for n in range(cfg.ngram_min, cfg.ngram_max + 1):
            for i in range(len(decorated) - n + 1):
                ids.append(_fnv1a(decorated[i : i + n].encode("utf-8")) % cfg.bucket_count)
        cached = tuple(ids)
        _hash_cache[key] = cached
    return list(cached)


@dataclass(frozen=True)
class EncoderParams:
    """Embedding table (buckets x dim) and projection (dim x dim).

    `version` is a content digest; anything that changes scores changes it.
    """

    embedding: np.ndarray
    projection: np.ndarray
    hasher: SubwordHasherConfig
    seed: int
    version: str

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]


def _params_version(embedding: np.ndarray, projection: np.ndarray,
                    hasher: SubwordHasherConfig, seed: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(embedding).tobytes())
    h.update(np.ascontiguousarray(projection).tobytes())
    h.update(repr((hasher.ngram_min, hasher.ngram_max, hasher.bucket_count, seed)).encode())
    return h.hexdigest()[:16]


def make_params(embedding: np.ndarray, projection: np.ndarray,
                hasher: SubwordHasherConfig, seed: int) -> EncoderParams:
    """Assemble params from raw arrays, computing the content version and
    freezing the arrays against accidental mutation."""
    embedding = np.ascontiguousarray(embedding, dtype=np.float64)
    projection = np.ascontiguousarray(projection, dtype=np.float64)
    if embedding.ndim != 2 or projection.shape != (embedding.shape[1], embedding.shape[1]):
        raise DimensionMismatch(
            f"embedding {embedding.shape} incompatible with projection {projection.shape}"
        )
    embedding.setflags(write=False)
    projection.setflags(write=False)
    version = _params_version(embedding, projection, hasher, seed)
    return EncoderParams(embedding, projection, hasher, seed, version)


def init_params(
    dim: int = 64,
    hasher: SubwordHasherConfig = SubwordHasherConfig(),
    seed: int = 0,
) -> EncoderParams:
    """Seeded Gaussian embeddings with a near-identity projection."""
    if dim < 2:
        raise ValueError(f"dim {dim} < 2")
    rng = np.random.default_rng(seed)
    embedding = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(hasher.bucket_count, dim))
    projection = np.eye(dim) + rng.normal(0.0, 0.05, size=(dim, dim))
    return make_params(embedding, projection, hasher, seed)


@dataclass(frozen=True)
class EncodedText:
    token_vectors: np.ndarray  # (T, dim), unit rows
    pooled_vector: np.ndarray  # (dim,), unit

    @property
    def token_count(self) -> int:
        return self.token_vectors.shape[0]


@dataclass
class EncodingTape:
    """Forward intermediates for one text, consumed by encode_backward."""

    bucket_arrays: list[np.ndarray]  # per token, subword bucket ids
    e: np.ndarray          # (T, dim) subword means
    u: np.ndarray          # (T, dim) projected, pre-normalization
    u_norms: np.ndarray    # (T,)
    v: np.ndarray          # (T, dim) unit token vectors
    w: np.ndarray          # (dim,) mean of u rows
    w_norm: float
    p: np.ndarray          # (dim,) unit pooled vector


# Cache of per-token forward pieces keyed by (params.version, token); the
# pieces are reused verbatim so cached and uncached paths are bit-identical.
_TokenPiece = tuple[np.ndarray, np.ndarray, np.ndarray, float, np.ndarray]
TokenCache = dict[str, _TokenPiece]


def _token_forward(token: str, params: EncoderParams, cache: TokenCache | None) -> _TokenPiece:
    if cache is not None and token in cache:
        return cache[token]
    buckets = np.asarray(hash_subwords(token, params.hasher), dtype=np.intp)
    e = params.embedding[buckets].mean(axis=0)
    u = params.projection @ e
    u_norm = float(np.linalg.norm(u))
    if u_norm < _NORM_FLOOR:
        raise DegenerateEmbedding(f"token {token!r}: vector norm {u_norm} below {_NORM_FLOOR}")
    v = u / u_norm
    piece = (buckets, e, u, u_norm, v)
    if cache is not None:
        cache[token] = piece
    return piece


def encode_forward(
    tokens: list[str], params: EncoderParams, cache: TokenCache | None = None
) -> tuple[EncodedText, EncodingTape]:
    """Forward pass over analyzed tokens, returning encoding plus tape."""
    if not tokens:
        raise EmptyText("no tokens to encode")
    pieces = [_token_forward(t, params, cache) for t in tokens]
    bucket_arrays = [p[0] for p in pieces]
    e = np.stack([p[1] for p in pieces])
    u = np.stack([p[2] for p in pieces])
    u_norms = np.array([p[3] for p in pieces])
    v = np.stack([p[4] for p in pieces])
    w = u.mean(axis=0)
    w_norm = float(np.linalg.norm(w))
    if w_norm < _NORM_FLOOR:
        raise DegenerateEmbedding(f"pooled norm {w_norm} below {_NORM_FLOOR}")
    p = w / w_norm
    tape = EncodingTape(bucket_arrays, e, u, u_norms, v, w, w_norm, p)
    return EncodedText(v, p), tape


def encode(
    text: str,
    params: EncoderParams,
    analyzer: AnalyzerConfig = AnalyzerConfig(),
) -> EncodedText:
    """Encode raw text: analyze, hash, embed, project, normalize, pool."""
    tokens = analyze(text, analyzer)
    if not tokens:
        raise EmptyText(f"text {text!r} produced no tokens")
    enc, _ = encode_forward(tokens, params)
    return enc


def encode_backward(
    tape: EncodingTape,
    d_token_vectors: np.ndarray | None,
    d_pooled: np.ndarray | None,
    params: EncoderParams,
    grad_embedding: np.ndarray,
    grad_projection: np.ndarray,
) -> None:
    """Accumulate dL/dE and dL/dP given gradients at the encoder outputs.

    d_token_vectors is dL/dv (T, dim) and d_pooled is dL/dp (dim,); either
    may be None when that output did not feed the loss.
    """
    n_tokens = tape.u.shape[0]
    d_u = np.zeros_like(tape.u)
    if d_pooled is not None:
        # p = w / |w|  =>  dL/dw = (dL/dp - (p . dL/dp) p) / |w|
        d_w = (d_pooled - float(tape.p @ d_pooled) * tape.p) / tape.w_norm
        d_u += d_w[None, :] / n_tokens
    if d_token_vectors is not None:
        # v_i = u_i / |u_i|, same projection of the gradient per row
        dots = np.einsum("td,td->t", tape.v, d_token_vectors)
        d_u += (d_token_vectors - dots[:, None] * tape.v) / tape.u_norms[:, None]
    # u_i = P e_i  =>  dL/dP += sum_i outer(du_i, e_i), dL/de_i = P^T du_i
    grad_projection += d_u.T @ tape.e
    d_e = d_u @ params.projection
    for i, buckets in enumerate(tape.bucket_arrays):
        np.add.at(grad_embedding, buckets, d_e[i] / buckets.shape[0])


def score_single_vector(query: EncodedText, doc: EncodedText) -> float:
    """Dot product of the two unit pooled vectors."""
    if query.pooled_vector.shape != doc.pooled_vector.shape:
        raise DimensionMismatch(
            f"pooled dims {query.pooled_vector.shape} vs {doc.pooled_vector.shape}"
        )
    return float(query.pooled_vector @ doc.pooled_vector)


def score_maxsim(query: EncodedText, doc: EncodedText) -> float:
    """Sum over query tokens of the best cosine against any doc token."""
    if query.token_vectors.shape[1] != doc.token_vectors.shape[1]:
        raise DimensionMismatch(
            f"token dims {query.token_vectors.shape} vs {doc.token_vectors.shape}"
        )
    sims = query.token_vectors @ doc.token_vectors.T
    return float(sims.max(axis=1).sum())


class EncodingStore:
    """Pre-encoded corpus for dense search under one params version.

    Token vectors of all documents are stacked into one matrix with
    per-document offsets so both scoring modes run as matrix products.
    """

    def __init__(
        self,
        params: EncoderParams,
        analyzer: AnalyzerConfig,
        doc_ids: list[str],
        token_matrix: np.ndarray,
        offsets: np.ndarray,
        pooled_matrix: np.ndarray,
    ):
        self.params = params
        self.analyzer = analyzer
        self.doc_ids = doc_ids
        self._token_matrix = token_matrix
        self._offsets = offsets  # (n_docs,), start row of each doc
        self._pooled = pooled_matrix
        self._index_of = {d: i for i, d in enumerate(doc_ids)}

    @classmethod
    def build(
        cls,
        coll: DocumentCollection,
        params: EncoderParams,
        analyzer: AnalyzerConfig = AnalyzerConfig(),
    ) -> "EncodingStore":
        if len(coll) == 0:
            raise EmptyCollection("cannot encode an empty collection")
        cache: TokenCache = {}
        doc_ids: list[str] = []
        chunks: list[np.ndarray] = []
        offsets: list[int] = []
        pooled_rows: list[np.ndarray] = []
        row = 0
        for doc in coll:
            tokens = analyze(doc.text, analyzer)
            if not tokens:
                raise EmptyText(f"document {doc.doc_id!r} produced no tokens")
            enc, _ = encode_forward(tokens, params, cache)
            doc_ids.append(doc.doc_id)
            offsets.append(row)
            chunks.append(enc.token_vectors)
            pooled_rows.append(enc.pooled_vector)
            row += enc.token_count
        return cls(
            params,
            analyzer,
            doc_ids,
            np.concatenate(chunks, axis=0),
            np.asarray(offsets, dtype=np.intp),
            np.stack(pooled_rows),
        )

    @property
    def params_version(self) -> str:
        return self.params.version

    def __len__(self) -> int:
        return len(self.doc_ids)

    def get(self, doc_id: str) -> EncodedText:
        if doc_id not in self._index_of:
            raise UnknownDocId(f"no encoding for doc {doc_id!r}")
        i = self._index_of[doc_id]
        start = self._offsets[i]
        end = self._offsets[i + 1] if i + 1 < len(self.doc_ids) else self._token_matrix.shape[0]
        return EncodedText(self._token_matrix[start:end], self._pooled[i])

    def encode_query(self, query: Query | str) -> EncodedText:
        text = query.text if isinstance(query, Query) else query
        return encode(text, self.params, self.analyzer)


def search_dense(
    query: Query | str,
    store: EncodingStore,
    mode: ScoringMode,
    k: int = 10,
    params: EncoderParams | None = None,
) -> Ranking:
    """Exhaustive dense search; ties break by doc_id ascending.

    Passing `params` asserts the store was encoded under that version and
    raises StaleEncodings otherwise.
    """
    if params is not None and params.version != store.params_version:
        raise StaleEncodings(
            f"store encoded under {store.params_version}, got params {params.version}"
        )
    mode = ScoringMode(mode)
    q = store.encode_query(query)
    if mode == ScoringMode.SINGLE_VECTOR:
        scores = store._pooled @ q.pooled_vector
    elif mode == ScoringMode.MULTI_VECTOR_MAXSIM:
        sims = store._token_matrix @ q.token_vectors.T  # (rows, Tq)
        per_doc = np.maximum.reduceat(sims, store._offsets, axis=0)  # (n_docs, Tq)
        scores = per_doc.sum(axis=1)
    else:
        raise ValueError("rerank is not a first-stage scoring mode")
    order = sorted(range(len(store)), key=lambda i: (-scores[i], store.doc_ids[i]))
    return [(store.doc_ids[i], float(scores[i])) for i in order[:k]]


def rerank(
    base: Ranking,
    query: Query | str,
    store: EncodingStore,
    k: int,
) -> Ranking:
    """Re-score the top-k of `base` with maxsim; the tail keeps base order.

    The candidate set is exactly that of `base`, so recall at any depth is
    conserved. Tail entries get synthetic descending scores below the
    reranked head to keep run files monotonic.
    """
    if k < 0 or k > len(base):
        raise ValueError(f"rerank depth {k} outside 0..{len(base)}")
    if k == 0:
        return list(base)
    q = store.encode_query(query)
    head: list[tuple[str, float]] = []
    for doc_id, _ in base[:k]:
        head.append((doc_id, score_maxsim(q, store.get(doc_id))))
    head.sort(key=lambda pair: (-pair[1], pair[0]))
    floor = head[-1][1]
    tail = [
        (doc_id, floor - 1.0 - j)
        for j, (doc_id, _) in enumerate(base[k:])
    ]
    return head + tail


_CHECKPOINT_LAYOUT = 1


def save_params(params: EncoderParams, path: str | Path) -> None:
    """Write a checkpoint; float64 arrays round-trip bit-exactly."""
    meta = {
        "layout": _CHECKPOINT_LAYOUT,
        "ngram_min": params.hasher.ngram_min,
        "ngram_max": params.hasher.ngram_max,
        "bucket_count": params.hasher.bucket_count,
        "seed": params.seed,
        "version": params.version,
    }
    try:
        with open(path, "wb") as f:
            np.savez(
                f,
                meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                embedding=params.embedding,
                projection=params.projection,
            )
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_params(path: str | Path) -> EncoderParams:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            embedding = data["embedding"]
            projection = data["projection"]
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise MalformedRecord(f"{path}: not a valid checkpoint: {e}") from e
    if meta.get("layout") != _CHECKPOINT_LAYOUT:
        raise MalformedRecord(f"{path}: unsupported checkpoint layout {meta.get('layout')!r}")
    hasher = SubwordHasherConfig(meta["ngram_min"], meta["ngram_max"], meta["bucket_count"])
    params = make_params(embedding, projection, hasher, int(meta["seed"]))
    if params.version != meta["version"]:
        raise MalformedRecord(
            f"{path}: content digest {params.version} does not match "
            f"recorded version {meta['version']}"
        )
    return params
