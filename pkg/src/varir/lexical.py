"""Tokenization, inverted index, and BM25 scoring.

The scoring function uses the non-negative idf variant

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))

and term saturation tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl)),
summed over query token occurrences, so a term repeated in the query
contributes once per occurrence. Defaults k1 = 0.9, b = 0.4.

`bm25_score_naive` recomputes scores with a full scan over raw documents
and shares no indexing code with `bm25_search`; it exists as an
independent check of the indexed path.
"""

from __future__ import annotations

import json
import math
import unicodedata
from dataclasses import dataclass
from pathlib import Path

from .corpus import DocumentCollection, Query, Ranking
from .errors import EmptyCollection, IoFailure, MalformedRecord

# Codepoint ranges treated as CJK for the unigram mode: Han (unified,
# extension A, compatibility), Hiragana, Katakana, Hangul jamo + syllables.
_CJK_RANGES = (
    (0x1100, 0x11FF),
    (0x3040, 0x309F),
    (0x30A0, 0x30FF),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xAC00, 0xD7A3),
    (0xF900, 0xFAFF),
    (0x20000, 0x2A6DF),
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


@dataclass(frozen=True)
class AnalyzerConfig:
    lowercase: bool = True
    unicode_normalization: str = "none"  # "none" | "nfkc"
    cjk_mode: str = "codepoint-unigram"  # "codepoint-unigram" | "off"

    def __post_init__(self) -> None:
        if self.unicode_normalization not in ("none", "nfkc"):
            raise ValueError(
                f"unicode_normalization {self.unicode_normalization!r} "
                "not one of 'none', 'nfkc'"
            )
        if self.cjk_mode not in ("codepoint-unigram", "off"):
            raise ValueError(
                f"cjk_mode {self.cjk_mode!r} not one of 'codepoint-unigram', 'off'"
            )


def analyze(text: str, cfg: AnalyzerConfig = AnalyzerConfig()) -> list[str]:
    """Split text into tokens on non-alphanumeric codepoints.

    With cjk_mode "codepoint-unigram", each CJK codepoint becomes its own
    token so scripts without spacing still produce units to match on.
    """
    if cfg.lowercase:
        text = text.lower()
    if cfg.unicode_normalization == "nfkc":
        text = unicodedata.normalize("NFKC", text)
    tokens: list[str] = []
    buf: list[str] = []
    unigram = cfg.cjk_mode == "codepoint-unigram"
    for ch in text:
        if unigram and _is_cjk(ch):
            if buf:
                tokens.append("".join(buf))
                buf.clear()
            tokens.append(ch)
        elif ch.isalnum():
            buf.append(ch)
        elif buf:
            tokens.append("".join(buf))
            buf.clear()
    if buf:
        tokens.append("".join(buf))
    return tokens


@dataclass(frozen=True)
class BM25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self) -> None:
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ValueError(f"bad BM25 params k1={self.k1} b={self.b}")


@dataclass
class InvertedIndex:
    """Postings keyed by term; doc ids and lengths indexed by position."""

    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc_index, tf)]
    doc_ids: list[str]
    doc_lengths: list[int]
    analyzer: AnalyzerConfig

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))


def build_index(
    coll: DocumentCollection, cfg: AnalyzerConfig = AnalyzerConfig()
) -> InvertedIndex:
    if len(coll) == 0:
        raise EmptyCollection("cannot index an empty collection")
    postings: dict[str, dict[int, int]] = {}
    doc_ids: list[str] = []
    doc_lengths: list[int] = []
    for di, doc in enumerate(coll):
        tokens = analyze(doc.text, cfg)
        doc_ids.append(doc.doc_id)
        doc_lengths.append(len(tokens))
        for t in tokens:
            per_term = postings.setdefault(t, {})
            per_term[di] = per_term.get(di, 0) + 1
    final = {t: sorted(per.items()) for t, per in postings.items()}
    return InvertedIndex(final, doc_ids, doc_lengths, cfg)


def bm25_search(
    query: Query | str,
    index: InvertedIndex,
    params: BM25Params = BM25Params(),
    k: int = 10,
) -> Ranking:
    """Top-k documents by BM25; zero-score documents are excluded and ties
    break by doc_id ascending."""
    text = query.text if isinstance(query, Query) else query
    tokens = analyze(text, index.analyzer)
    if not tokens:
        return []
    n_docs = index.doc_count
    avgdl = index.avgdl
    acc: dict[int, float] = {}
    for t in tokens:
        plist = index.postings.get(t)
        if not plist:
            continue
        df = len(plist)
        idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
        for di, tf in plist:
            dl = index.doc_lengths[di]
            denom = tf + params.k1 * (1.0 - params.b + params.b * dl / avgdl)
            acc[di] = acc.get(di, 0.0) + idf * tf * (params.k1 + 1.0) / denom
    scored = [(index.doc_ids[di], s) for di, s in acc.items() if s > 0.0]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def bm25_score_naive(
    query: Query | str,
    coll: DocumentCollection,
    params: BM25Params = BM25Params(),
    cfg: AnalyzerConfig = AnalyzerConfig(),
) -> list[tuple[str, float]]:
    """Score every document with a direct full scan (no index).

    Returns (doc_id, score) in collection order, zeros included.
    """
    if len(coll) == 0:
        raise EmptyCollection("cannot score against an empty collection")
    text = query.text if isinstance(query, Query) else query
    doc_tokens = [analyze(d.text, cfg) for d in coll]
    token_sets = [set(toks) for toks in doc_tokens]
    lengths = [len(toks) for toks in doc_tokens]
    n_docs = len(doc_tokens)
    avgdl = sum(lengths) / n_docs
    q_tokens = analyze(text, cfg)
    dfs = {t: sum(1 for ts in token_sets if t in ts) for t in set(q_tokens)}
    out: list[tuple[str, float]] = []
    for di, doc in enumerate(coll):
        score = 0.0
        for t in q_tokens:
            tf = doc_tokens[di].count(t)
            if tf == 0:
                continue
            df = dfs[t]
            idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
            denom = tf + params.k1 * (1.0 - params.b + params.b * lengths[di] / avgdl)
            score += idf * tf * (params.k1 + 1.0) / denom
        out.append((doc.doc_id, score))
    return out


_INDEX_LAYOUT = 1


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """Persist the index as JSON; loading reproduces searches bit-exactly
    because only integer statistics are stored."""
    payload = {
        "layout": _INDEX_LAYOUT,
        "analyzer": {
            "lowercase": index.analyzer.lowercase,
            "unicode_normalization": index.analyzer.unicode_normalization,
            "cjk_mode": index.analyzer.cjk_mode,
        },
        "doc_ids": index.doc_ids,
        "doc_lengths": index.doc_lengths,
        "postings": {t: [[di, tf] for di, tf in plist] for t, plist in index.postings.items()},
    }
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, ensure_ascii=False)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_index(path: str | Path) -> InvertedIndex:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise MalformedRecord(f"{path}: not valid JSON: {e}") from e
    if payload.get("layout") != _INDEX_LAYOUT:
        raise MalformedRecord(f"{path}: unsupported index layout {payload.get('layout')!r}")
    cfg = AnalyzerConfig(**payload["analyzer"])
    postings = {
        t: [(int(di), int(tf)) for di, tf in plist]
        for t, plist in payload["postings"].items()
    }
    return InvertedIndex(postings, list(payload["doc_ids"]), list(payload["doc_lengths"]), cfg)
