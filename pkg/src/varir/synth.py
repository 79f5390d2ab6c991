"""Seeded synthetic benchmark: corpus, queries, judgments, and families.

Documents are passages of pseudo-words (CV syllables) drawn from a
Zipf-weighted vocabulary. Each query extracts the least frequent distinct
words of one passage, which makes that passage its positive: the query
shares far more terms with it than with a random document. Train and eval
queries use disjoint positives and disjoint id spaces.

Families of varieties are built from disjoint rewrite-rule pools over the
same alphabet, so rulesets from different families never share a rule
while siblings within a family overlap by construction.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .config import ExperimentConfig
from .corpus import Document, DocumentCollection, Qrels, Query, QuerySet
from .errors import ConfigInvalid
from .transducer import FamilySpec, RewriteRule, Scope, generate_family

_CONSONANTS = "bdfghklmnprstvz"
_VOWELS = "aeiou"

# Replacement material for rewrite rules; mostly letters and digraphs that
# the vocabulary generator never produces, so rewrites look foreign.
_RHS_POOL = (
    "c", "j", "q", "w", "x", "y",
    "ch", "sh", "th", "gh", "ij", "ou", "oe", "aa", "ee", "ck", "qu", "ph",
)


@dataclass
class SynthBenchmark:
    collection: DocumentCollection
    train_queries: QuerySet
    eval_queries: QuerySet
    qrels: Qrels


def _make_vocab(rng: random.Random, size: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        syllables = rng.randint(2, 4)
        word = "".join(
            rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syllables)
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def synthesize_corpus(cfg: ExperimentConfig) -> SynthBenchmark:
    """Deterministic benchmark from the corpus fields of the config."""
    if cfg.train_query_count + cfg.eval_query_count > cfg.doc_count:
        raise ConfigInvalid("not enough documents for distinct positives")
    rng = random.Random(cfg.corpus_seed)
    vocab = _make_vocab(rng, cfg.vocab_size)
    weights = [1.0 / (rank + 1) ** 0.8 for rank in range(len(vocab))]

    docs: list[Document] = []
    doc_words: list[list[str]] = []
    for i in range(cfg.doc_count):
        length = rng.randint(cfg.passage_len_min, cfg.passage_len_max)
        words = rng.choices(vocab, weights=weights, k=length)
        doc_words.append(words)
        docs.append(Document(f"d{i:05d}", " ".join(words)))
    collection = DocumentCollection(docs)

    freq: dict[str, int] = {}
    for words in doc_words:
        for w in words:
            freq[w] = freq.get(w, 0) + 1

    positives = rng.sample(range(cfg.doc_count), cfg.train_query_count + cfg.eval_query_count)

    def extract_query(doc_index: int) -> str:
        words = doc_words[doc_index]
        length = rng.randint(cfg.query_len_min, cfg.query_len_max)
        distinct = sorted(set(words), key=lambda w: (freq[w], w))[:length]
        first_pos = {w: words.index(w) for w in distinct}
        return " ".join(sorted(distinct, key=lambda w: first_pos[w]))

    qrels: Qrels = {}
    train: list[Query] = []
    for qi, doc_index in enumerate(positives[: cfg.train_query_count]):
        qid = f"qt{qi:04d}"
        train.append(Query(qid, extract_query(doc_index)))
        qrels[qid] = {docs[doc_index].doc_id: 1}
    eval_: list[Query] = []
    for qi, doc_index in enumerate(positives[cfg.train_query_count :]):
        qid = f"qe{qi:04d}"
        eval_.append(Query(qid, extract_query(doc_index)))
        qrels[qid] = {docs[doc_index].doc_id: 1}
    return SynthBenchmark(collection, QuerySet(train), QuerySet(eval_), qrels)


def build_family_specs(cfg: ExperimentConfig) -> list[FamilySpec]:
    """Disjoint rule pools, one spec per family, fully seed-determined.

    Left-hand sides are unique across all families, which makes the
    cross-family no-shared-rules invariant hold by construction.
    """
    rng = random.Random(cfg.family_seed)
    candidates = (
        [c + v for c in _CONSONANTS for v in _VOWELS]
        + [v + c for v in _VOWELS for c in _CONSONANTS]
        + list(_CONSONANTS)
    )
    needed = cfg.family_count * cfg.rules_per_family
    if needed > len(candidates):
        raise ConfigInvalid(
            f"{needed} rules requested but only {len(candidates)} distinct "
            "left-hand sides are available"
        )
    used: set[str] = set()
    specs: list[FamilySpec] = []
    for fam_index in range(cfg.family_count):
        pool: list[RewriteRule] = []
        while len(pool) < cfg.rules_per_family:
            lhs = rng.choice(candidates)
            if lhs in used:
                continue
            used.add(lhs)
            rhs = rng.choice(_RHS_POOL)
            while rhs == lhs:
                rhs = rng.choice(_RHS_POOL)
            scope = rng.choices(
                [Scope.ANYWHERE, Scope.WORD_FINAL, Scope.WORD_INITIAL],
                weights=[0.7, 0.2, 0.1],
            )[0]
            pool.append(RewriteRule(lhs, rhs, scope))
        specs.append(
            FamilySpec(
                family_id=f"fam{fam_index}",
                shared_rule_pool=tuple(pool),
                sampling_fraction=cfg.rule_fraction,
                seed=cfg.family_seed * 1000 + fam_index,
                variety_count=cfg.varieties_per_family,
            )
        )
    return specs


def build_rulesets(cfg: ExperimentConfig):
    """All generated varieties keyed by ruleset id, insertion-ordered by
    family then sibling index."""
    rulesets = {}
    for spec in build_family_specs(cfg):
        for rs in generate_family(spec):
            rulesets[rs.ruleset_id] = rs
    return rulesets
