"""Experiment configuration: defaults, the key = value file format, and
the canonical text that feeds the provenance hash.

Config files are plain text, one `key = value` per line, '#' comments and
blank lines ignored. Unknown keys are errors, as are values that fail
validation. `canonical_text` renders every field in sorted key order so
equal configs hash equally regardless of file formatting.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .encoder import ScoringMode
from .errors import ConfigInvalid, IoFailure
from .evaluation import MetricSpec
from .lexical import AnalyzerConfig, BM25Params
from .training import TrainConfig

KNOWN_RANKERS = ("bm25", "single_vector", "multi_vector", "rerank")


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic corpus
    doc_count: int = 2000
    vocab_size: int = 400
    corpus_seed: int = 7
    passage_len_min: int = 20
    passage_len_max: int = 40
    train_query_count: int = 200
    eval_query_count: int = 100
    query_len_min: int = 3
    query_len_max: int = 5
    # variety families
    family_count: int = 2
    varieties_per_family: int = 2
    rules_per_family: int = 24
    rule_fraction: float = 0.7
    family_seed: int = 13
    # rankers
    rankers: tuple[str, ...] = ("bm25", "single_vector", "multi_vector", "rerank")
    rerank_depth: int = 10
    bm25_k1: float = 0.9
    bm25_b: float = 0.4
    # encoder
    encoder_dim: int = 64
    encoder_buckets: int = 32768
    ngram_min: int = 3
    ngram_max: int = 5
    # analyzer
    lowercase: bool = True
    unicode_normalization: str = "none"
    cjk_mode: str = "codepoint-unigram"
    # training
    epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    temperature: float = 0.05
    negatives_per_query: int = 4
    negative_source: str = "bm25_hard"
    # evaluation
    metrics: tuple[str, ...] = ("mrr@10", "recall@1000")
    relevance_threshold: int = 1
    # orchestration
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    out_dir: str = "out"

    def metric_specs(self) -> list[MetricSpec]:
        return [MetricSpec.parse(m, self.relevance_threshold) for m in self.metrics]

    def analyzer(self) -> AnalyzerConfig:
        return AnalyzerConfig(self.lowercase, self.unicode_normalization, self.cjk_mode)

    def bm25_params(self) -> BM25Params:
        return BM25Params(self.bm25_k1, self.bm25_b)

    def train_config(self, seed: int, loss_mode: ScoringMode) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            temperature=self.temperature,
            negatives_per_query=self.negatives_per_query,
            negative_source=self.negative_source,
            seed=seed,
            loss_mode=loss_mode,
        )


_BOOL_VALUES = {"true": True, "false": False}


def _parse_value(name: str, kind: type, raw: str):
    if kind is bool:
        if raw.lower() not in _BOOL_VALUES:
            raise ConfigInvalid(f"{name}: expected true or false, got {raw!r}")
        return _BOOL_VALUES[raw.lower()]
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigInvalid(f"{name}: expected integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigInvalid(f"{name}: expected number, got {raw!r}") from None
    if kind is str:
        return raw
    # tuples come from comma-separated lists
    items = [part.strip() for part in raw.split(",") if part.strip()]
    if kind == tuple[int, ...]:
        try:
            return tuple(int(p) for p in items)
        except ValueError:
            raise ConfigInvalid(f"{name}: expected comma-separated integers") from None
    return tuple(items)


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown keys and malformed lines are errors."""
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    overrides: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigInvalid(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key not in by_name:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
        if key in overrides:
            raise ConfigInvalid(f"line {lineno}: duplicate key {key!r}")
        # annotations are strings under `from __future__ import annotations`
        resolved = {
            "int": int, "float": float, "bool": bool, "str": str,
            "tuple[str, ...]": tuple[str, ...], "tuple[int, ...]": tuple[int, ...],
        }[by_name[key].type]
        overrides[key] = _parse_value(key, resolved, value)
    cfg = ExperimentConfig(**overrides)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise IoFailure(f"{path} is not valid UTF-8: {e}") from e
    return parse_config(text)


def validate_config(cfg: ExperimentConfig) -> None:
    def bad(msg: str) -> None:
        raise ConfigInvalid(msg)

    if cfg.doc_count < 1 or cfg.vocab_size < 10:
        bad("doc_count must be >= 1 and vocab_size >= 10")
    if cfg.passage_len_min < 1 or cfg.passage_len_max < cfg.passage_len_min:
        bad("passage length range is inconsistent")
    if cfg.query_len_min < 1 or cfg.query_len_max < cfg.query_len_min:
        bad("query length range is inconsistent")
    if cfg.train_query_count < 1 or cfg.eval_query_count < 1:
        bad("train_query_count and eval_query_count must be >= 1")
    if cfg.train_query_count + cfg.eval_query_count > cfg.doc_count:
        bad("need at least one distinct positive document per query")
    if cfg.family_count < 2:
        bad("family_count must be >= 2 (a held-out family is required)")
    if cfg.varieties_per_family < 2:
        bad("varieties_per_family must be >= 2 (a held-out sibling is required)")
    if cfg.rules_per_family < 1:
        bad("rules_per_family must be >= 1")
    if not 0.0 < cfg.rule_fraction <= 1.0:
        bad("rule_fraction must be in (0, 1]")
    if not cfg.rankers:
        bad("rankers must not be empty")
    for r in cfg.rankers:
        if r not in KNOWN_RANKERS:
            bad(f"unknown ranker {r!r} (known: {', '.join(KNOWN_RANKERS)})")
    if len(set(cfg.rankers)) != len(cfg.rankers):
        bad("rankers list contains duplicates")
    if "rerank" in cfg.rankers and "single_vector" not in cfg.rankers:
        bad("rerank needs single_vector as its first stage")
    if cfg.rerank_depth < 1:
        bad("rerank_depth must be >= 1")
    if cfg.encoder_dim < 2 or cfg.encoder_buckets < 2:
        bad("encoder_dim must be >= 2 and encoder_buckets >= 2")
    if cfg.ngram_min < 1 or cfg.ngram_max < cfg.ngram_min:
        bad("n-gram range is inconsistent")
    if not cfg.metrics:
        bad("metrics must not be empty")
    for m in cfg.metrics:
        try:
            MetricSpec.parse(m, cfg.relevance_threshold)
        except ValueError as e:
            bad(str(e))
    if cfg.relevance_threshold < 1:
        bad("relevance_threshold must be >= 1")
    if not cfg.seeds:
        bad("seeds must not be empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        bad("seeds list contains duplicates")
    try:
        cfg.analyzer()
        cfg.bm25_params()
        cfg.train_config(0, ScoringMode.SINGLE_VECTOR)
    except ValueError as e:
        bad(str(e))


def canonical_text(cfg: ExperimentConfig) -> str:
    """Sorted key = value rendering used for hashing and provenance."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:12]


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    out = replace(cfg, **kwargs)
    validate_config(out)
    return out
