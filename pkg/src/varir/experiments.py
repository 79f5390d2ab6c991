"""Research-question pipelines over the synthetic cross-variety benchmark.

Four entry points, each writing a self-contained output tree:

- `run_rq1`: robustness of untrained rankers when eval queries are rewritten
  into each variety (gap between source-language and variety queries).
- `run_rq2`: contrastive fine-tuning on one variety pair, original vs
  fine-tuned ("orig" vs "ours") on both sides of that pair.
- `run_rq3`: the rq2 checkpoints evaluated on held-out same-family pairs.
- `run_rq4`: the same evaluation against pairs from a disjoint family.

All four share an `ExperimentContext` that caches the synthesized benchmark,
encoding stores and rankings, so chaining the pipelines in one process does
no redundant work. Every emitted table starts with provenance comment lines
(config hash, seeds, BM25 parameters, training hyperparameters, ruleset ids)
and the whole output tree is byte-identical across repeated invocations of
the same config.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .config import ExperimentConfig, config_hash, validate_config
from .corpus import QuerySet, Run, restrict_qrels, write_run
from .encoder import (
    EncoderParams,
    EncodingStore,
    ScoringMode,
    SubwordHasherConfig,
    init_params,
    load_params,
    rerank,
    save_params,
    search_dense,
)
from .errors import (
    ConfigInvalid,
    FamilyOverlap,
    MissingTrainedParams,
    PairNotUnseen,
)
from .evaluation import EvalReport, compare_runs, evaluate_run, sign_test, write_comparison_csv
from .lexical import bm25_search, build_index
from .synth import build_rulesets, synthesize_corpus
from .training import TripletBuild, build_triplets, train
from .transducer import VarietyRuleSet, transduce_queryset

PLOT_COLUMNS = ("ranker", "pair", "query_language", "condition", "metric", "value", "seed")

SOURCE_LANGUAGE = "source"
IDENTITY_LANGUAGE = "identity"

# Rankers whose parameters can be fine-tuned, with their loss/search mode.
_MODE_OF = {
    "single_vector": ScoringMode.SINGLE_VECTOR,
    "multi_vector": ScoringMode.MULTI_VECTOR_MAXSIM,
}
TRAINABLE_RANKERS = tuple(_MODE_OF)

# Disk run files keep only a prefix of each ranking; metrics always use the
# full in-memory rankings (deep enough for the largest metric cutoff).
RUN_FILE_DEPTH = 50

_IDENTITY_RULESET = VarietyRuleSet(IDENTITY_LANGUAGE, "control", (), {})


def ensure_family_disjointness(rulesets: Iterable[VarietyRuleSet]) -> None:
    """Reject rule material shared across families (left sides or lexicon keys)."""
    material: dict[str, set[str]] = {}
    for rs in rulesets:
        bucket = material.setdefault(rs.family_id, set())
        bucket.update(rule.lhs for rule in rs.rules)
        bucket.update(rs.lexicon)
    families = sorted(material)
    for i, fam_a in enumerate(families):
        for fam_b in families[i + 1 :]:
            shared = material[fam_a] & material[fam_b]
            if shared:
                sample = ", ".join(repr(s) for s in sorted(shared)[:3])
                raise FamilyOverlap(
                    f"families {fam_a!r} and {fam_b!r} share rule material: {sample}"
                )


@dataclass
class ExperimentContext:
    """Shared state for the pipelines: benchmark, index, caches.

    Build one per config and pass it to successive run_rq* calls to reuse
    encodings and rankings; each call also works with a fresh context.
    """

    cfg: ExperimentConfig
    bench: object
    rulesets: dict[str, VarietyRuleSet]
    index: object
    qrels: dict
    depth: int
    _init_params: dict[int, EncoderParams] = field(default_factory=dict)
    _stores: OrderedDict = field(default_factory=OrderedDict)
    _querysets: dict[str, QuerySet] = field(default_factory=dict)
    _runs: dict[tuple, Run] = field(default_factory=dict)
    _reports: dict[tuple, EvalReport] = field(default_factory=dict)
    _triplets: dict[tuple, TripletBuild] = field(default_factory=dict)
    trained: dict[tuple, EncoderParams] = field(default_factory=dict)
    train_reports: dict[tuple, object] = field(default_factory=dict)

    _STORE_CACHE_LIMIT = 8

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "ExperimentContext":
        validate_config(cfg)
        bench = synthesize_corpus(cfg)
        rulesets = build_rulesets(cfg)
        ensure_family_disjointness(rulesets.values())
        index = build_index(bench.collection, cfg.analyzer())
        qrels = restrict_qrels(bench.qrels, bench.eval_queries.query_ids())
        depth = max(spec.cutoff for spec in cfg.metric_specs())
        return cls(cfg, bench, rulesets, index, qrels, depth)

    # -- cached building blocks -------------------------------------------

    def init_params(self, seed: int) -> EncoderParams:
        if seed not in self._init_params:
            hasher = SubwordHasherConfig(
                self.cfg.ngram_min, self.cfg.ngram_max, self.cfg.encoder_buckets
            )
            self._init_params[seed] = init_params(self.cfg.encoder_dim, hasher, seed)
        return self._init_params[seed]

    def store(self, params: EncoderParams) -> EncodingStore:
        key = params.version
        if key in self._stores:
            self._stores.move_to_end(key)
            return self._stores[key]
        store = EncodingStore.build(self.bench.collection, params, self.cfg.analyzer())
        self._stores[key] = store
        if len(self._stores) > self._STORE_CACHE_LIMIT:
            self._stores.popitem(last=False)
        return store

    def eval_queries(self, language: str) -> QuerySet:
        if language not in self._querysets:
            if language == SOURCE_LANGUAGE:
                qs = self.bench.eval_queries
            elif language == IDENTITY_LANGUAGE:
                qs = transduce_queryset(self.bench.eval_queries, _IDENTITY_RULESET)
            else:
                qs = transduce_queryset(self.bench.eval_queries, self._ruleset(language))
            self._querysets[language] = qs
        return self._querysets[language]

    def _ruleset(self, pair: str) -> VarietyRuleSet:
        if pair not in self.rulesets:
            raise ConfigInvalid(
                f"unknown variety pair {pair!r}; have {sorted(self.rulesets)}"
            )
        return self.rulesets[pair]

    def triplet_build(self, pair: str, seed: int) -> TripletBuild:
        key = (pair, seed)
        if key not in self._triplets:
            train_queries = transduce_queryset(self.bench.train_queries, self._ruleset(pair))
            tcfg = self.cfg.train_config(seed, ScoringMode.SINGLE_VECTOR)
            built = build_triplets(
                train_queries,
                self.bench.qrels,
                self.bench.collection,
                tcfg,
                self.index,
                self.cfg.bm25_params(),
            )
            eval_ids = set(self.bench.eval_queries.query_ids())
            leaked = sorted(eval_ids & {t.query.query_id for t in built.triplets})
            if leaked:
                raise RuntimeError(
                    f"train/eval hygiene violated: eval queries in triplets: {leaked[:5]}"
                )
            self._triplets[key] = built
        return self._triplets[key]

    # -- rankings and reports ---------------------------------------------

    def ranking_run(self, ranker: str, language: str, params: EncoderParams | None) -> Run:
        key = (ranker, "lexical" if params is None else params.version, language)
        if key in self._runs:
            return self._runs[key]
        queries = self.eval_queries(language)
        run: Run = {}
        if ranker == "bm25":
            for q in queries:
                run[q.query_id] = bm25_search(q, self.index, self.cfg.bm25_params(), k=self.depth)
        elif ranker == "rerank":
            base = self.ranking_run("single_vector", language, params)
            store = self.store(params)
            for q in queries:
                run[q.query_id] = rerank(base[q.query_id], q, store, self.cfg.rerank_depth)
        elif ranker in _MODE_OF:
            store = self.store(params)
            mode = _MODE_OF[ranker]
            for q in queries:
                run[q.query_id] = search_dense(q, store, mode, k=self.depth)
        else:
            raise ConfigInvalid(f"unknown ranker {ranker!r}")
        self._runs[key] = run
        return run

    def report(self, ranker: str, language: str, params: EncoderParams | None) -> EvalReport:
        key = (ranker, "lexical" if params is None else params.version, language)
        if key not in self._reports:
            run = self.ranking_run(ranker, language, params)
            self._reports[key] = evaluate_run(
                run, self.qrels, self.cfg.metric_specs(), run_tag=f"{ranker}.{language}"
            )
        return self._reports[key]


# -- provenance and table plumbing ----------------------------------------


def provenance_lines(cfg: ExperimentConfig, ruleset_ids: Iterable[str]) -> list[str]:
    return [
        f"# config_hash={config_hash(cfg)}",
        "# seeds=" + ",".join(str(s) for s in cfg.seeds),
        f"# bm25=k1:{cfg.bm25_k1!r},b:{cfg.bm25_b!r}",
        (
            "# train=epochs:{0},batch_size:{1},learning_rate:{2!r},temperature:{3!r},"
            "negatives_per_query:{4},negative_source:{5}"
        ).format(
            cfg.epochs,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.temperature,
            cfg.negatives_per_query,
            cfg.negative_source,
        ),
        "# rulesets=" + ",".join(ruleset_ids),
    ]


def _write_table(
    path: Path,
    header: Sequence[str],
    rows: Sequence[Mapping[str, object]],
    preamble: Sequence[str] = (),
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for line in preamble:
            f.write(line + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_format_cell(row[col]) for col in header])


def _format_cell(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_plot_data(
    tables: Mapping[str, Sequence[Mapping[str, object]]],
    path: str | Path,
    preamble: Sequence[str] = (),
) -> list[Path]:
    """One tidy CSV per table with the fixed column order; bytes reproducible."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name in tables:
        target = out / f"{name}.csv"
        _write_table(target, PLOT_COLUMNS, tables[name], preamble)
        written.append(target)
    return written


def read_table(path: str | Path) -> list[dict[str, str]]:
    """Read one of the emitted CSVs, skipping provenance comment lines."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = [line for line in f if not line.startswith("#")]
    reader = csv.DictReader(rows)
    return [dict(r) for r in reader]


def _write_runs(
    out_dir: Path,
    prefix: str,
    named_runs: Mapping[str, Run],
) -> None:
    """Persist each run's top RUN_FILE_DEPTH rows as a retrieval run file."""
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    for name in named_runs:
        truncated = {
            qid: ranking[:RUN_FILE_DEPTH] for qid, ranking in named_runs[name].items()
        }
        tag = f"{prefix}.{name}"
        write_run(truncated, tag, runs_dir / f"{tag}.run")


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


# -- identity control -------------------------------------------------------


def identity_control_rows(ctx: ExperimentContext) -> list[dict[str, object]]:
    """Empty-ruleset queries must reproduce the source-language run exactly.

    Raises RuntimeError on any deviation; the returned rows record the gap
    (always zero when the check passes) for the control table.
    """
    seed = ctx.cfg.seeds[0]
    rows: list[dict[str, object]] = []
    for ranker in ctx.cfg.rankers:
        params = None if ranker == "bm25" else ctx.init_params(seed)
        run_source = ctx.ranking_run(ranker, SOURCE_LANGUAGE, params)
        run_identity = ctx.ranking_run(ranker, IDENTITY_LANGUAGE, params)
        if run_source != run_identity:
            raise RuntimeError(
                f"identity control violated for ranker {ranker!r}: "
                "empty-ruleset queries changed the ranking"
            )
        rep_s = ctx.report(ranker, SOURCE_LANGUAGE, params)
        rep_i = ctx.report(ranker, IDENTITY_LANGUAGE, params)
        for spec in ctx.cfg.metric_specs():
            label = spec.label
            gap = rep_s.means[label] - rep_i.means[label]
            if gap != 0.0:
                raise RuntimeError(
                    f"identity control violated for ranker {ranker!r}: "
                    f"{label} gap {gap!r}"
                )
            rows.append(
                {
                    "ranker": ranker,
                    "seed": seed,
                    "metric": label,
                    "value_source": rep_s.means[label],
                    "value_identity": rep_i.means[label],
                    "gap": gap,
                }
            )
    return rows


_IDENTITY_HEADER = ("ranker", "seed", "metric", "value_source", "value_identity", "gap")


# -- rq1: robustness of untrained rankers -----------------------------------


def run_rq1(
    cfg: ExperimentConfig,
    out: str | Path | None = None,
    ctx: ExperimentContext | None = None,
) -> dict[str, object]:
    """Source vs transduced eval queries for every ranker and variety pair."""
    ctx = ctx or ExperimentContext.build(cfg)
    out_root = Path(out if out is not None else cfg.out_dir)
    out_dir = out_root / "rq1"
    pairs = list(ctx.rulesets)
    specs = cfg.metric_specs()
    preamble = provenance_lines(cfg, pairs)

    by_seed: list[dict[str, object]] = []
    for ranker in cfg.rankers:
        for pair in pairs:
            for language in (SOURCE_LANGUAGE, pair):
                for spec in specs:
                    for seed in cfg.seeds:
                        params = None if ranker == "bm25" else ctx.init_params(seed)
                        rep = ctx.report(ranker, language, params)
                        by_seed.append(
                            {
                                "ranker": ranker,
                                "pair": pair,
                                "query_language": language,
                                "condition": "orig",
                                "metric": spec.label,
                                "value": rep.means[spec.label],
                                "seed": seed,
                            }
                        )

    metrics_rows: list[dict[str, object]] = []
    for ranker in cfg.rankers:
        for pair in pairs:
            for language in (SOURCE_LANGUAGE, pair):
                for spec in specs:
                    cells = [
                        r["value"]
                        for r in by_seed
                        if r["ranker"] == ranker
                        and r["pair"] == pair
                        and r["query_language"] == language
                        and r["metric"] == spec.label
                    ]
                    metrics_rows.append(
                        {
                            "ranker": ranker,
                            "pair": pair,
                            "query_language": language,
                            "metric": spec.label,
                            "value": _mean(cells),
                        }
                    )

    sign_rows: list[dict[str, object]] = []
    for ranker in cfg.rankers:
        for pair in pairs:
            for spec in specs:
                label = spec.label
                deltas: list[float] = []
                high_means: list[float] = []
                low_means: list[float] = []
                for seed in cfg.seeds:
                    params = None if ranker == "bm25" else ctx.init_params(seed)
                    rep_high = ctx.report(ranker, SOURCE_LANGUAGE, params)
                    rep_low = ctx.report(ranker, pair, params)
                    vals_high = rep_high.metric_values(label)
                    vals_low = rep_low.metric_values(label)
                    deltas.extend(vals_high[q] - vals_low[q] for q in sorted(vals_high))
                    high_means.append(rep_high.means[label])
                    low_means.append(rep_low.means[label])
                sign_rows.append(
                    {
                        "ranker": ranker,
                        "pair": pair,
                        "metric": label,
                        "mean_high": _mean(high_means),
                        "mean_low": _mean(low_means),
                        "mean_gap": _mean(high_means) - _mean(low_means),
                        "p_value": f"{sign_test(deltas):.6g}",
                        "n_nonzero": sum(1 for d in deltas if d != 0.0),
                        "n": len(deltas),
                    }
                )

    identity_rows = identity_control_rows(ctx)

    _write_table(
        out_dir / "metrics.csv",
        ("ranker", "pair", "query_language", "metric", "value"),
        metrics_rows,
        preamble,
    )
    _write_table(out_dir / "metrics_by_seed.csv", PLOT_COLUMNS, by_seed, preamble)
    _write_table(
        out_dir / "sign_tests.csv",
        ("ranker", "pair", "metric", "mean_high", "mean_low", "mean_gap", "p_value", "n_nonzero", "n"),
        sign_rows,
        preamble,
    )
    _write_table(out_dir / "identity_control.csv", _IDENTITY_HEADER, identity_rows, preamble)
    emit_plot_data({"robustness": by_seed}, out_dir / "plot_data", preamble)

    seed0 = cfg.seeds[0]
    named_runs: dict[str, Run] = {}
    for ranker in cfg.rankers:
        params = None if ranker == "bm25" else ctx.init_params(seed0)
        named_runs[f"{ranker}.{SOURCE_LANGUAGE}.seed{seed0}"] = ctx.ranking_run(
            ranker, SOURCE_LANGUAGE, params
        )
        for pair in pairs:
            named_runs[f"{ranker}.{pair}.seed{seed0}"] = ctx.ranking_run(ranker, pair, params)
    _write_runs(out_dir, "rq1", named_runs)

    _render_language_bars(out_dir, metrics_rows, specs, "rq1")
    write_report(out_root, cfg, list(ctx.rulesets))
    return {
        "metrics": metrics_rows,
        "by_seed": by_seed,
        "sign_tests": sign_rows,
        "identity_control": identity_rows,
        "out": out_dir,
        "ctx": ctx,
    }


# -- shared orig-vs-ours machinery ------------------------------------------


def _neural_rankers(cfg: ExperimentConfig) -> list[str]:
    return [r for r in cfg.rankers if r != "bm25"]


def _base_mode(ranker: str) -> str:
    """The trainable archetype whose parameters a ranker consumes."""
    return "single_vector" if ranker == "rerank" else ranker


def _checkpoint_path(out_root: Path, pair: str, mode_name: str, seed: int) -> Path:
    return out_root / "rq2" / "checkpoints" / pair / mode_name / f"seed{seed}.npz"


def _trained_params(
    ctx: ExperimentContext, out_root: Path, pair: str, mode_name: str, seed: int
) -> EncoderParams:
    key = (pair, mode_name, seed)
    if key in ctx.trained:
        return ctx.trained[key]
    path = _checkpoint_path(out_root, pair, mode_name, seed)
    if not path.exists():
        raise MissingTrainedParams(
            f"no checkpoint for pair {pair!r}, ranker {mode_name!r}, seed {seed}: "
            f"expected {path}; run the rq2 pipeline first"
        )
    params = load_params(path)
    ctx.trained[key] = params
    return params


def _state_params(
    ctx: ExperimentContext,
    out_root: Path,
    pair_a: str,
    ranker: str,
    condition: str,
    seed: int,
) -> EncoderParams:
    if condition == "orig":
        return ctx.init_params(seed)
    return _trained_params(ctx, out_root, pair_a, _base_mode(ranker), seed)


def _orig_ours_rows(
    ctx: ExperimentContext,
    out_root: Path,
    pair_a: str,
    eval_pairs: Sequence[str],
    rankers: Sequence[str],
) -> list[dict[str, object]]:
    cfg = ctx.cfg
    rows: list[dict[str, object]] = []
    for ranker in rankers:
        for pair in eval_pairs:
            for language in (SOURCE_LANGUAGE, pair):
                for condition in ("orig", "ours"):
                    for spec in cfg.metric_specs():
                        for seed in cfg.seeds:
                            params = _state_params(ctx, out_root, pair_a, ranker, condition, seed)
                            rep = ctx.report(ranker, language, params)
                            rows.append(
                                {
                                    "ranker": ranker,
                                    "pair": pair,
                                    "query_language": language,
                                    "condition": condition,
                                    "metric": spec.label,
                                    "value": rep.means[spec.label],
                                    "seed": seed,
                                }
                            )
    return rows


_SUMMARY_HEADER = (
    "ranker",
    "pair",
    "query_language",
    "metric",
    "mean_orig",
    "mean_ours",
    "mean_delta",
    "p_value",
    "n_nonzero",
    "seeds_positive",
    "n_seeds",
)


def _summary_rows(
    ctx: ExperimentContext,
    out_root: Path,
    pair_a: str,
    eval_pairs: Sequence[str],
    rankers: Sequence[str],
) -> list[dict[str, object]]:
    cfg = ctx.cfg
    rows: list[dict[str, object]] = []
    for ranker in rankers:
        for pair in eval_pairs:
            for language in (SOURCE_LANGUAGE, pair):
                for spec in cfg.metric_specs():
                    label = spec.label
                    orig_means: list[float] = []
                    ours_means: list[float] = []
                    deltas: list[float] = []
                    seeds_positive = 0
                    for seed in cfg.seeds:
                        p_orig = _state_params(ctx, out_root, pair_a, ranker, "orig", seed)
                        p_ours = _state_params(ctx, out_root, pair_a, ranker, "ours", seed)
                        rep_o = ctx.report(ranker, language, p_orig)
                        rep_n = ctx.report(ranker, language, p_ours)
                        vals_o = rep_o.metric_values(label)
                        vals_n = rep_n.metric_values(label)
                        deltas.extend(vals_n[q] - vals_o[q] for q in sorted(vals_o))
                        orig_means.append(rep_o.means[label])
                        ours_means.append(rep_n.means[label])
                        if rep_n.means[label] > rep_o.means[label]:
                            seeds_positive += 1
                    rows.append(
                        {
                            "ranker": ranker,
                            "pair": pair,
                            "query_language": language,
                            "metric": label,
                            "mean_orig": _mean(orig_means),
                            "mean_ours": _mean(ours_means),
                            "mean_delta": _mean(ours_means) - _mean(orig_means),
                            "p_value": f"{sign_test(deltas):.6g}",
                            "n_nonzero": sum(1 for d in deltas if d != 0.0),
                            "seeds_positive": seeds_positive,
                            "n_seeds": len(cfg.seeds),
                        }
                    )
    return rows


def _write_state_runs(
    ctx: ExperimentContext,
    out_root: Path,
    out_dir: Path,
    prefix: str,
    pair_a: str,
    eval_pairs: Sequence[str],
    rankers: Sequence[str],
) -> None:
    seed0 = ctx.cfg.seeds[0]
    named: dict[str, Run] = {}
    languages = [SOURCE_LANGUAGE] + [p for p in eval_pairs]
    for ranker in rankers:
        for condition in ("orig", "ours"):
            params = _state_params(ctx, out_root, pair_a, ranker, condition, seed0)
            for language in languages:
                name = f"{ranker}.{language}.{condition}.seed{seed0}"
                named[name] = ctx.ranking_run(ranker, language, params)
    _write_runs(out_dir, prefix, named)


# -- rq2: fine-tuning on one pair -------------------------------------------


def run_rq2(
    cfg: ExperimentConfig,
    pair_a: str | None = None,
    out: str | Path | None = None,
    ctx: ExperimentContext | None = None,
) -> dict[str, object]:
    """Train on one variety pair; compare orig vs ours on both its sides."""
    ctx = ctx or ExperimentContext.build(cfg)
    out_root = Path(out if out is not None else cfg.out_dir)
    out_dir = out_root / "rq2"
    if pair_a is None:
        pair_a = next(iter(ctx.rulesets))
    ctx._ruleset(pair_a)
    rankers = _neural_rankers(cfg)
    if not rankers:
        raise ConfigInvalid("rq2 needs at least one neural ranker")
    preamble = provenance_lines(cfg, list(ctx.rulesets))
    modes = [r for r in rankers if r in _MODE_OF]

    manifest_paths: list[Path] = []
    for mode_name in modes:
        for seed in cfg.seeds:
            key = (pair_a, mode_name, seed)
            built = ctx.triplet_build(pair_a, seed)
            if key not in ctx.train_reports:
                tcfg = cfg.train_config(seed, _MODE_OF[mode_name])
                params0 = ctx.init_params(seed)
                trained_params, report = train(
                    params0, built.triplets, ctx.bench.collection, tcfg, cfg.analyzer()
                )
                ctx.trained[key] = trained_params
                ctx.train_reports[key] = report
            report = ctx.train_reports[key]
            ckpt = _checkpoint_path(out_root, pair_a, mode_name, seed)
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_params(ctx.trained[key], ckpt)
            manifest = out_dir / "manifests" / f"{pair_a}.{mode_name}.seed{seed}.csv"
            manifest.parent.mkdir(parents=True, exist_ok=True)
            with open(manifest, "w", encoding="utf-8", newline="") as f:
                for line in preamble:
                    f.write(line + "\n")
                f.write(f"# pair={pair_a} ranker={mode_name} seed={seed}\n")
                f.write(
                    f"# triplet_count={report.triplet_count} "
                    f"skipped_queries={built.skipped_queries}\n"
                )
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["epoch", "mean_loss", "grad_norm"])
                for epoch, (loss, gnorm) in enumerate(
                    zip(report.epoch_mean_loss, report.epoch_grad_norm), start=1
                ):
                    writer.writerow([epoch, f"{loss:.8f}", f"{gnorm:.8f}"])
            manifest_paths.append(manifest)

    by_seed = _orig_ours_rows(ctx, out_root, pair_a, [pair_a], rankers)
    summary = _summary_rows(ctx, out_root, pair_a, [pair_a], rankers)

    comparisons_dir = out_dir / "comparisons"
    comparisons_dir.mkdir(parents=True, exist_ok=True)
    primary_metric = cfg.metric_specs()[0].label
    for ranker in rankers:
        for language in (SOURCE_LANGUAGE, pair_a):
            for seed in cfg.seeds:
                rep_o = ctx.report(
                    ranker, language, _state_params(ctx, out_root, pair_a, ranker, "orig", seed)
                )
                rep_n = ctx.report(
                    ranker, language, _state_params(ctx, out_root, pair_a, ranker, "ours", seed)
                )
                result = compare_runs(rep_o, rep_n, primary_metric)
                write_comparison_csv(
                    result,
                    comparisons_dir / f"{pair_a}.{ranker}.{language}.seed{seed}.csv",
                    preamble,
                )

    _write_table(out_dir / "metrics_by_seed.csv", PLOT_COLUMNS, by_seed, preamble)
    _write_table(out_dir / "summary.csv", _SUMMARY_HEADER, summary, preamble)
    emit_plot_data({"finetune_gain": by_seed}, out_dir / "plot_data", preamble)
    _write_state_runs(ctx, out_root, out_dir, "rq2", pair_a, [pair_a], rankers)
    _render_condition_bars(out_dir, by_seed, cfg.metric_specs(), "rq2")
    write_report(out_root, cfg, list(ctx.rulesets))
    return {
        "pair_a": pair_a,
        "by_seed": by_seed,
        "summary": summary,
        "manifests": manifest_paths,
        "out": out_dir,
        "ctx": ctx,
    }


# -- rq3 / rq4: transfer to pairs never trained on ---------------------------


def _transfer_tables(
    ctx: ExperimentContext,
    out_root: Path,
    out_dir: Path,
    prefix: str,
    pair_a: str,
    eval_pairs: Sequence[str],
) -> tuple[list[dict[str, object]], list[dict[str, object]]]:
    rankers = _neural_rankers(ctx.cfg)
    if not rankers:
        raise ConfigInvalid(f"{prefix} needs at least one neural ranker")
    by_seed = _orig_ours_rows(ctx, out_root, pair_a, eval_pairs, rankers)
    summary = _summary_rows(ctx, out_root, pair_a, eval_pairs, rankers)
    preamble = provenance_lines(ctx.cfg, list(ctx.rulesets))
    _write_table(out_dir / "metrics_by_seed.csv", PLOT_COLUMNS, by_seed, preamble)
    _write_table(out_dir / "summary.csv", _SUMMARY_HEADER, summary, preamble)
    table_name = "transfer_unseen" if prefix == "rq3" else "transfer_cross_family"
    emit_plot_data({table_name: by_seed}, out_dir / "plot_data", preamble)
    _write_state_runs(ctx, out_root, out_dir, prefix, pair_a, eval_pairs, rankers)
    _render_delta_bars(out_dir, summary, ctx.cfg.metric_specs(), prefix)
    return by_seed, summary


def run_rq3(
    cfg: ExperimentConfig,
    pair_a: str | None = None,
    unseen_pairs: Sequence[str] | None = None,
    out: str | Path | None = None,
    ctx: ExperimentContext | None = None,
) -> dict[str, object]:
    """Evaluate the rq2 checkpoints on same-family pairs never trained on."""
    ctx = ctx or ExperimentContext.build(cfg)
    out_root = Path(out if out is not None else cfg.out_dir)
    out_dir = out_root / "rq3"
    if pair_a is None:
        pair_a = next(iter(ctx.rulesets))
    ruleset_a = ctx._ruleset(pair_a)
    if unseen_pairs is None:
        unseen_pairs = [
            pid
            for pid, rs in ctx.rulesets.items()
            if rs.family_id == ruleset_a.family_id and pid != pair_a
        ]
    if not unseen_pairs:
        raise ConfigInvalid(f"no held-out pairs to evaluate against {pair_a!r}")
    for pid in unseen_pairs:
        ctx._ruleset(pid)
        if pid == pair_a:
            raise PairNotUnseen(f"pair {pid!r} is the training pair itself")

    by_seed, summary = _transfer_tables(ctx, out_root, out_dir, "rq3", pair_a, unseen_pairs)
    write_report(out_root, cfg, list(ctx.rulesets))
    return {
        "pair_a": pair_a,
        "unseen_pairs": list(unseen_pairs),
        "by_seed": by_seed,
        "summary": summary,
        "out": out_dir,
        "ctx": ctx,
    }


def run_rq4(
    cfg: ExperimentConfig,
    pair_a: str | None = None,
    cross_family_pairs: Sequence[str] | None = None,
    out: str | Path | None = None,
    ctx: ExperimentContext | None = None,
) -> dict[str, object]:
    """Evaluate the rq2 checkpoints against a disjoint rule family."""
    ctx = ctx or ExperimentContext.build(cfg)
    out_root = Path(out if out is not None else cfg.out_dir)
    out_dir = out_root / "rq4"
    if pair_a is None:
        pair_a = next(iter(ctx.rulesets))
    ruleset_a = ctx._ruleset(pair_a)
    if cross_family_pairs is None:
        cross_family_pairs = [
            pid
            for pid, rs in ctx.rulesets.items()
            if rs.family_id != ruleset_a.family_id
        ]
    if not cross_family_pairs:
        raise ConfigInvalid(f"no cross-family pairs to evaluate against {pair_a!r}")
    for pid in cross_family_pairs:
        if ctx._ruleset(pid).family_id == ruleset_a.family_id:
            raise FamilyOverlap(
                f"pair {pid!r} belongs to the training pair's family "
                f"{ruleset_a.family_id!r}"
            )

    by_seed, summary = _transfer_tables(
        ctx, out_root, out_dir, "rq4", pair_a, cross_family_pairs
    )
    identity_rows = identity_control_rows(ctx)
    preamble = provenance_lines(cfg, list(ctx.rulesets))
    _write_table(out_dir / "identity_control.csv", _IDENTITY_HEADER, identity_rows, preamble)
    write_report(out_root, cfg, list(ctx.rulesets))
    return {
        "pair_a": pair_a,
        "cross_family_pairs": list(cross_family_pairs),
        "by_seed": by_seed,
        "summary": summary,
        "identity_control": identity_rows,
        "out": out_dir,
        "ctx": ctx,
    }


def run_all(
    cfg: ExperimentConfig,
    out: str | Path | None = None,
    pair_a: str | None = None,
    ctx: ExperimentContext | None = None,
) -> dict[str, dict[str, object]]:
    """All four pipelines in order against one output tree."""
    ctx = ctx or ExperimentContext.build(cfg)
    results = {"rq1": run_rq1(cfg, out, ctx)}
    results["rq2"] = run_rq2(cfg, pair_a, out, ctx)
    pair_a = results["rq2"]["pair_a"]
    results["rq3"] = run_rq3(cfg, pair_a, None, out, ctx)
    results["rq4"] = run_rq4(cfg, pair_a, None, out, ctx)
    return results


# -- figures ----------------------------------------------------------------


def _safe_label(label: str) -> str:
    return label.replace("@", "_at_")


def _render_language_bars(out_dir, metrics_rows, specs, prefix) -> None:
    from . import plots

    for spec in specs:
        rows = [dict(r) for r in metrics_rows if r["metric"] == spec.label]
        for r in rows:
            r["group"] = r["query_language"]
        # Source rows repeat per pair; a dict keyed by (x, group) dedupes them.
        plots.save_grouped_bars(
            rows,
            x="ranker",
            group="group",
            value="value",
            path=out_dir / "figures" / f"fig_{prefix}_{_safe_label(spec.label)}.png",
            title=f"{spec.label} by query language (mean over seeds)",
            ylabel=spec.label,
        )


def _render_condition_bars(out_dir, by_seed, specs, prefix) -> None:
    from . import plots

    for spec in specs:
        grouped: dict[tuple[str, str], list[float]] = {}
        for r in by_seed:
            if r["metric"] != spec.label:
                continue
            grouped.setdefault((r["ranker"], f"{r['query_language']}/{r['condition']}"), []).append(
                float(r["value"])
            )
        rows = [
            {"ranker": ranker, "group": group, "value": _mean(vals)}
            for (ranker, group), vals in grouped.items()
        ]
        plots.save_grouped_bars(
            rows,
            x="ranker",
            group="group",
            value="value",
            path=out_dir / "figures" / f"fig_{prefix}_{_safe_label(spec.label)}.png",
            title=f"{spec.label} before and after fine-tuning (mean over seeds)",
            ylabel=spec.label,
        )


def _render_delta_bars(out_dir, summary, specs, prefix) -> None:
    from . import plots

    for spec in specs:
        rows = [
            {
                "ranker": r["ranker"],
                "group": f"{r['pair']}/{r['query_language']}",
                "value": float(r["mean_delta"]),
            }
            for r in summary
            if r["metric"] == spec.label
        ]
        plots.save_grouped_bars(
            rows,
            x="ranker",
            group="group",
            value="value",
            path=out_dir / "figures" / f"fig_{prefix}_{_safe_label(spec.label)}_delta.png",
            title=f"{spec.label} change from fine-tuning (mean over seeds)",
            ylabel=f"delta {spec.label}",
        )


# -- REPORT.md ---------------------------------------------------------------


def _markdown_table(rows: list[dict[str, str]]) -> list[str]:
    if not rows:
        return ["(no rows)", ""]
    header = list(rows[0])
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for row in rows:
        lines.append("| " + " | ".join(row[c] for c in header) + " |")
    lines.append("")
    return lines


_REPORT_SECTIONS = (
    ("rq1", "metrics.csv", "Robustness of untrained rankers across varieties"),
    ("rq1", "sign_tests.csv", "Source vs variety gaps with sign tests"),
    ("rq2", "summary.csv", "Fine-tuning on the training pair"),
    ("rq3", "summary.csv", "Transfer to held-out same-family pairs"),
    ("rq4", "summary.csv", "Transfer across rule families"),
)


def write_report(
    out_root: str | Path, cfg: ExperimentConfig, ruleset_ids: Sequence[str]
) -> Path:
    """Regenerate REPORT.md from whichever pipeline tables exist on disk."""
    out_root = Path(out_root)
    lines = ["# Cross-variety retrieval results", ""]
    for pline in provenance_lines(cfg, ruleset_ids):
        lines.append("- " + pline.lstrip("# "))
    lines.append("")
    for rq, filename, title in _REPORT_SECTIONS:
        path = out_root / rq / filename
        if not path.exists():
            continue
        lines.append(f"## {title}")
        lines.append("")
        lines.extend(_markdown_table(read_table(path)))
    target = out_root / "REPORT.md"
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines).rstrip("\n") + "\n")
    return target
