"""Command line interface for the toolkit.

Standalone subcommands (`index`, `search`, `transduce`, `train`, `evaluate`,
`compare`) operate on user-supplied TSV, qrels, and run files; `experiment`
drives the four research-question pipelines on the synthetic benchmark.
Domain errors print one line to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, validate_config, with_overrides
from .corpus import (
    QuerySet,
    load_collection,
    load_qrels,
    load_queries,
    read_run,
    run_entries_to_rankings,
    write_run,
)
from .encoder import (
    EncodingStore,
    ScoringMode,
    SubwordHasherConfig,
    init_params,
    load_params,
    rerank,
    save_params,
    search_dense,
)
from .errors import ConfigInvalid, VarirError
from .evaluation import (
    MetricSpec,
    compare_runs,
    evaluate_run,
    write_comparison_csv,
    write_eval_csv,
)
from .experiments import run_rq1, run_rq2, run_rq3, run_rq4
from .lexical import bm25_search, build_index, load_index, save_index
from .training import build_triplets, train
from .transducer import load_ruleset, transduce, transduce_queryset

_SEARCH_MODES = {
    "single_vector": ScoringMode.SINGLE_VECTOR,
    "multi_vector": ScoringMode.MULTI_VECTOR_MAXSIM,
}


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = with_overrides(cfg, seeds=(args.seed,))
    validate_config(cfg)
    return cfg


def _save_queries(queries: QuerySet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in queries:
            if q.language_tag:
                f.write(f"{q.query_id}\t{q.text}\t{q.language_tag}\n")
            else:
                f.write(f"{q.query_id}\t{q.text}\n")


def _cmd_index(args) -> int:
    cfg = _load_cfg(args)
    coll = load_collection(args.docs, fmt=args.format)
    index = build_index(coll, cfg.analyzer())
    save_index(index, args.out)
    print(f"indexed {len(coll)} documents, {len(index.postings)} terms -> {args.out}")
    return 0


def _cmd_search(args) -> int:
    cfg = _load_cfg(args)
    queries = load_queries(args.queries)
    run = {}
    if args.ranker == "bm25":
        if not args.index:
            raise ConfigInvalid("bm25 search needs --index")
        index = load_index(args.index)
        for q in queries:
            run[q.query_id] = bm25_search(q, index, cfg.bm25_params(), k=args.top_k)
    else:
        if not args.docs or not args.params:
            raise ConfigInvalid(f"{args.ranker} search needs --docs and --params")
        params = load_params(args.params)
        coll = load_collection(args.docs, fmt=args.format)
        store = EncodingStore.build(coll, params, cfg.analyzer())
        if args.ranker == "rerank":
            if not args.base_run:
                raise ConfigInvalid("rerank needs --base-run")
            base = run_entries_to_rankings(read_run(args.base_run))
            for q in queries:
                if q.query_id not in base:
                    raise ConfigInvalid(f"query {q.query_id!r} missing from base run")
                run[q.query_id] = rerank(base[q.query_id], q, store, args.depth)
        else:
            mode = _SEARCH_MODES[args.ranker]
            for q in queries:
                run[q.query_id] = search_dense(q, store, mode, k=args.top_k)
    write_run(run, args.tag, args.out)
    print(f"wrote {sum(len(r) for r in run.values())} entries for {len(run)} queries -> {args.out}")
    return 0


def _cmd_transduce(args) -> int:
    ruleset = load_ruleset(args.rules)
    if args.text is not None:
        print(transduce(args.text, ruleset))
        return 0
    if not args.queries or not args.out:
        raise ConfigInvalid("transduce needs --text, or --queries with --out")
    queries = load_queries(args.queries)
    _save_queries(transduce_queryset(queries, ruleset), args.out)
    print(f"transduced {len(queries)} queries with {ruleset.ruleset_id} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    coll = load_collection(args.docs, fmt=args.format)
    queries = load_queries(args.queries)
    qrels = load_qrels(args.qrels)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    tcfg = cfg.train_config(seed, _SEARCH_MODES[args.mode])
    index = build_index(coll, cfg.analyzer())
    built = build_triplets(queries, qrels, coll, tcfg, index, cfg.bm25_params())
    if args.init:
        params0 = load_params(args.init)
    else:
        hasher = SubwordHasherConfig(cfg.ngram_min, cfg.ngram_max, cfg.encoder_buckets)
        params0 = init_params(cfg.encoder_dim, hasher, seed)
    trained, report = train(params0, built.triplets, coll, tcfg, cfg.analyzer())
    save_params(trained, args.out)
    if args.manifest:
        with open(args.manifest, "w", encoding="utf-8", newline="") as f:
            f.write(f"# seed={seed} mode={args.mode}\n")
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
    final_loss = report.epoch_mean_loss[-1]
    print(
        f"trained on {report.triplet_count} triplets for {tcfg.epochs} epochs "
        f"(final mean loss {final_loss:.6f}) -> {args.out}"
    )
    return 0


def _parse_metrics(raw: str, threshold: int) -> list[MetricSpec]:
    return [MetricSpec.parse(part.strip(), threshold) for part in raw.split(",") if part.strip()]


def _cmd_evaluate(args) -> int:
    qrels = load_qrels(args.qrels)
    run = run_entries_to_rankings(read_run(args.run))
    specs = _parse_metrics(args.metrics, args.threshold)
    report = evaluate_run(run, qrels, specs, run_tag=Path(args.run).name)
    if args.out:
        write_eval_csv(report, args.out)
    for spec in specs:
        print(f"{spec.label}\t{report.means[spec.label]:.6f}")
    return 0


def _cmd_compare(args) -> int:
    qrels = load_qrels(args.qrels)
    spec = MetricSpec.parse(args.metric, args.threshold)
    report_a = evaluate_run(
        run_entries_to_rankings(read_run(args.run_a)), qrels, [spec], run_tag="a"
    )
    report_b = evaluate_run(
        run_entries_to_rankings(read_run(args.run_b)), qrels, [spec], run_tag="b"
    )
    result = compare_runs(report_a, report_b, spec.label)
    if args.out:
        write_comparison_csv(result, args.out)
    print(f"mean_a\t{result.mean_a:.6f}")
    print(f"mean_b\t{result.mean_b:.6f}")
    print(f"mean_delta\t{result.mean_delta:.6f}")
    print(f"p_value\t{result.p_value:.6g}")
    print(f"n_nonzero\t{result.n_nonzero}")
    return 0


def _cmd_experiment(args) -> int:
    cfg = _load_cfg(args)
    out = args.out if args.out else cfg.out_dir
    if args.which == "rq1":
        result = run_rq1(cfg, out)
    elif args.which == "rq2":
        result = run_rq2(cfg, args.pair, out)
    elif args.which == "rq3":
        result = run_rq3(cfg, args.pair, args.eval_pair or None, out)
    else:
        result = run_rq4(cfg, args.pair, args.eval_pair or None, out)
    print(f"{args.which} complete -> {result['out']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varir",
        description="Cross-variety retrieval toolkit: BM25 and hashed bi-encoder "
        "rankers, rule-based variety transduction, contrastive fine-tuning, "
        "and the research-question pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed_help="override the config's seed list with one seed"):
        p.add_argument("--config", help="line-based key = value config file")
        p.add_argument("--seed", type=int, help=seed_help)

    p = sub.add_parser("index", help="build and save a BM25 inverted index")
    p.add_argument("--docs", required=True, help="document TSV/JSONL file")
    p.add_argument("--format", default="tsv", choices=("tsv", "jsonl"))
    p.add_argument("--out", required=True, help="index JSON path")
    add_common(p)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("search", help="rank documents for a query file")
    p.add_argument("--ranker", required=True, choices=("bm25", "single_vector", "multi_vector", "rerank"))
    p.add_argument("--queries", required=True, help="query TSV file")
    p.add_argument("--index", help="index JSON (bm25)")
    p.add_argument("--docs", help="document file (neural rankers)")
    p.add_argument("--format", default="tsv", choices=("tsv", "jsonl"))
    p.add_argument("--params", help="encoder parameter file (neural rankers)")
    p.add_argument("--base-run", help="first-stage run file (rerank)")
    p.add_argument("--depth", type=int, default=10, help="rerank head size")
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--tag", default="varir")
    p.add_argument("--out", required=True, help="output run file")
    add_common(p)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("transduce", help="rewrite text or queries into a variety")
    p.add_argument("--rules", required=True, help="ruleset file")
    p.add_argument("--text", help="one string to rewrite to stdout")
    p.add_argument("--queries", help="query TSV to rewrite")
    p.add_argument("--out", help="output TSV for --queries")
    p.set_defaults(func=_cmd_transduce)

    p = sub.add_parser("train", help="contrastive fine-tuning of the encoder")
    p.add_argument("--docs", required=True)
    p.add_argument("--format", default="tsv", choices=("tsv", "jsonl"))
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--mode", default="multi_vector", choices=tuple(_SEARCH_MODES))
    p.add_argument("--init", help="starting parameter file (default: fresh seeded init)")
    p.add_argument("--out", required=True, help="trained parameter file")
    p.add_argument("--manifest", help="optional loss-curve CSV")
    add_common(p, seed_help="training seed (default: first config seed)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="mrr@10,recall@1000")
    p.add_argument("--threshold", type=int, default=1, help="relevance grade threshold")
    p.add_argument("--out", help="optional per-query CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="paired sign test between two run files")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="mrr@10")
    p.add_argument("--threshold", type=int, default=1)
    p.add_argument("--out", help="optional comparison CSV")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("experiment", help="run a research-question pipeline")
    p.add_argument("which", choices=("rq1", "rq2", "rq3", "rq4"))
    p.add_argument("--pair", help="training pair ruleset id (rq2/rq3/rq4)")
    p.add_argument(
        "--eval-pair",
        action="append",
        help="evaluation pair for rq3/rq4; repeatable (default: all eligible)",
    )
    p.add_argument("--out", help="output directory (default: config out_dir)")
    add_common(p)
    p.set_defaults(func=_cmd_experiment)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VarirError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
