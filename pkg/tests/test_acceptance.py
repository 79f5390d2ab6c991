"""Acceptance gate: ten end-to-end checks at the default configuration.

Each test prints one PASS/FAIL line (visible with -s or on failure) and
asserts the same condition, so `pytest -v` shows one verdict per check.
The expensive pipelines run once in a session fixture and are shared.
"""
from __future__ import annotations

import filecmp
import math
import random
import string
import time
from types import SimpleNamespace

import numpy as np
import pytest

from varir.config import ExperimentConfig, with_overrides
from varir.corpus import Document, DocumentCollection, Query, QuerySet
from varir.encoder import ScoringMode
from varir.evaluation import MetricSpec, evaluate_run
from varir.experiments import ExperimentContext, run_all, run_rq1, run_rq2, run_rq3, run_rq4
from varir.lexical import BM25Params, bm25_score_naive, bm25_search, build_index
from varir.synth import build_rulesets
from varir.training import TrainConfig, build_triplets, gradient_check, infonce_loss
from varir.transducer import (
    FamilySpec,
    RewriteRule,
    Scope,
    VarietyRuleSet,
    generate_family,
    transduce,
)


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


@pytest.fixture(scope="session")
def chain(tmp_path_factory):
    """The four pipelines at the default configuration, one shared context."""
    cfg = ExperimentConfig()
    out = tmp_path_factory.mktemp("acceptance_default")
    ctx = ExperimentContext.build(cfg)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    rq1 = run_rq1(cfg, out, ctx)
    timings["rq1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rq2 = run_rq2(cfg, None, out, ctx)
    timings["rq2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rq3 = run_rq3(cfg, rq2["pair_a"], None, out, ctx)
    timings["rq3"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rq4 = run_rq4(cfg, rq2["pair_a"], None, out, ctx)
    timings["rq4"] = time.perf_counter() - t0

    return SimpleNamespace(
        cfg=cfg, out=out, ctx=ctx, rq1=rq1, rq2=rq2, rq3=rq3, rq4=rq4, timings=timings
    )


def _naive_mrr(doc_ids, judged, k, threshold=1):
    for rank, doc_id in enumerate(doc_ids[:k], start=1):
        if judged.get(doc_id, 0) >= threshold:
            return 1.0 / rank
    return 0.0


def _naive_recall(doc_ids, judged, k, threshold=1):
    relevant = {d for d, g in judged.items() if g >= threshold}
    return sum(1 for d in doc_ids[:k] if d in relevant) / len(relevant)


def _naive_ndcg(doc_ids, judged, k):
    dcg = sum(
        (2 ** judged.get(d, 0) - 1) / math.log2(r + 1)
        for r, d in enumerate(doc_ids[:k], start=1)
    )
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = sum((2**g - 1) / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
    return dcg / idcg


def test_criterion_01_metric_oracle():
    """1000 random ranking instances agree with direct formulas to 1e-12."""
    rng = np.random.default_rng(90_001)
    doc_pool = [f"d{i}" for i in range(50)]
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        judged_docs = rng.choice(doc_pool, size=int(rng.integers(2, 12)), replace=False)
        judged = {d: int(rng.integers(0, 3)) for d in judged_docs}
        if not any(g >= 1 for g in judged.values()):
            judged[judged_docs[0]] = 1
        ranked = list(rng.permutation(doc_pool)[: int(rng.integers(1, 40))])
        k = int(rng.integers(1, 25))
        report = evaluate_run(
            {"q": ranked},
            {"q": judged},
            [MetricSpec("mrr", k), MetricSpec("recall", k), MetricSpec("ndcg", k)],
        )
        got = report.per_query["q"]
        worst = max(
            worst,
            abs(got[f"mrr@{k}"] - _naive_mrr(ranked, judged, k)),
            abs(got[f"recall@{k}"] - _naive_recall(ranked, judged, k)),
            abs(got[f"ndcg@{k}"] - _naive_ndcg(ranked, judged, k)),
        )
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 10.0
    _report(1, ok, f"1000 instances, worst |diff|={worst:.2e}, {elapsed:.1f}s (<10s)")


def test_criterion_02_bm25_oracle():
    """Indexed BM25 matches a naive full scan on 50 corpora plus a hand case."""
    vocab = [f"w{i}" for i in range(30)]
    rng = np.random.default_rng(90_002)
    params = BM25Params(k1=0.9, b=0.4)
    t0 = time.perf_counter()
    worst = 0.0
    order_ok = True
    for _ in range(50):
        docs = {
            f"d{i:03d}": " ".join(rng.choice(vocab, size=int(rng.integers(1, 30))))
            for i in range(int(rng.integers(2, 25)))
        }
        coll = DocumentCollection(Document(d, t) for d, t in docs.items())
        index = build_index(coll)
        query = " ".join(rng.choice(vocab, size=int(rng.integers(1, 6))))
        got = bm25_search(query, index, params, k=len(coll))
        naive = sorted(
            ((d, s) for d, s in bm25_score_naive(query, coll, params) if s > 0.0),
            key=lambda pair: (-pair[1], pair[0]),
        )
        order_ok &= [d for d, _ in got] == [d for d, _ in naive]
        worst = max(
            (abs(a - b) for (_, a), (_, b) in zip(got, naive)), default=worst
        )
    hand = bm25_search(
        "apple",
        build_index(DocumentCollection([Document("d1", "apple"), Document("d2", "banana")])),
        params,
    )
    hand_ok = len(hand) == 1 and hand[0][0] == "d1" and abs(hand[0][1] - 0.693147) < 1e-6
    elapsed = time.perf_counter() - t0
    ok = order_ok and worst < 1e-9 and hand_ok and elapsed < 30.0
    _report(2, ok, f"50 corpora, worst |diff|={worst:.2e}, hand case {hand[0][1]:.6f}, {elapsed:.1f}s (<30s)")


GRAD_DOCS = DocumentCollection(
    [
        Document("d0", "river bank fishing spot"),
        Document("d1", "money bank account branch"),
        Document("d2", "mountain trail hiking gear"),
        Document("d3", "fishing rod and reel shop"),
        Document("d4", "savings account interest rates"),
        Document("d5", "trail mix snack food"),
    ]
)
GRAD_QUERIES = QuerySet(
    [
        Query("q0", "bank fishing"),
        Query("q1", "bank account savings"),
        Query("q2", "hiking trail gear"),
    ]
)
GRAD_QRELS = {"q0": {"d0": 1}, "q1": {"d1": 1, "d4": 1}, "q2": {"d2": 1}}


def test_criterion_03_gradients_and_loss_value():
    """Analytic gradients match finite differences; uniform loss is ln(N+1)."""
    from varir.encoder import SubwordHasherConfig, init_params
    from varir.lexical import analyze

    params = init_params(dim=16, hasher=SubwordHasherConfig(3, 5, 512), seed=13)
    tcfg = TrainConfig(
        epochs=1, batch_size=2, negatives_per_query=3, negative_source="bm25_hard"
    )
    triplets = build_triplets(
        GRAD_QUERIES, GRAD_QRELS, GRAD_DOCS, tcfg, build_index(GRAD_DOCS)
    ).triplets
    errors = {}
    for mode in (ScoringMode.SINGLE_VECTOR, ScoringMode.MULTI_VECTOR_MAXSIM):
        errors[mode.value] = gradient_check(
            params,
            triplets,
            GRAD_DOCS,
            coordinates=120,
            mode=mode,
            temperature=0.5,
            seed=7,
        )
    toks = analyze("bank fishing spot")
    loss_ok = True
    for n_negs in (1, 3, 7):
        for mode in (ScoringMode.SINGLE_VECTOR, ScoringMode.MULTI_VECTOR_MAXSIM):
            loss, _, _ = infonce_loss(toks, toks, [toks] * n_negs, params, 0.05, mode)
            loss_ok &= abs(loss - math.log(n_negs + 1)) < 1e-12
    worst = max(errors.values())
    ok = worst < 1e-5 and loss_ok
    _report(
        3,
        ok,
        "grad rel err "
        + ", ".join(f"{m}={e:.1e}" for m, e in errors.items())
        + f" (<1e-5, 120 coords), uniform loss == ln(N+1) to 1e-12: {loss_ok}",
    )


def test_criterion_04_transducer_invariants():
    """Identity, determinism, the hand trace, and family sampling invariants."""
    alphabet = string.ascii_lowercase + string.ascii_uppercase + " .,-'éü東"
    rng = random.Random(90_004)
    empty = VarietyRuleSet("empty-v0", "empty")
    nontrivial = VarietyRuleSet(
        "nt-v0",
        "nt",
        (
            RewriteRule("th", "z"),
            RewriteRule("s", "ss", Scope.WORD_FINAL),
            RewriteRule("c", "k", Scope.WORD_INITIAL),
        ),
        {"the": "ze"},
    )
    t0 = time.perf_counter()
    identity_ok = True
    determinism_ok = True
    for _ in range(10_000):
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 60)))
        identity_ok &= transduce(s, empty) == s
        determinism_ok &= transduce(s, nontrivial) == transduce(s, nontrivial)
    trace_ok = (
        transduce("abb", VarietyRuleSet("t", "t", (RewriteRule("ab", "x"), RewriteRule("b", "y"))))
        == "xy"
    )
    family_ok = True
    for case in range(20):
        pool = tuple(
            RewriteRule(f"c{case}q{i}x", f"R{i}") for i in range(rng.randint(1, 15))
        )
        spec = FamilySpec(
            family_id=f"c{case}",
            shared_rule_pool=pool,
            sampling_fraction=rng.uniform(0.1, 1.0),
            seed=rng.randint(0, 10_000),
            variety_count=rng.randint(2, 5),
        )
        siblings = generate_family(spec)
        family_ok &= len(siblings) == spec.variety_count
        for a in siblings:
            family_ok &= pool[0] in a.rules and set(a.rules) <= set(pool)
            for b in siblings:
                family_ok &= bool(set(a.rules) & set(b.rules))
    elapsed = time.perf_counter() - t0
    ok = identity_ok and determinism_ok and trace_ok and family_ok and elapsed < 5.0
    _report(
        4,
        ok,
        f"10000 strings identity={identity_ok} determinism={determinism_ok}, "
        f"hand trace={trace_ok}, 20 family specs ok={family_ok}, {elapsed:.1f}s (<5s)",
    )


def _metric_cell(rows, **keys):
    matches = [
        row for row in rows if all(str(row[k]) == str(v) for k, v in keys.items())
    ]
    assert len(matches) == 1, f"expected one row for {keys}, got {len(matches)}"
    return matches[0]


def test_criterion_05_untrained_rankers_degrade(chain):
    """BM25 and both bi-encoder modes score each variety strictly below the
    source, with a pooled sign test under 0.05, inside the time budget."""
    primary = chain.cfg.metrics[0]
    pairs = list(build_rulesets(chain.cfg))
    details = []
    ok = chain.timings["rq1"] < 180.0
    for ranker in ("bm25", "single_vector", "multi_vector"):
        for pair in pairs:
            high = _metric_cell(
                chain.rq1["metrics"],
                ranker=ranker, pair=pair, query_language="source", metric=primary,
            )["value"]
            low = _metric_cell(
                chain.rq1["metrics"],
                ranker=ranker, pair=pair, query_language=pair, metric=primary,
            )["value"]
            p = float(
                _metric_cell(
                    chain.rq1["sign_tests"], ranker=ranker, pair=pair, metric=primary
                )["p_value"]
            )
            ok = ok and low < high and p < 0.05
        details.append(f"{ranker}: src {high:.3f} > low {low:.3f}, last p={p:.2g}")
    _report(
        5,
        ok,
        f"{primary} drops on all {len(pairs)} pairs x 3 rankers "
        f"({'; '.join(details)}), rq1 {chain.timings['rq1']:.0f}s (<180s)",
    )


def test_criterion_06_finetuning_recovers(chain):
    """Both trained modes improve on the tuned variety (p<0.05) and keep the
    source within a 5% relative band, inside the time budget."""
    primary = chain.cfg.metrics[0]
    pair_a = chain.rq2["pair_a"]
    ok = chain.timings["rq2"] < 300.0
    details = []
    for ranker in ("single_vector", "multi_vector"):
        low = _metric_cell(
            chain.rq2["summary"],
            ranker=ranker, pair=pair_a, query_language=pair_a, metric=primary,
        )
        high = _metric_cell(
            chain.rq2["summary"],
            ranker=ranker, pair=pair_a, query_language="source", metric=primary,
        )
        delta = float(low["mean_delta"])
        p = float(low["p_value"])
        src_orig = float(high["mean_orig"])
        src_ours = float(high["mean_ours"])
        ok = ok and delta > 0 and p < 0.05 and src_ours >= 0.95 * src_orig
        details.append(
            f"{ranker}: low +{delta:.3f} (p={p:.2g}), source {src_orig:.3f}->{src_ours:.3f}"
        )
    _report(
        6,
        ok,
        f"{primary} on {pair_a}: {'; '.join(details)}, "
        f"rq2 {chain.timings['rq2']:.0f}s (<300s)",
    )


def test_criterion_07_transfer_to_unseen_sibling(chain):
    """Gains carry to the held-out same-family pair on at least 4 of 5 seeds
    for each trained mode, inside the time budget."""
    primary = chain.cfg.metrics[0]
    ok = chain.timings["rq3"] < 180.0
    details = []
    for ranker in ("single_vector", "multi_vector"):
        for pair in chain.rq3["unseen_pairs"]:
            row = _metric_cell(
                chain.rq3["summary"],
                ranker=ranker, pair=pair, query_language=pair, metric=primary,
            )
            positive = int(row["seeds_positive"])
            n_seeds = int(row["n_seeds"])
            ok = ok and n_seeds == len(chain.cfg.seeds) and positive >= 4
            details.append(f"{ranker}@{pair}: {positive}/{n_seeds} seeds")
    _report(
        7,
        ok,
        f"{primary} unseen-pair gains on {'; '.join(details)}, "
        f"rq3 {chain.timings['rq3']:.0f}s (<180s)",
    )


def test_criterion_08_cross_family_pipeline_completes(chain):
    """The cross-family pipeline finishes with finite metrics, zero-gap
    identity controls, and provenance headers, inside the time budget."""
    summary = chain.rq4["summary"]
    finite = all(
        math.isfinite(float(row[k]))
        for row in summary
        for k in ("mean_orig", "mean_ours", "mean_delta")
    )
    pairs_covered = {row["pair"] for row in summary} == set(
        chain.rq4["cross_family_pairs"]
    )
    identity = chain.rq4["identity_control"]
    identity_ok = bool(identity) and all(float(r["gap"]) == 0.0 for r in identity)
    first_line = (chain.rq4["out"] / "summary.csv").read_text(encoding="utf-8").splitlines()[0]
    provenance_ok = first_line.startswith("# config_hash=")
    ok = (
        bool(summary)
        and finite
        and pairs_covered
        and identity_ok
        and provenance_ok
        and chain.timings["rq4"] < 180.0
    )
    _report(
        8,
        ok,
        f"{len(summary)} summary rows finite={finite}, pairs={sorted(chain.rq4['cross_family_pairs'])}, "
        f"identity gaps zero={identity_ok}, provenance={provenance_ok}, "
        f"rq4 {chain.timings['rq4']:.0f}s (<180s)",
    )


def test_criterion_09_byte_identical_reruns(tmp_path):
    """A reduced but complete configuration reproduces every output file
    byte for byte across two separate invocations."""
    cfg = with_overrides(
        ExperimentConfig(),
        doc_count=60,
        vocab_size=40,
        train_query_count=12,
        eval_query_count=8,
        rules_per_family=6,
        encoder_dim=16,
        encoder_buckets=512,
        epochs=1,
        batch_size=4,
        seeds=(1, 2),
        rerank_depth=5,
    )
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run_all(cfg, out=out_a)
    run_all(cfg, out=out_b)
    files_a = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
    same_tree = files_a == files_b
    mismatched = [
        str(rel)
        for rel in files_a
        if same_tree and not filecmp.cmp(out_a / rel, out_b / rel, shallow=False)
    ]
    ok = same_tree and not mismatched and len(files_a) > 0
    _report(
        9,
        ok,
        f"{len(files_a)} files (runs, CSVs, REPORT.md, figures) identical: "
        f"tree match={same_tree}, mismatches={mismatched[:3]}",
    )


def test_criterion_10_rerank_conserves_recall(chain):
    """Rerank reproduces the first stage's recall rows exactly."""
    recall_label = next(m for m in chain.cfg.metrics if m.startswith("recall"))

    def cells(ranker):
        return {
            (r["pair"], r["query_language"], r["seed"]): r["value"]
            for r in chain.rq1["by_seed"]
            if r["ranker"] == ranker and r["metric"] == recall_label
        }

    single = cells("single_vector")
    rerank = cells("rerank")
    ok = bool(single) and rerank == single
    _report(
        10,
        ok,
        f"{len(single)} {recall_label} cells identical between rerank and its first stage",
    )
