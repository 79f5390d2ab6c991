"""Tests for ranking metrics, the sign test, and report comparison."""
from __future__ import annotations

import math

import numpy as np
import pytest

from varir.errors import QuerySetMismatch
from varir.evaluation import (
    ComparisonResult,
    EvalReport,
    MetricSpec,
    compare_runs,
    evaluate_run,
    mrr_at_k,
    ndcg_at_k,
    recall_at_k,
    sign_test,
    write_comparison_csv,
    write_eval_csv,
)


class TestMetricSpec:
    def test_parse(self):
        assert MetricSpec.parse("mrr@10") == MetricSpec("mrr", 10, 1)
        assert MetricSpec.parse("recall@1000") == MetricSpec("recall", 1000, 1)
        assert MetricSpec.parse("ndcg@20", threshold=2) == MetricSpec("ndcg", 20, 2)
        assert MetricSpec.parse("mrr@10").label == "mrr@10"

    @pytest.mark.parametrize("label", ["mrr", "mrr@", "mrr@x", "map@5", "@10"])
    def test_parse_rejects(self, label):
        with pytest.raises(ValueError):
            MetricSpec.parse(label)

    def test_validation(self):
        with pytest.raises(ValueError):
            MetricSpec("mrr", 0)
        with pytest.raises(ValueError):
            MetricSpec("mrr", 10, threshold=0)


class TestHandCases:
    def test_ndcg_alternating_relevance(self):
        # Gains [1, 0, 1] at k=3: DCG = 1 + 0 + 1/log2(4) = 1.5 and
        # IDCG = 1 + 1/log2(3) = 1.630930, so nDCG = 0.919721.
        run = {"q1": ["d1", "d2", "d3"]}
        qrels = {"q1": {"d1": 1, "d2": 0, "d3": 1}}
        result = ndcg_at_k(run, qrels, k=3)
        assert result.values["q1"] == pytest.approx(1.5 / 1.630930, abs=1e-6)
        assert round(result.values["q1"], 6) == 0.919721

    def test_ndcg_perfect_ranking_is_one(self):
        run = {"q1": ["d3", "d1", "d2"]}
        qrels = {"q1": {"d1": 1, "d2": 0, "d3": 2}}
        assert ndcg_at_k(run, qrels, k=3).values["q1"] == pytest.approx(1.0, abs=1e-12)

    def test_mrr_positions(self):
        qrels = {"q1": {"d9": 1}}
        assert mrr_at_k({"q1": ["d9", "d2"]}, qrels).values["q1"] == 1.0
        assert mrr_at_k({"q1": ["d2", "d9"]}, qrels).values["q1"] == 0.5
        assert mrr_at_k({"q1": ["d2", "d3", "d4", "d9"]}, qrels, k=3).values["q1"] == 0.0

    def test_recall_fractions(self):
        qrels = {"q1": {"d1": 1, "d2": 1}}
        assert recall_at_k({"q1": ["d1", "d9"]}, qrels, k=2).values["q1"] == 0.5
        assert recall_at_k({"q1": ["d1", "d2"]}, qrels, k=2).values["q1"] == 1.0
        assert recall_at_k({"q1": ["d9", "d8"]}, qrels, k=2).values["q1"] == 0.0

    def test_threshold_filters_low_grades(self):
        run = {"q1": ["d1", "d2"]}
        qrels = {"q1": {"d1": 1, "d2": 2}}
        assert mrr_at_k(run, qrels, threshold=2).values["q1"] == 0.5
        assert recall_at_k(run, qrels, k=2, threshold=2).values["q1"] == 1.0

    def test_scored_rankings_accepted(self):
        run = {"q1": [("d1", 2.5), ("d2", 1.0)]}
        qrels = {"q1": {"d2": 1}}
        assert mrr_at_k(run, qrels).values["q1"] == 0.5

    def test_query_missing_from_run_scores_zero(self):
        qrels = {"q1": {"d1": 1}, "q2": {"d2": 1}}
        result = mrr_at_k({"q1": ["d1"]}, qrels)
        assert result.values == {"q1": 1.0, "q2": 0.0}
        assert result.mean == 0.5

    def test_queries_without_positives_excluded_from_mean(self):
        qrels = {"q1": {"d1": 1}, "q2": {"d2": 0}}
        result = mrr_at_k({"q1": ["d1"], "q2": ["d2"]}, qrels)
        assert result.values == {"q1": 1.0}
        assert result.mean == 1.0
        assert result.excluded == 1

    def test_evaluate_run_bundles_metrics(self):
        run = {"q1": ["d1", "d2", "d3"]}
        qrels = {"q1": {"d1": 1, "d3": 1}}
        specs = [MetricSpec("mrr", 10), MetricSpec("recall", 2), MetricSpec("ndcg", 3)]
        report = evaluate_run(run, qrels, specs, run_tag="demo")
        assert report.run_tag == "demo"
        assert report.means["mrr@10"] == 1.0
        assert report.means["recall@2"] == 0.5
        assert set(report.metric_values("ndcg@3")) == {"q1"}
        with pytest.raises(KeyError):
            report.metric_values("mrr@99")

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError):
            evaluate_run({}, {"q1": {"d1": 1}}, [MetricSpec("mrr", 10)] * 2)


def naive_mrr(doc_ids, judged, k, threshold=1):
    for rank, doc_id in enumerate(doc_ids[:k], start=1):
        if judged.get(doc_id, 0) >= threshold:
            return 1.0 / rank
    return 0.0


def naive_recall(doc_ids, judged, k, threshold=1):
    relevant = {d for d, g in judged.items() if g >= threshold}
    return sum(1 for d in doc_ids[:k] if d in relevant) / len(relevant)


def naive_ndcg(doc_ids, judged, k):
    dcg = sum(
        (2 ** judged.get(d, 0) - 1) / math.log2(r + 1)
        for r, d in enumerate(doc_ids[:k], start=1)
    )
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = sum((2**g - 1) / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
    return dcg / idcg


class TestAgainstBruteForce:
    def test_random_runs_match_naive_formulas(self):
        rng = np.random.default_rng(2024)
        doc_pool = [f"d{i}" for i in range(40)]
        for _ in range(30):
            qrels = {}
            run = {}
            for qi in range(int(rng.integers(2, 8))):
                qid = f"q{qi}"
                judged_docs = rng.choice(doc_pool, size=int(rng.integers(2, 10)), replace=False)
                qrels[qid] = {d: int(rng.integers(0, 3)) for d in judged_docs}
                ranked = list(rng.permutation(doc_pool)[: int(rng.integers(1, 30))])
                run[qid] = ranked
            k = int(rng.integers(1, 15))
            report = evaluate_run(
                run,
                qrels,
                [MetricSpec("mrr", k), MetricSpec("recall", k), MetricSpec("ndcg", k)],
            )
            for qid, judged in qrels.items():
                doc_ids = run[qid]
                if any(g >= 1 for g in judged.values()):
                    got = report.per_query[qid]
                    assert got[f"mrr@{k}"] == pytest.approx(
                        naive_mrr(doc_ids, judged, k), abs=1e-12
                    )
                    assert got[f"recall@{k}"] == pytest.approx(
                        naive_recall(doc_ids, judged, k), abs=1e-12
                    )
                    assert got[f"ndcg@{k}"] == pytest.approx(
                        naive_ndcg(doc_ids, judged, k), abs=1e-12
                    )
                else:
                    assert qid not in report.per_query


class TestMonotonicity:
    """Promoting a relevant document never hurts rank-sensitive metrics."""

    def test_promotion_never_decreases_mrr_or_ndcg(self):
        rng = np.random.default_rng(555)
        doc_pool = [f"d{i}" for i in range(20)]
        for _ in range(60):
            ranked = list(rng.permutation(doc_pool))
            judged = {d: int(rng.integers(0, 2)) for d in rng.choice(doc_pool, 8, replace=False)}
            if not any(g >= 1 for g in judged.values()):
                judged[ranked[int(rng.integers(0, 20))]] = 1
            relevant_positions = [
                i for i, d in enumerate(ranked) if judged.get(d, 0) >= 1 and i > 0
            ]
            if not relevant_positions:
                continue
            pos = int(rng.choice(relevant_positions))
            promoted = ranked.copy()
            promoted[pos - 1], promoted[pos] = promoted[pos], promoted[pos - 1]
            k = int(rng.integers(1, 21))
            qrels = {"q": judged}
            before_mrr = mrr_at_k({"q": ranked}, qrels, k=k).values["q"]
            after_mrr = mrr_at_k({"q": promoted}, qrels, k=k).values["q"]
            assert after_mrr >= before_mrr - 1e-12
            before_ndcg = ndcg_at_k({"q": ranked}, qrels, k=k).values["q"]
            after_ndcg = ndcg_at_k({"q": promoted}, qrels, k=k).values["q"]
            assert after_ndcg >= before_ndcg - 1e-12


class TestSignTest:
    def test_all_positive_ten(self):
        assert sign_test([1.0] * 10) == pytest.approx(0.001953125, abs=1e-15)

    def test_zeros_are_ignored(self):
        assert sign_test([0.5, 0.5, 0.0, 0.0]) == pytest.approx(0.5, abs=1e-15)

    def test_balanced_is_one(self):
        assert sign_test([1.0, -1.0]) == 1.0
        assert sign_test([2.0, -0.5, 1.0, -3.0]) == 1.0

    def test_empty_is_one(self):
        assert sign_test([]) == 1.0
        assert sign_test([0.0, 0.0]) == 1.0

    def test_symmetry(self):
        deltas = [1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0]
        assert sign_test(deltas) == pytest.approx(sign_test([-d for d in deltas]), abs=1e-15)

    def test_magnitudes_do_not_matter(self):
        assert sign_test([0.001] * 6) == pytest.approx(sign_test([100.0] * 6), abs=1e-15)


class TestCompareRuns:
    QRELS = {"q1": {"d1": 1}, "q2": {"d2": 1}, "q3": {"d3": 1}}
    SPECS = [MetricSpec("mrr", 10)]

    def report(self, run, tag):
        return evaluate_run(run, self.QRELS, self.SPECS, run_tag=tag)

    def test_deltas_and_summary(self):
        a = self.report({"q1": ["d1"], "q2": ["dx", "d2"], "q3": ["dx"]}, "a")
        b = self.report({"q1": ["d1"], "q2": ["d2"], "q3": ["d3"]}, "b")
        result = compare_runs(a, b, "mrr@10")
        assert isinstance(result, ComparisonResult)
        assert result.deltas == {"q1": 0.0, "q2": 0.5, "q3": 1.0}
        assert result.mean_a == pytest.approx(0.5)
        assert result.mean_b == pytest.approx(1.0)
        assert result.mean_delta == pytest.approx(0.5)
        assert result.n_nonzero == 2
        assert result.p_value == pytest.approx(0.5)

    def test_query_set_mismatch(self):
        a = self.report({"q1": ["d1"]}, "a")
        b = evaluate_run(
            {"q1": ["d1"]}, {"q1": {"d1": 1}, "q4": {"d4": 1}}, self.SPECS, "b"
        )
        with pytest.raises(QuerySetMismatch):
            compare_runs(a, b, "mrr@10")


class TestCsvWriters:
    def test_eval_csv_with_preamble(self, tmp_path):
        report = evaluate_run(
            {"q1": ["d1"], "q2": ["dx", "d2"]},
            {"q1": {"d1": 1}, "q2": {"d2": 1}},
            [MetricSpec("mrr", 10)],
            run_tag="demo",
        )
        path = tmp_path / "eval.csv"
        write_eval_csv(report, path, preamble=["# config_hash=abc", "# seeds=0"])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# config_hash=abc"
        assert lines[1] == "# seeds=0"
        assert lines[2] == "query_id,metric,value"
        assert "q1,mrr@10,1.000000" in lines
        assert "q2,mrr@10,0.500000" in lines
        assert "__mean__,mrr@10,0.750000" in lines

    def test_comparison_csv(self, tmp_path):
        qrels = {"q1": {"d1": 1}, "q2": {"d2": 1}}
        specs = [MetricSpec("mrr", 10)]
        a = evaluate_run({"q1": ["d1"], "q2": ["dx"]}, qrels, specs, "a")
        b = evaluate_run({"q1": ["d1"], "q2": ["d2"]}, qrels, specs, "b")
        path = tmp_path / "cmp.csv"
        write_comparison_csv(compare_runs(a, b, "mrr@10"), path, preamble=["# x=1"])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# x=1"
        assert lines[1] == "query_id,metric,delta"
        assert "q2,mrr@10,1.000000" in lines
        assert "__mean_delta__,mrr@10,0.500000" in lines
        assert any(line.startswith("__p_value__,mrr@10,") for line in lines)
        assert "__n_nonzero__,mrr@10,1" in lines
