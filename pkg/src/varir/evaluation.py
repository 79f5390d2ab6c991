"""Ranking metrics over runs and graded judgments, plus paired comparison.

Conventions shared by every metric: unjudged documents are non-relevant,
a query present in the qrels but absent from the run scores 0, and means
are taken over the queries that have at least one positive for the metric
(the others are excluded and counted). Relevance for MRR and Recall means
grade >= threshold (default 1); nDCG uses graded gain 2^grade - 1 with
discount 1 / log2(rank + 1) and ideal normalization.

`compare_runs` applies an exact two-sided binomial sign test to the
per-query deltas, ignoring zero deltas.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Qrels, Run
from .errors import IoFailure, QuerySetMismatch


@dataclass(frozen=True)
class MetricSpec:
    kind: str  # "mrr" | "recall" | "ndcg"
    cutoff: int
    threshold: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("mrr", "recall", "ndcg"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.cutoff < 1:
            raise ValueError(f"cutoff {self.cutoff} < 1")
        if self.threshold < 1:
            raise ValueError(f"threshold {self.threshold} < 1")

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.cutoff}"

    @classmethod
    def parse(cls, label: str, threshold: int = 1) -> "MetricSpec":
        kind, _, cutoff = label.partition("@")
        if not cutoff or not cutoff.isdigit():
            raise ValueError(f"cannot parse metric label {label!r}")
        return cls(kind.strip(), int(cutoff), threshold)


@dataclass
class PerQueryMetric:
    values: dict[str, float]
    mean: float
    excluded: int  # queries in the qrels with no positive for this metric


@dataclass
class EvalReport:
    run_tag: str
    specs: list[MetricSpec]
    per_query: dict[str, dict[str, float]]  # qid -> {label: value}
    means: dict[str, float]
    excluded: dict[str, int]

    def metric_values(self, label: str) -> dict[str, float]:
        if label not in self.means:
            raise KeyError(f"metric {label!r} not in report")
        return {
            qid: vals[label] for qid, vals in self.per_query.items() if label in vals
        }


def _ranked_ids(ranking: Sequence) -> list[str]:
    # Accept either (doc_id, score) pairs or bare doc_id strings.
    return [item if isinstance(item, str) else item[0] for item in ranking]


def _mrr(doc_ids: list[str], judged: Mapping[str, int], spec: MetricSpec) -> float:
    for rank, doc_id in enumerate(doc_ids[: spec.cutoff], start=1):
        if judged.get(doc_id, 0) >= spec.threshold:
            return 1.0 / rank
    return 0.0


def _recall(doc_ids: list[str], relevant: set[str], spec: MetricSpec) -> float:
    hits = sum(1 for d in doc_ids[: spec.cutoff] if d in relevant)
    return hits / len(relevant)


def _ndcg(doc_ids: list[str], judged: Mapping[str, int], spec: MetricSpec) -> float:
    dcg = 0.0
    for rank, doc_id in enumerate(doc_ids[: spec.cutoff], start=1):
        grade = judged.get(doc_id, 0)
        if grade > 0:
            dcg += (2.0**grade - 1.0) / math.log2(rank + 1.0)
    ideal = sorted(judged.values(), reverse=True)[: spec.cutoff]
    idcg = sum(
        (2.0**g - 1.0) / math.log2(r + 1.0)
        for r, g in enumerate(ideal, start=1)
        if g > 0
    )
    return dcg / idcg


def evaluate_run(
    run: Run | Mapping[str, Sequence],
    qrels: Qrels,
    specs: Sequence[MetricSpec],
    run_tag: str = "",
) -> EvalReport:
    """All metrics in one pass over the qrels queries (ascending id order)."""
    specs = list(specs)
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate metric labels in {labels}")
    per_query: dict[str, dict[str, float]] = {}
    sums = {label: 0.0 for label in labels}
    counts = {label: 0 for label in labels}
    excluded = {label: 0 for label in labels}
    for qid in sorted(qrels):
        judged = qrels[qid]
        doc_ids = _ranked_ids(run.get(qid, ()))
        row: dict[str, float] = {}
        for spec in specs:
            if spec.kind == "ndcg":
                has_positive = any(g > 0 for g in judged.values())
            else:
                has_positive = any(g >= spec.threshold for g in judged.values())
            if not has_positive:
                excluded[spec.label] += 1
                continue
            if spec.kind == "mrr":
                value = _mrr(doc_ids, judged, spec)
            elif spec.kind == "recall":
                relevant = {d for d, g in judged.items() if g >= spec.threshold}
                value = _recall(doc_ids, relevant, spec)
            else:
                value = _ndcg(doc_ids, judged, spec)
            row[spec.label] = value
            sums[spec.label] += value
            counts[spec.label] += 1
        if row:
            per_query[qid] = row
    means = {
        label: (sums[label] / counts[label]) if counts[label] else 0.0
        for label in labels
    }
    return EvalReport(run_tag, specs, per_query, means, excluded)


def mrr_at_k(run: Run, qrels: Qrels, k: int = 10, threshold: int = 1) -> PerQueryMetric:
    report = evaluate_run(run, qrels, [MetricSpec("mrr", k, threshold)])
    label = f"mrr@{k}"
    return PerQueryMetric(report.metric_values(label), report.means[label], report.excluded[label])


def recall_at_k(run: Run, qrels: Qrels, k: int = 1000, threshold: int = 1) -> PerQueryMetric:
    report = evaluate_run(run, qrels, [MetricSpec("recall", k, threshold)])
    label = f"recall@{k}"
    return PerQueryMetric(report.metric_values(label), report.means[label], report.excluded[label])


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 20) -> PerQueryMetric:
    report = evaluate_run(run, qrels, [MetricSpec("ndcg", k)])
    label = f"ndcg@{k}"
    return PerQueryMetric(report.metric_values(label), report.means[label], report.excluded[label])


def sign_test(deltas: Iterable[float]) -> float:
    """Exact two-sided binomial sign test at p=0.5, ignoring zero deltas."""
    pos = neg = 0
    for d in deltas:
        if d > 0:
            pos += 1
        elif d < 0:
            neg += 1
    n = pos + neg
    if n == 0:
        return 1.0
    denom = 2**n
    cdf_le = sum(comb(n, i) for i in range(0, pos + 1)) / denom
    cdf_ge = sum(comb(n, i) for i in range(pos, n + 1)) / denom
    return min(1.0, 2.0 * min(cdf_le, cdf_ge))


@dataclass
class ComparisonResult:
    metric: str
    deltas: dict[str, float]  # qid -> value_b - value_a
    mean_a: float
    mean_b: float
    mean_delta: float
    p_value: float
    n_nonzero: int


def compare_runs(a: EvalReport, b: EvalReport, metric: str) -> ComparisonResult:
    """Per-query deltas (b - a) for one metric plus the sign-test p-value."""
    values_a = a.metric_values(metric)
    values_b = b.metric_values(metric)
    if set(values_a) != set(values_b):
        only_a = sorted(set(values_a) - set(values_b))[:3]
        only_b = sorted(set(values_b) - set(values_a))[:3]
        raise QuerySetMismatch(
            f"metric {metric!r}: reports cover different queries "
            f"(only in a: {only_a}, only in b: {only_b})"
        )
    deltas = {qid: values_b[qid] - values_a[qid] for qid in sorted(values_a)}
    mean_a = sum(values_a.values()) / len(values_a) if values_a else 0.0
    mean_b = sum(values_b.values()) / len(values_b) if values_b else 0.0
    return ComparisonResult(
        metric,
        deltas,
        mean_a,
        mean_b,
        mean_b - mean_a,
        sign_test(deltas.values()),
        sum(1 for d in deltas.values() if d != 0.0),
    )


def write_eval_csv(
    report: EvalReport, path: str | Path, preamble: Sequence[str] = ()
) -> None:
    """Rows query_id,metric,value plus one __mean__ row per metric.

    `preamble` lines (already '#'-prefixed) are written verbatim before the
    header so callers can embed provenance.
    """
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            for line in preamble:
                f.write(line + "\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["query_id", "metric", "value"])
            for qid in sorted(report.per_query):
                for spec in report.specs:
                    label = spec.label
                    if label in report.per_query[qid]:
                        writer.writerow([qid, label, f"{report.per_query[qid][label]:.6f}"])
            for spec in report.specs:
                writer.writerow(["__mean__", spec.label, f"{report.means[spec.label]:.6f}"])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def write_comparison_csv(
    result: ComparisonResult, path: str | Path, preamble: Sequence[str] = ()
) -> None:
    """Per-query delta rows followed by summary rows with the p-value."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            for line in preamble:
                f.write(line + "\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["query_id", "metric", "delta"])
            for qid, d in result.deltas.items():
                writer.writerow([qid, result.metric, f"{d:.6f}"])
            writer.writerow(["__mean_a__", result.metric, f"{result.mean_a:.6f}"])
            writer.writerow(["__mean_b__", result.metric, f"{result.mean_b:.6f}"])
            writer.writerow(["__mean_delta__", result.metric, f"{result.mean_delta:.6f}"])
            writer.writerow(["__p_value__", result.metric, f"{result.p_value:.6g}"])
            writer.writerow(["__n_nonzero__", result.metric, str(result.n_nonzero)])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
