"""Data model and file I/O for collections, queries, qrels, and run files.

Formats:
  collection/queries TSV   id<TAB>text[<TAB>language_tag]
  collection/queries JSONL {"doc_id": ..., "text": ..., "language_tag": ...}
                           (queries use "query_id" instead of "doc_id")
  qrels                    qid 0 docid grade      (whitespace separated)
  run                      qid Q0 docid rank score tag

Run files are written with scores at exactly six decimal places so a
write/read cycle is byte reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import (
    DuplicateId,
    IoFailure,
    MalformedRecord,
    NegativeGrade,
    NonContiguousRanks,
)

# A ranking is a score-descending list of (doc_id, score); a run maps
# query ids to rankings. These plain shapes are used across the toolkit.
Ranking = list[tuple[str, float]]
Run = dict[str, Ranking]
Qrels = dict[str, dict[str, int]]


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    language_tag: str = ""


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    language_tag: str = ""


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    run_tag: str


class DocumentCollection:
    """Ordered collection of documents with id lookup."""

    def __init__(self, documents: Iterable[Document]):
        self.documents: list[Document] = list(documents)
        self._by_id: dict[str, Document] = {}
        for d in self.documents:
            if not d.doc_id:
                raise MalformedRecord("empty doc_id")
            if d.doc_id in self._by_id:
                raise DuplicateId(f"duplicate doc_id {d.doc_id!r}")
            self._by_id[d.doc_id] = d

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        if doc_id not in self._by_id:
            from .errors import UnknownDocId

            raise UnknownDocId(f"no document with id {doc_id!r}")
        return self._by_id[doc_id]

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


class QuerySet:
    """Ordered set of queries with id lookup."""

    def __init__(self, queries: Iterable[Query]):
        self.queries: list[Query] = list(queries)
        self._by_id: dict[str, Query] = {}
        for q in self.queries:
            if not q.query_id:
                raise MalformedRecord("empty query_id")
            if q.query_id in self._by_id:
                raise DuplicateId(f"duplicate query_id {q.query_id!r}")
            self._by_id[q.query_id] = q

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self) -> Iterator[Query]:
        return iter(self.queries)

    def get(self, query_id: str) -> Query:
        if query_id not in self._by_id:
            raise KeyError(query_id)
        return self._by_id[query_id]

    def query_ids(self) -> list[str]:
        return [q.query_id for q in self.queries]


def _read_lines(path: str | Path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read().splitlines()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise IoFailure(f"{path} is not valid UTF-8: {e}") from e


def _parse_tsv_records(
    lines: list[str], path: str | Path, allow_empty_text: bool
) -> Iterator[tuple[str, str, str]]:
    for i, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise MalformedRecord(
                f"{path}: record {i}: expected 2 or 3 tab-separated fields, "
                f"got {len(fields)}"
            )
        ident, text = fields[0], fields[1]
        tag = fields[2] if len(fields) == 3 else ""
        if not ident:
            raise MalformedRecord(f"{path}: record {i}: empty id")
        if not text and not allow_empty_text:
            raise MalformedRecord(f"{path}: record {i}: empty text")
        yield ident, text, tag


def _parse_jsonl_records(
    lines: list[str], path: str | Path, id_key: str, allow_empty_text: bool
) -> Iterator[tuple[str, str, str]]:
    for i, line in enumerate(lines, start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecord(f"{path}: record {i}: invalid JSON: {e}") from e
        if not isinstance(obj, dict) or id_key not in obj or "text" not in obj:
            raise MalformedRecord(
                f"{path}: record {i}: expected object with {id_key!r} and 'text'"
            )
        ident, text = str(obj[id_key]), str(obj["text"])
        tag = str(obj.get("language_tag", ""))
        if not ident:
            raise MalformedRecord(f"{path}: record {i}: empty id")
        if not text and not allow_empty_text:
            raise MalformedRecord(f"{path}: record {i}: empty text")
        yield ident, text, tag


def load_collection(
    path: str | Path, fmt: str = "tsv", allow_empty_text: bool = False
) -> DocumentCollection:
    """Load documents from a TSV or JSONL file, preserving file order."""
    lines = _read_lines(path)
    if fmt == "tsv":
        records = _parse_tsv_records(lines, path, allow_empty_text)
    elif fmt == "jsonl":
        records = _parse_jsonl_records(lines, path, "doc_id", allow_empty_text)
    else:
        raise ValueError(f"unknown collection format {fmt!r}")
    return DocumentCollection(Document(i, t, g) for i, t, g in records)


def load_queries(path: str | Path, fmt: str = "tsv") -> QuerySet:
    """Load queries from a TSV or JSONL file, preserving file order."""
    lines = _read_lines(path)
    if fmt == "tsv":
        records = _parse_tsv_records(lines, path, allow_empty_text=False)
    elif fmt == "jsonl":
        records = _parse_jsonl_records(lines, path, "query_id", False)
    else:
        raise ValueError(f"unknown query format {fmt!r}")
    return QuerySet(Query(i, t, g) for i, t, g in records)


def load_qrels(path: str | Path) -> Qrels:
    """Load graded judgments: qid -> {docid: grade}.

    Queries without entries are simply absent from the map.
    """
    qrels: Qrels = {}
    for i, line in enumerate(_read_lines(path), start=1):
        fields = line.split()
        if len(fields) != 4:
            raise MalformedRecord(
                f"{path}: record {i}: expected 4 whitespace-separated fields, "
                f"got {len(fields)}"
            )
        qid, _, docid, grade_s = fields
        try:
            grade = int(grade_s)
        except ValueError as e:
            raise MalformedRecord(f"{path}: record {i}: bad grade {grade_s!r}") from e
        if grade < 0:
            raise NegativeGrade(f"{path}: record {i}: grade {grade} < 0")
        per_q = qrels.setdefault(qid, {})
        if docid in per_q:
            raise DuplicateId(f"{path}: record {i}: duplicate judgment {qid}/{docid}")
        per_q[docid] = grade
    return qrels


def save_qrels(qrels: Qrels, path: str | Path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for qid, docs in qrels.items():
                for docid, grade in docs.items():
                    f.write(f"{qid} 0 {docid} {grade}\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def write_run(run: Mapping[str, Sequence[tuple[str, float]]], run_tag: str, path: str | Path) -> None:
    """Write rankings in the six-column run format.

    Rankings must already be sorted by score descending with ties broken
    by doc_id ascending; ranks are assigned 1..n in list order.
    """
    for qid, ranking in run.items():
        prev: tuple[str, float] | None = None
        for doc_id, score in ranking:
            if prev is not None:
                if score > prev[1]:
                    raise ValueError(
                        f"query {qid}: scores increase at doc {doc_id!r}"
                    )
                if score == prev[1] and doc_id < prev[0]:
                    raise ValueError(
                        f"query {qid}: tie at score {score} not in doc_id order"
                    )
            prev = (doc_id, score)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for qid, ranking in run.items():
                for rank, (doc_id, score) in enumerate(ranking, start=1):
                    f.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {run_tag}\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_run(path: str | Path) -> dict[str, list[RunEntry]]:
    """Read a run file back into per-query entry lists sorted by rank.

    Validates rank contiguity (1..n per query), score monotonicity, and
    (query, doc) uniqueness.
    """
    per_query: dict[str, list[RunEntry]] = {}
    seen: set[tuple[str, str]] = set()
    for i, line in enumerate(_read_lines(path), start=1):
        fields = line.split()
        if len(fields) != 6:
            raise MalformedRecord(
                f"{path}: record {i}: expected 6 fields, got {len(fields)}"
            )
        qid, q0, doc_id, rank_s, score_s, tag = fields
        if q0 != "Q0":
            raise MalformedRecord(f"{path}: record {i}: second field must be Q0")
        try:
            rank = int(rank_s)
            score = float(score_s)
        except ValueError as e:
            raise MalformedRecord(f"{path}: record {i}: bad rank or score") from e
        if (qid, doc_id) in seen:
            raise DuplicateId(f"{path}: record {i}: duplicate entry {qid}/{doc_id}")
        seen.add((qid, doc_id))
        per_query.setdefault(qid, []).append(RunEntry(qid, doc_id, rank, score, tag))
    for qid, entries in per_query.items():
        entries.sort(key=lambda e: e.rank)
        ranks = [e.rank for e in entries]
        if ranks != list(range(1, len(entries) + 1)):
            raise NonContiguousRanks(f"{path}: query {qid}: ranks {ranks} not 1..n")
        for a, b in zip(entries, entries[1:]):
            if b.score > a.score:
                raise MalformedRecord(
                    f"{path}: query {qid}: score increases at rank {b.rank}"
                )
    return per_query


def run_entries_to_rankings(per_query: Mapping[str, Sequence[RunEntry]]) -> Run:
    """Collapse read_run output to the plain {qid: [(doc_id, score)]} shape."""
    return {
        qid: [(e.doc_id, e.score) for e in entries]
        for qid, entries in per_query.items()
    }


def restrict_qrels(qrels: Qrels, query_ids: Iterable[str]) -> Qrels:
    """Judgments for the given query ids only, in the given order.

    Evaluation means run over every qrels query, counting queries absent
    from the run as zero, so a run over a query subset must be scored
    against the matching qrels subset.
    """
    return {qid: qrels[qid] for qid in query_ids if qid in qrels}
