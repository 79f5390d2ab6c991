"""Collection, query, qrels, and run file IO."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varir import (
    Document,
    DocumentCollection,
    DuplicateId,
    MalformedRecord,
    NegativeGrade,
    NonContiguousRanks,
    Query,
    QuerySet,
    load_collection,
    load_qrels,
    load_queries,
    read_run,
    restrict_qrels,
    run_entries_to_rankings,
    save_qrels,
    write_run,
)


class TestCollectionLoading:
    def test_tsv_two_and_three_fields(self, tmp_path):
        path = tmp_path / "docs.tsv"
        path.write_text("d1\tsome text\nd2\tother text\tnl\n", encoding="utf-8")
        coll = load_collection(path)
        assert [d.doc_id for d in coll] == ["d1", "d2"]
        assert coll.get("d2").language_tag == "nl"
        assert coll.get("d1").language_tag == ""

    def test_jsonl(self, tmp_path):
        path = tmp_path / "docs.jsonl"
        path.write_text(
            '{"doc_id": "a", "text": "alpha"}\n{"doc_id": "b", "text": "beta"}\n',
            encoding="utf-8",
        )
        coll = load_collection(path, fmt="jsonl")
        assert len(coll) == 2
        assert coll.get("b").text == "beta"

    def test_bad_field_count_reports_record_number(self, tmp_path):
        path = tmp_path / "docs.tsv"
        path.write_text("d1\tok\nd2\tok\nd3\n", encoding="utf-8")
        with pytest.raises(MalformedRecord, match="record 3"):
            load_collection(path)

    def test_duplicate_doc_id(self, tmp_path):
        path = tmp_path / "docs.tsv"
        path.write_text("d1\ta\nd1\tb\n", encoding="utf-8")
        with pytest.raises(DuplicateId):
            load_collection(path)

    def test_empty_text_rejected_by_default(self, tmp_path):
        path = tmp_path / "docs.tsv"
        path.write_text("d1\t\n", encoding="utf-8")
        with pytest.raises(MalformedRecord, match="empty text"):
            load_collection(path)
        coll = load_collection(path, allow_empty_text=True)
        assert coll.get("d1").text == ""

    def test_collection_preserves_order(self):
        ids = [f"d{i:03d}" for i in (5, 1, 9, 2)]
        coll = DocumentCollection([Document(doc_id=d, text="x") for d in ids])
        assert [d.doc_id for d in coll] == ids


class TestQueries:
    def test_load_and_lookup(self, tmp_path):
        path = tmp_path / "q.tsv"
        path.write_text("q1\tfirst query\nq2\tsecond query\tde\n", encoding="utf-8")
        qs = load_queries(path)
        assert qs.query_ids() == ["q1", "q2"]
        assert qs.get("q2").language_tag == "de"

    def test_duplicate_query_id(self):
        with pytest.raises(DuplicateId):
            QuerySet([Query("q1", "a"), Query("q1", "b")])


class TestQrels:
    def test_round_trip(self, tmp_path):
        qrels = {"q1": {"d1": 2, "d2": 0}, "q2": {"d9": 1}}
        path = tmp_path / "qrels.txt"
        save_qrels(qrels, path)
        assert load_qrels(path) == qrels

    def test_negative_grade(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d3 -1\n", encoding="utf-8")
        with pytest.raises(NegativeGrade):
            load_qrels(path)

    def test_duplicate_judgment(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 1\nq1 0 d1 0\n", encoding="utf-8")
        with pytest.raises(DuplicateId):
            load_qrels(path)

    def test_restrict_qrels_keeps_only_named_queries(self):
        qrels = {"q1": {"d1": 1}, "q2": {"d2": 1}, "q3": {"d3": 1}}
        assert restrict_qrels(qrels, ["q2", "q3", "q4"]) == {
            "q2": {"d2": 1},
            "q3": {"d3": 1},
        }


class TestRunFiles:
    def test_round_trip_100_entries(self, tmp_path):
        run = {
            f"q{qi}": [(f"d{di:02d}", (20 - di) / 8.0) for di in range(20)]
            for qi in range(5)
        }
        path = tmp_path / "a.run"
        write_run(run, "tag", path)
        entries = read_run(path)
        assert sum(len(v) for v in entries.values()) == 100
        for qi in range(5):
            qid = f"q{qi}"
            assert [e.doc_id for e in entries[qid]] == [f"d{di:02d}" for di in range(20)]
            assert [e.rank for e in entries[qid]] == list(range(1, 21))
            assert all(e.run_tag == "tag" for e in entries[qid])
        assert run_entries_to_rankings(entries) == run

    def test_write_rejects_increasing_scores(self, tmp_path):
        with pytest.raises(ValueError, match="scores increase"):
            write_run({"q1": [("d1", 1.0), ("d2", 2.0)]}, "t", tmp_path / "x.run")

    def test_write_rejects_tie_out_of_doc_order(self, tmp_path):
        with pytest.raises(ValueError, match="tie"):
            write_run({"q1": [("d2", 1.0), ("d1", 1.0)]}, "t", tmp_path / "x.run")

    def test_read_rejects_rank_gap(self, tmp_path):
        path = tmp_path / "bad.run"
        path.write_text("q1 Q0 d1 1 2.0 t\nq1 Q0 d2 3 1.0 t\n", encoding="utf-8")
        with pytest.raises(NonContiguousRanks):
            read_run(path)

    def test_read_rejects_duplicate_doc(self, tmp_path):
        path = tmp_path / "bad.run"
        path.write_text("q1 Q0 d1 1 2.0 t\nq1 Q0 d1 2 1.0 t\n", encoding="utf-8")
        with pytest.raises(DuplicateId):
            read_run(path)

    def test_read_rejects_score_increase(self, tmp_path):
        path = tmp_path / "bad.run"
        path.write_text("q1 Q0 d1 1 1.0 t\nq1 Q0 d2 2 2.0 t\n", encoding="utf-8")
        with pytest.raises(MalformedRecord, match="score increases"):
            read_run(path)

    def test_read_rejects_wrong_second_column(self, tmp_path):
        path = tmp_path / "bad.run"
        path.write_text("q1 XX d1 1 1.0 t\n", encoding="utf-8")
        with pytest.raises(MalformedRecord, match="Q0"):
            read_run(path)

    @settings(max_examples=30, deadline=None)
    @given(
        st.dictionaries(
            st.from_regex(r"q[0-9]{1,3}", fullmatch=True),
            st.lists(
                st.integers(min_value=0, max_value=999), min_size=1, max_size=15, unique=True
            ),
            min_size=1,
            max_size=6,
        )
    )
    def test_round_trip_random_runs(self, tmp_path_factory, doc_lists):
        # Scores descend by construction and stay exact at six decimals.
        run = {
            qid: [(f"d{doc:03d}", (len(docs) - i) / 64.0) for i, doc in enumerate(docs)]
            for qid, docs in doc_lists.items()
        }
        path = tmp_path_factory.mktemp("runs") / "r.run"
        write_run(run, "rt", path)
        assert run_entries_to_rankings(read_run(path)) == run
