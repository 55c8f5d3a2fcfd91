import math
import random

import pytest

from toolscout.catalog import QueryRecord
from toolscout.evaluation import (
    evaluate_system,
    final_ranking,
    format_summary,
    ndcg,
    recall,
    save_report,
)
from toolscout.errors import PipelineError
from toolscout.fixtures import dcg_reference, recall_reference
from toolscout.pipeline import PipelineConfig, RetrievalResult, Shortlist, StepRecord


class TestRecall:
    def test_perfect(self):
        assert recall({"a", "b", "c"}, {"a", "b", "c"}) == 1.0

    def test_empty_retrieved(self):
        assert recall(set(), {"a"}) == 0.0

    def test_half(self):
        assert recall({"a", "x", "y"}, {"a", "b"}) == 0.5

    def test_empty_gold_rejected(self):
        with pytest.raises(ValueError):
            recall({"a"}, set())

    def test_permutation_invariant(self):
        assert recall(["b", "a"], ["a", "b"]) == recall(["a", "b"], ["b", "a"]) == 1.0

    def test_matches_reference_on_random_cases(self):
        rng = random.Random(4)
        universe = [f"t{i}" for i in range(10)]
        for _ in range(100):
            retrieved = rng.sample(universe, rng.randint(0, 10))
            gold = rng.sample(universe, rng.randint(1, 10))
            assert recall(retrieved, gold) == pytest.approx(
                recall_reference(retrieved, gold), abs=1e-12
            )


class TestNdcg:
    def test_ideal_order_is_one(self):
        rels = {"a": 2, "b": 1, "c": 0}
        assert ndcg(["a", "b", "c"], rels) == pytest.approx(1.0, abs=1e-12)

    def test_all_zero_grades_is_zero(self):
        assert ndcg(["a", "b"], {"a": 0, "b": 0}) == 0.0

    def test_worked_example(self):
        # ranking grades [0, 2, 1] against ideal [2, 1, 0]
        rels = {"x": 0, "y": 2, "z": 1}
        value = ndcg(["x", "y", "z"], rels)
        dcg = 3 / math.log2(3) + 1 / 2
        idcg = 3 + 1 / math.log2(3)
        assert dcg == pytest.approx(2.392789, abs=1e-6)
        assert idcg == pytest.approx(3.630930, abs=1e-6)
        assert value == pytest.approx(dcg / idcg, abs=1e-12)
        assert value == pytest.approx(0.659002, abs=1e-6)

    def test_unranked_tools_count_only_in_ideal(self):
        # the gold tool never retrieved drags the score down via the ideal
        rels = {"seen": 1, "missed": 2}
        value = ndcg(["seen"], rels)
        assert value == pytest.approx(1 / (3 + 1 / math.log2(3)), abs=1e-12)

    def test_grade_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ndcg(["a"], {"a": 3})

    def test_matches_dcg_reference_on_random_cases(self):
        rng = random.Random(8)
        for _ in range(100):
            n = rng.randint(1, 10)
            ids = [f"t{i}" for i in range(n)]
            rels = {i: rng.randint(0, 2) for i in ids}
            ranking = rng.sample(ids, rng.randint(0, n))
            expected_dcg = dcg_reference([rels[t] for t in ranking])
            expected_idcg = dcg_reference(sorted(rels.values(), reverse=True))
            expected = expected_dcg / expected_idcg if expected_idcg else 0.0
            assert ndcg(ranking, rels) == pytest.approx(expected, abs=1e-12)

    def test_swapping_equal_grades_does_not_change_value(self):
        rels = {"a": 1, "b": 1, "c": 2}
        assert ndcg(["c", "a", "b"], rels) == ndcg(["c", "b", "a"], rels)


def make_result(query_id, steps):
    """steps: list of (sub_query, reranked pairs, shortlisted ids)."""
    records = []
    final = set()
    for i, (sub, reranked, ids) in enumerate(steps, 1):
        shortlist = Shortlist(sub_query=sub, tool_ids=tuple(ids),
                              source_top5=tuple(t for t, _ in reranked))
        from toolscout.pipeline import CandidateSet

        records.append(StepRecord(
            step_index=i, sub_query=sub,
            candidates=CandidateSet(sub_query=sub, ranked=tuple(reranked), pool_size=5),
            reranked=tuple(reranked), top5=tuple(t for t, _ in reranked),
            shortlist=shortlist,
        ))
        final.update(ids)
    return RetrievalResult(
        query_id=query_id, sub_queries=(), steps=tuple(records),
        final_tools=frozenset(final), exhausted=False,
        hit_counts={}, trace=(),
    )


class TestFinalRanking:
    def test_orders_by_best_step_score(self):
        result = make_result("q", [
            ("s1", [("a", 5.0), ("b", 2.0)], ["a", "b"]),
            ("s2", [("a", 1.0), ("c", 3.0)], ["a", "c"]),
        ])
        # best scores: a -> 1.0 (step 2), b -> 2.0, c -> 3.0
        assert final_ranking(result) == ["a", "b", "c"]

    def test_ties_break_by_id(self):
        result = make_result("q", [("s", [("z", 1.0), ("a", 1.0)], ["z", "a"])])
        assert final_ranking(result) == ["a", "z"]


class FakePipeline:
    """Returns canned tool sets; mimics the Pipeline surface the harness uses."""

    def __init__(self, answers, catalog_version=0):
        self.answers = answers
        self.config = PipelineConfig()

        class _Catalog:
            version = catalog_version

        self.catalog = _Catalog()

    def run(self, record):
        answer = self.answers[record.id]
        if answer is None:
            raise PipelineError(record.id, "scripted failure")
        return make_result(record.id, [("s", [(t, 1.0) for t in sorted(answer)], sorted(answer))])


def records(n, gold):
    return [
        QueryRecord(id=f"q{i:02d}", text=f"query {i}", gold_tool_ids=frozenset(gold))
        for i in range(n)
    ]


class TestEvaluateSystem:
    def test_oracle_pipeline_scores_one(self):
        recs = records(6, ["a", "b"])
        pipeline = FakePipeline({r.id: {"a", "b"} for r in recs})
        report = evaluate_system(recs, pipeline, sample_size=6, seed=0)
        assert report.macro_recall == 1.0
        assert report.query_count == 6

    def test_empty_pipeline_scores_zero(self):
        recs = records(4, ["a"])
        pipeline = FakePipeline({r.id: set() for r in recs})
        report = evaluate_system(recs, pipeline, sample_size=4, seed=0)
        assert report.macro_recall == 0.0
        assert report.macro_ndcg == 0.0

    def test_macro_average_matches_hand_aggregation(self):
        recs = records(4, ["a", "b"])
        answers = {"q00": {"a", "b"}, "q01": {"a"}, "q02": set(), "q03": {"a", "b"}}
        pipeline = FakePipeline(answers)
        report = evaluate_system(recs, pipeline, sample_size=4, seed=0)
        by_id = {q.query_id: q.recall for q in report.per_query}
        assert by_id == {"q00": 1.0, "q01": 0.5, "q02": 0.0, "q03": 1.0}
        assert report.macro_recall == pytest.approx(sum(by_id.values()) / 4, abs=1e-12)

    def test_sample_capped_at_split_size(self):
        recs = records(3, ["a"])
        pipeline = FakePipeline({r.id: {"a"} for r in recs})
        report = evaluate_system(recs, pipeline, sample_size=500, seed=1)
        assert report.query_count == 3

    def test_sampling_is_seeded(self):
        recs = records(10, ["a"])
        pipeline = FakePipeline({r.id: {"a"} for r in recs})
        first = evaluate_system(recs, pipeline, sample_size=4, seed=5)
        second = evaluate_system(recs, pipeline, sample_size=4, seed=5)
        assert [q.query_id for q in first.per_query] == [q.query_id for q in second.per_query]

    def test_failures_excluded_and_reported(self):
        recs = records(3, ["a"])
        answers = {"q00": {"a"}, "q01": None, "q02": {"a"}}
        report = evaluate_system(recs, FakePipeline(answers), sample_size=3, seed=0)
        assert report.query_count == 2
        assert report.macro_recall == 1.0
        assert [f[0] for f in report.failures] == ["q01"]

    def test_graded_labels_used_when_present(self):
        rec = QueryRecord(
            id="q00", text="t", gold_tool_ids=frozenset(["a"]),
            graded_relevance={"a": 2, "b": 1},
        )
        pipeline = FakePipeline({"q00": {"a"}})
        report = evaluate_system([rec], pipeline, sample_size=1, seed=0)
        # ranking [a]; DCG = 3; IDCG = 3 + 1/log2(3)
        expected = 3 / (3 + 1 / math.log2(3))
        assert report.per_query[0].ndcg == pytest.approx(expected, abs=1e-12)

    def test_report_round_trips_to_file(self, tmp_path):
        recs = records(2, ["a"])
        pipeline = FakePipeline({r.id: {"a"} for r in recs})
        report = evaluate_system(recs, pipeline, sample_size=2, seed=0)
        path = tmp_path / "report.jsonl"
        save_report(report, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1 + 2 + 1  # config + per-query + summary
        assert "macro_recall" in lines[-1]

    def test_summary_scales_to_hundred(self):
        recs = records(2, ["a"])
        pipeline = FakePipeline({r.id: {"a"} for r in recs})
        report = evaluate_system(recs, pipeline, sample_size=2, seed=0)
        text = format_summary(report)
        assert "100.00" in text
