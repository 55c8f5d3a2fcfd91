"""Retrieval metrics (recall, graded NDCG) and the system-level harness."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .catalog import QueryRecord
from .errors import PipelineError
from .pipeline import Pipeline, RetrievalResult

logger = logging.getLogger(__name__)


def recall(retrieved: Iterable[str], gold: Iterable[str]) -> float:
    """Proportion of gold tools present in the retrieved set."""
    gold_set = set(gold)
    if not gold_set:
        raise ValueError("recall needs a non-empty gold set")
    return len(set(retrieved) & gold_set) / len(gold_set)


def _gain(grade: int) -> float:
    return float(2**grade - 1)


def ndcg(ranking: Sequence[str], rels: Mapping[str, int]) -> float:
    """Normalized DCG with exponential gain over grades in {0, 1, 2}.

    DCG sums (2^grade - 1) / log2(position + 1) over the ranking; the
    ideal ordering comes from all grades sorted descending, including
    tools absent from the ranking. All-zero grades give 0 by convention.
    """
    for tool_id, grade in rels.items():
        if grade not in (0, 1, 2):
            raise ValueError(f"grade {grade!r} for {tool_id!r} not in 0..2")
    dcg = sum(
        _gain(rels.get(tool_id, 0)) / math.log2(position + 1)
        for position, tool_id in enumerate(ranking, 1)
    )
    ideal = sorted(rels.values(), reverse=True)
    idcg = sum(_gain(grade) / math.log2(position + 1) for position, grade in enumerate(ideal, 1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def final_ranking(result: RetrievalResult) -> list[str]:
    """Order the final tool set by the rerank score of each tool's best
    step (lowest neg-logprob among steps that shortlisted it), ties by id."""
    best: dict[str, float] = {}
    for step in result.steps:
        scores = dict(step.reranked)
        for tool_id in step.shortlist.tool_ids:
            nll = scores[tool_id]
            if tool_id not in best or nll < best[tool_id]:
                best[tool_id] = nll
    return sorted(best, key=lambda tool_id: (best[tool_id], tool_id))


@dataclass(frozen=True)
class QueryMetrics:
    query_id: str
    recall: float
    ndcg: float
    retrieved: tuple[str, ...]


@dataclass(frozen=True)
class MetricsReport:
    per_query: tuple[QueryMetrics, ...]
    macro_recall: float
    macro_ndcg: float
    query_count: int
    failures: tuple[tuple[str, str], ...] = ()
    config_echo: dict = field(default_factory=dict)


def evaluate_system(
    records: Sequence[QueryRecord],
    pipeline: Pipeline,
    sample_size: int,
    seed: int,
) -> MetricsReport:
    """Run the pipeline over a seeded sample and macro-average the metrics.

    Queries without graded labels fall back to binary grades (gold tools
    get 1). Failed queries are excluded from the averages and reported
    separately.
    """
    if not records:
        raise ValueError("cannot evaluate an empty split")
    ordered = sorted(records, key=lambda r: r.id)
    rng = random.Random(seed)
    sample = rng.sample(ordered, min(sample_size, len(ordered)))
    per_query: list[QueryMetrics] = []
    failures: list[tuple[str, str]] = []
    for record in sample:
        try:
            result = pipeline.run(record)
        except PipelineError as exc:
            logger.warning("query %s failed: %s", record.id, exc)
            failures.append((record.id, str(exc)))
            continue
        rels = record.graded_relevance
        if rels is None:
            rels = {tool_id: 1 for tool_id in record.gold_tool_ids}
        per_query.append(
            QueryMetrics(
                query_id=record.id,
                recall=recall(result.final_tools, record.gold_tool_ids),
                ndcg=ndcg(final_ranking(result), rels),
                retrieved=tuple(sorted(result.final_tools)),
            )
        )
    n = len(per_query)
    return MetricsReport(
        per_query=tuple(per_query),
        macro_recall=sum(q.recall for q in per_query) / n if n else 0.0,
        macro_ndcg=sum(q.ndcg for q in per_query) / n if n else 0.0,
        query_count=n,
        failures=tuple(failures),
        config_echo={
            "pool_size": pipeline.config.pool_size,
            "max_steps": pipeline.config.max_steps,
            "batch_size": pipeline.config.batch_size,
            "seed": pipeline.config.seed,
            "sample_seed": seed,
            "catalog_version": pipeline.catalog.version,
        },
    )


def save_report(report: MetricsReport, path: str | Path) -> None:
    """Line-delimited report: config echo, per-query rows, summary row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "config", **report.config_echo}, sort_keys=True) + "\n")
        for row in report.per_query:
            fh.write(
                json.dumps(
                    {
                        "kind": "query",
                        "id": row.query_id,
                        "recall": row.recall,
                        "ndcg": row.ndcg,
                        "retrieved": list(row.retrieved),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for query_id, message in report.failures:
            fh.write(
                json.dumps({"kind": "failure", "id": query_id, "message": message}, sort_keys=True)
                + "\n"
            )
        fh.write(
            json.dumps(
                {
                    "kind": "summary",
                    "macro_recall": report.macro_recall,
                    "macro_ndcg": report.macro_ndcg,
                    "query_count": report.query_count,
                    "failure_count": len(report.failures),
                },
                sort_keys=True,
            )
            + "\n"
        )


def format_summary(report: MetricsReport) -> str:
    """Human-readable table; scores scaled to 0-100 here only."""
    lines = [
        f"{'queries':<12}{report.query_count}",
        f"{'failures':<12}{len(report.failures)}",
        f"{'recall':<12}{report.macro_recall * 100:.2f}",
        f"{'ndcg':<12}{report.macro_ndcg * 100:.2f}",
    ]
    return "\n".join(lines)
