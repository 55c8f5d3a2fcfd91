"""The retrieval stage and the full plan/retrieve loop.

Per sub-query: dense candidate pool -> n-gram likelihood rerank -> top-5 ->
LLM predictor shortlist. The final tool set for a query is the union of
the per-step shortlists; the loop never mutates the catalog.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

from .catalog import QueryRecord, ToolCatalog, apply_description, swap_description
from .dense import DenseIndex, EmbeddingProvider, build_index, dense_topk, reindex_tool
from .errors import PipelineError, StaleIndexError, ToolScoutError
from .llm import LlmProvider, complete
from .planner import PlanState, SubQuery, plan_step

logger = logging.getLogger(__name__)

RERANK_SEPARATOR = " [SEP] "
SHORTLIST_SIZE = 5


class LikelihoodScorer(Protocol):
    def neg_logprob(self, text: str) -> float: ...


@dataclass(frozen=True)
class CandidateSet:
    sub_query: str
    ranked: tuple[tuple[str, float], ...]  # (tool id, retriever score), descending
    pool_size: int


@dataclass(frozen=True)
class Shortlist:
    sub_query: str
    tool_ids: tuple[str, ...]
    source_top5: tuple[str, ...]


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    sub_query: str
    candidates: CandidateSet
    reranked: tuple[tuple[str, float], ...]  # (tool id, neg logprob), ascending
    top5: tuple[str, ...]
    shortlist: Shortlist


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    sub_queries: tuple[SubQuery, ...]
    steps: tuple[StepRecord, ...]
    final_tools: frozenset[str]
    exhausted: bool
    hit_counts: dict[str, int]
    trace: tuple[dict, ...]


class TracingProvider:
    """Wrap an LLM provider and append one trace record per call."""

    def __init__(self, inner: LlmProvider, trace: list[dict]):
        self._inner = inner
        self._trace = trace

    def complete(self, template_id, prompt, params, variables) -> str:
        response = self._inner.complete(template_id, prompt, params, variables)
        self._trace.append(
            {
                "kind": "llm_call",
                "template_id": template_id,
                "variables": dict(variables),
                "response": response,
            }
        )
        return response


def transcript_from_trace(trace) -> "ScriptedTranscript":
    """Turn the llm_call records of a trace into a scripted transcript, so
    a live run can be replayed offline."""
    from .llm import ScriptedTranscript

    transcript = ScriptedTranscript()
    for entry in trace:
        if entry.get("kind") == "llm_call":
            transcript.add(entry["template_id"], entry["variables"], entry["response"])
    return transcript


def retrieve_candidates(
    index: DenseIndex,
    embedder: EmbeddingProvider,
    sub_query: str,
    pool_size: int = 20,
    catalog: ToolCatalog | None = None,
) -> CandidateSet:
    """Embed the sub-query and take the exact top ``pool_size`` by cosine."""
    if catalog is not None and catalog.version != index.catalog_version:
        raise StaleIndexError(
            f"index built for catalog version {index.catalog_version}, "
            f"catalog is at {catalog.version}; rebuild the index"
        )
    ranked = dense_topk(index, embedder.embed(sub_query), pool_size)
    return CandidateSet(sub_query=sub_query, ranked=tuple(ranked), pool_size=pool_size)


def rerank_lm(
    candidates: CandidateSet,
    scorer: LikelihoodScorer,
    catalog: ToolCatalog,
) -> tuple[list[tuple[str, float]], list[str]]:
    """Order candidates by the likelihood of "sub-query [SEP] description".

    Returns (full reranked list ascending by neg-logprob, top-5 ids).
    Ties break by ascending tool id.
    """
    scored = []
    for tool_id, _ in candidates.ranked:
        description = catalog.get(tool_id).description
        nll = scorer.neg_logprob(candidates.sub_query + RERANK_SEPARATOR + description)
        scored.append((tool_id, nll))
    scored.sort(key=lambda item: (item[1], item[0]))
    return scored, [tool_id for tool_id, _ in scored[:SHORTLIST_SIZE]]


def predict_shortlist(
    top5: list[str],
    sub_query: str,
    provider: LlmProvider,
    catalog: ToolCatalog,
) -> Shortlist:
    """Ask the predictor which of the top-5 tools serve the sub-query.

    The response is parsed as names separated by newlines or commas and
    matched case-insensitively against the offered tool names; anything
    else is dropped with a warning. "none" means an empty shortlist.
    """
    if not top5:
        raise ValueError("predict_shortlist needs a non-empty top-5")
    tools_block = "\n".join(
        f"- {catalog.get(tool_id).name}: {catalog.get(tool_id).description}"
        for tool_id in top5
    )
    response = complete(
        provider, "predictor", {"sub_query": sub_query, "tools": tools_block}
    )
    pieces = [
        piece.strip()
        for line in response.splitlines()
        for piece in line.split(",")
        if piece.strip()
    ]
    if len(pieces) == 1 and pieces[0].lower() == "none":
        pieces = []
    by_name = {}
    for tool_id in top5:
        by_name.setdefault(catalog.get(tool_id).name.lower(), tool_id)
    selected: list[str] = []
    for piece in pieces:
        tool_id = by_name.get(piece.lower())
        if tool_id is None:
            logger.warning("predictor named %r, not among the offered tools; dropped", piece)
        elif tool_id not in selected:
            selected.append(tool_id)
    return Shortlist(sub_query=sub_query, tool_ids=tuple(selected), source_top5=tuple(top5))


def union_tools(shortlists: list[Shortlist]) -> set[str]:
    out: set[str] = set()
    for shortlist in shortlists:
        out.update(shortlist.tool_ids)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    pool_size: int = 20
    max_steps: int = 6
    batch_size: int = 4
    cluster_k: int | None = None
    seed: int = 0
    judge_sees_retrieved: bool = False


class Pipeline:
    """Bundle of catalog snapshot, dense index, providers, and knobs.

    ``run`` executes the full loop for one query. ``trial`` returns an
    ephemeral pipeline with one description swapped (for gating);
    ``install`` persists an accepted description and re-stamps the index.
    """

    def __init__(
        self,
        catalog: ToolCatalog,
        index: DenseIndex,
        embedder: EmbeddingProvider,
        scorer: LikelihoodScorer,
        llm: LlmProvider,
        config: PipelineConfig = PipelineConfig(),
    ):
        if index.catalog_version != catalog.version:
            raise StaleIndexError(
                f"index built for catalog version {index.catalog_version}, "
                f"catalog is at {catalog.version}; rebuild the index"
            )
        self.catalog = catalog
        self.index = index
        self.embedder = embedder
        self.scorer = scorer
        self.llm = llm
        self.config = config

    @classmethod
    def build(cls, catalog, embedder, scorer, llm, config=PipelineConfig()) -> "Pipeline":
        return cls(catalog, build_index(catalog, embedder), embedder, scorer, llm, config)

    def run(self, record: QueryRecord) -> RetrievalResult:
        return run_query(record, self)

    def trial(self, tool_id: str, description: str) -> "Pipeline":
        """Same pipeline with one description swapped and its vector
        re-embedded; catalog version (and index stamp) unchanged. The
        rerank scorer stays as built — only the index must track trials."""
        trial_catalog = swap_description(self.catalog, tool_id, description)
        trial_index = reindex_tool(
            self.index, tool_id, self.embedder.embed(description), self.catalog.version
        )
        return Pipeline(trial_catalog, trial_index, self.embedder, self.scorer, self.llm, self.config)

    def install(self, tool_id: str, description: str, round: int, dev_recall: float) -> None:
        """Persist an accepted description: lineage entry, version bump,
        single-vector reindex."""
        self.catalog = apply_description(self.catalog, tool_id, description, round, dev_recall)
        self.index = reindex_tool(
            self.index, tool_id, self.embedder.embed(description), self.catalog.version
        )

    def rebuild_index(self) -> None:
        """Full re-embed; kept for paranoia runs after many edits."""
        self.index = build_index(self.catalog, self.embedder)


def run_query(record: QueryRecord, pipeline: Pipeline) -> RetrievalResult:
    """Interleave planning and retrieval until the planner is done.

    A failed step raises :class:`PipelineError` carrying the partial
    trace. Successful runs record one trace entry per provider call, per
    step, and a final summary.
    """
    if pipeline.index.catalog_version != pipeline.catalog.version:
        raise StaleIndexError(
            f"index built for catalog version {pipeline.index.catalog_version}, "
            f"catalog is at {pipeline.catalog.version}; rebuild the index"
        )
    trace: list[dict] = []
    traced_llm = TracingProvider(pipeline.llm, trace)
    state = PlanState(
        query=record.text,
        query_id=record.id,
        max_steps=pipeline.config.max_steps,
        batch_size=pipeline.config.batch_size,
        cluster_k=pipeline.config.cluster_k,
        seed=pipeline.config.seed,
        judge_sees_retrieved=pipeline.config.judge_sees_retrieved,
    )
    steps: list[StepRecord] = []
    try:
        while not state.done:
            sub_query = plan_step(state, traced_llm)
            candidates = retrieve_candidates(
                pipeline.index,
                pipeline.embedder,
                sub_query.text,
                pipeline.config.pool_size,
                catalog=pipeline.catalog,
            )
            reranked, top5 = rerank_lm(candidates, pipeline.scorer, pipeline.catalog)
            if top5:
                shortlist = predict_shortlist(top5, sub_query.text, traced_llm, pipeline.catalog)
            else:
                shortlist = Shortlist(sub_query=sub_query.text, tool_ids=(), source_top5=())
            step = StepRecord(
                step_index=sub_query.step_index,
                sub_query=sub_query.text,
                candidates=candidates,
                reranked=tuple(reranked),
                top5=tuple(top5),
                shortlist=shortlist,
            )
            steps.append(step)
            # fed to the next step's judge when the config flag is on: the
            # stop check within plan_step runs before this step's retrieval
            state.retrieved_names.extend(
                pipeline.catalog.get(tool_id).name for tool_id in shortlist.tool_ids
            )
            trace.append(
                {
                    "kind": "step",
                    "step_index": step.step_index,
                    "sub_query": step.sub_query,
                    "pool": [tool_id for tool_id, _ in candidates.ranked],
                    "top5": list(top5),
                    "shortlist": list(shortlist.tool_ids),
                }
            )
    except ToolScoutError as exc:
        raise PipelineError(record.id, str(exc), trace) from exc

    final_tools = union_tools([step.shortlist for step in steps])
    assert final_tools == {t for step in steps for t in step.shortlist.tool_ids}
    hit_counts = {
        tool_id: sum(tool_id in step.shortlist.tool_ids for step in steps)
        for tool_id in sorted(final_tools)
    }
    exhausted = state.done_reason == "exhausted"
    trace.append(
        {
            "kind": "summary",
            "final_tools": sorted(final_tools),
            "hit_counts": hit_counts,
            "exhausted": exhausted,
        }
    )
    return RetrievalResult(
        query_id=record.id,
        sub_queries=tuple(state.history),
        steps=tuple(steps),
        final_tools=frozenset(final_tools),
        exhausted=exhausted,
        hit_counts=hit_counts,
        trace=tuple(trace),
    )
