"""Multi-round description optimization.

Each round: run the full retrieval loop over the train split and count,
per gold tool, how often it was missed; tools whose failure ratio exceeds
the threshold get their failure queries generalized (entities stripped),
reasons generated, and their description rewritten. A rewrite is accepted
only if it strictly improves that tool's recall on the dev split; the
previous description is kept otherwise. Per-tool counters accumulate
across rounds, and the loop is the only writer of the catalog.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .catalog import QueryRecord, Tool, save_description_cache
from .errors import OptimizerError, PipelineError, ToolScoutError
from .llm import LlmProvider, complete
from .pipeline import Pipeline

logger = logging.getLogger(__name__)


@dataclass
class ToolCounters:
    trials: int = 0
    failures: int = 0
    failure_queries: list[str] = field(default_factory=list)  # unique, oldest first
    best_recall: float = 0.0

    @property
    def failure_ratio(self) -> float:
        return self.failures / self.trials if self.trials else 0.0


@dataclass
class OptimizerState:
    tools: dict[str, ToolCounters]
    current_round: int = 0


@dataclass(frozen=True)
class OptimizerConfig:
    failure_threshold: float = 0.5  # in (0, 1]
    max_rounds: int = 5
    query_cap: int = 8  # failure queries fed to one rewrite

    def __post_init__(self):
        if not 0.0 < self.failure_threshold <= 1.0:
            raise ValueError("failure_threshold must be in (0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.query_cap < 1:
            raise ValueError("query_cap must be at least 1")


@dataclass(frozen=True)
class DescriptionProposal:
    tool_id: str
    round: int
    failure_ratio: float
    old_text: str
    filtered_queries: tuple[str, ...]
    reasons: tuple[str, ...]
    new_text: str
    dev_recall_old: float
    dev_recall_new: float
    accepted: bool


@dataclass
class OptimizationReport:
    proposals: list[DescriptionProposal]
    rounds_run: int
    state: OptimizerState

    def accepted(self) -> list[DescriptionProposal]:
        return [p for p in self.proposals if p.accepted]

    def cache(self) -> dict[str, dict]:
        """Latest accepted description per tool, in cache-file shape."""
        out: dict[str, dict] = {}
        for proposal in self.proposals:
            if proposal.accepted:
                out[proposal.tool_id] = {
                    "description": proposal.new_text,
                    "round": proposal.round,
                    "dev_recall": proposal.dev_recall_new,
                }
        return out


def tool_dev_recall(records: list[QueryRecord], pipeline: Pipeline, tool_id: str) -> float:
    """Recall restricted to dev queries whose gold set contains the tool:
    the fraction of them whose final tool set includes it. 0.0 when no
    dev query covers the tool (such a tool can never pass the gate)."""
    relevant = [r for r in records if tool_id in r.gold_tool_ids]
    if not relevant:
        return 0.0
    hits = 0
    evaluated = 0
    for record in relevant:
        try:
            result = pipeline.run(record)
        except PipelineError as exc:
            logger.warning("dev query %s skipped: %s", record.id, exc)
            continue
        evaluated += 1
        hits += tool_id in result.final_tools
    return hits / evaluated if evaluated else 0.0


def initial_recalls(devset: list[QueryRecord], pipeline: Pipeline) -> dict[str, float]:
    """Per-tool dev recall for every catalog tool, from one dev pass."""
    results = {}
    for record in devset:
        try:
            results[record.id] = pipeline.run(record).final_tools
        except PipelineError as exc:
            logger.warning("dev query %s skipped: %s", record.id, exc)
    recalls: dict[str, float] = {}
    for tool_id in pipeline.catalog.ids():
        covering = [r for r in devset if tool_id in r.gold_tool_ids and r.id in results]
        if covering:
            recalls[tool_id] = sum(tool_id in results[r.id] for r in covering) / len(covering)
        else:
            recalls[tool_id] = 0.0
    return recalls


def tally_retrieval_failures(
    trainset: list[QueryRecord], pipeline: Pipeline, state: OptimizerState
) -> OptimizerState:
    """Run every train query; bump trials for each gold tool, and failures
    (plus the failure query) for gold tools absent from the prediction.
    A query whose run fails is skipped and leaves every counter intact."""
    for record in trainset:
        try:
            predicted = pipeline.run(record).final_tools
        except PipelineError as exc:
            logger.warning("train query %s skipped: %s", record.id, exc)
            continue
        for tool_id in sorted(record.gold_tool_ids):
            counters = state.tools.setdefault(tool_id, ToolCounters())
            counters.trials += 1
            if tool_id not in predicted:
                counters.failures += 1
                if record.text not in counters.failure_queries:
                    counters.failure_queries.append(record.text)
    return state


def select_underinformative(state: OptimizerState, config: OptimizerConfig) -> list[str]:
    """Tools tried at least once whose failure ratio strictly exceeds the
    threshold, ascending id."""
    return sorted(
        tool_id
        for tool_id, counters in state.tools.items()
        if counters.trials > 0 and counters.failure_ratio > config.failure_threshold
    )


def strip_entities(queries: list[str], provider: LlmProvider, cap: int = 8) -> list[str]:
    """Generalize the most recent ``cap`` failure queries, newest first.

    An empty completion keeps the original query text, with a warning.
    """
    if not queries:
        raise ValueError("no failure queries to generalize")
    selected = list(reversed(queries[-cap:]))
    generalized = []
    for query in selected:
        response = complete(provider, "entity_filter", {"query": query}).strip()
        if not response:
            logger.warning("entity filter returned nothing for %r; keeping original", query[:60])
            response = query
        generalized.append(response)
    return generalized


def generate_reasons(tool: Tool, queries: list[str], provider: LlmProvider) -> list[str]:
    """One reason per non-blank response line; zero reasons is an error."""
    if not queries:
        raise ValueError("no queries to assess")
    response = complete(
        provider,
        "functionality_assessment",
        {
            "tool_name": tool.name,
            "description": tool.description,
            "queries": "\n".join(f"- {q}" for q in queries),
        },
    )
    reasons = [line.strip() for line in response.splitlines() if line.strip()]
    if not reasons:
        raise OptimizerError(f"no reasons generated for tool {tool.id!r}")
    return reasons


def rewrite_description(
    tool: Tool,
    description: str,
    queries: list[str],
    reasons: list[str],
    provider: LlmProvider,
) -> str:
    """Produce the enriched replacement text; emptiness is an error.

    Output identical to the old text is allowed here — the gate will
    reject it for lack of improvement.
    """
    if not (description and queries and reasons):
        raise ValueError("rewrite needs a description, queries, and reasons")
    response = complete(
        provider,
        "edit_ground",
        {
            "tool_name": tool.name,
            "description": description,
            "queries": "\n".join(f"- {q}" for q in queries),
            "reasons": "\n".join(f"- {r}" for r in reasons),
        },
    ).strip()
    if not response:
        raise OptimizerError(f"empty rewrite for tool {tool.id!r}")
    return response


def gate(
    devset: list[QueryRecord],
    pipeline: Pipeline,
    tool_id: str,
    new_text: str,
    state: OptimizerState,
) -> tuple[float, bool]:
    """Trial-install the rewrite, measure the tool's dev recall, and keep
    it only on strict improvement over the tool's best recall so far.

    Acceptance persists through ``pipeline.install`` (lineage + version
    bump + reindex of the one vector); rejection leaves the pipeline
    untouched since the trial was an ephemeral copy.
    """
    counters = state.tools.setdefault(tool_id, ToolCounters())
    trial = pipeline.trial(tool_id, new_text)
    recall_new = tool_dev_recall(devset, trial, tool_id)
    accepted = recall_new > counters.best_recall
    if accepted:
        pipeline.install(tool_id, new_text, round=state.current_round, dev_recall=recall_new)
        counters.best_recall = recall_new
    return recall_new, accepted


def run_optimization(
    trainset: list[QueryRecord],
    devset: list[QueryRecord],
    pipeline: Pipeline,
    config: OptimizerConfig = OptimizerConfig(),
    cache_path=None,
) -> OptimizationReport:
    """At most ``max_rounds`` rounds of tally -> select -> generalize ->
    reasons -> rewrite -> gate; stops early when a round selects nothing.

    One tool's failure is logged and does not abort the round. When
    ``cache_path`` is given, the description cache is rewritten after
    every acceptance.
    """
    state = OptimizerState(
        tools={
            tool_id: ToolCounters(best_recall=recall)
            for tool_id, recall in initial_recalls(devset, pipeline).items()
        }
    )
    proposals: list[DescriptionProposal] = []
    rounds_run = 0
    report = OptimizationReport(proposals=proposals, rounds_run=0, state=state)
    for round_number in range(1, config.max_rounds + 1):
        state.current_round = round_number
        rounds_run = round_number
        report.rounds_run = rounds_run
        tally_retrieval_failures(trainset, pipeline, state)
        selected = select_underinformative(state, config)
        if not selected:
            logger.info("round %d selected no tools; stopping early", round_number)
            break
        for tool_id in selected:
            counters = state.tools[tool_id]
            try:
                tool = pipeline.catalog.get(tool_id)
                filtered = strip_entities(counters.failure_queries, pipeline.llm, config.query_cap)
                reasons = generate_reasons(tool, filtered, pipeline.llm)
                new_text = rewrite_description(tool, tool.description, filtered, reasons, pipeline.llm)
                recall_old = counters.best_recall
                recall_new, accepted = gate(devset, pipeline, tool_id, new_text, state)
            except ToolScoutError as exc:
                logger.warning("round %d: tool %s skipped: %s", round_number, tool_id, exc)
                continue
            proposals.append(
                DescriptionProposal(
                    tool_id=tool_id,
                    round=round_number,
                    failure_ratio=counters.failure_ratio,
                    old_text=tool.description,
                    filtered_queries=tuple(filtered),
                    reasons=tuple(reasons),
                    new_text=new_text,
                    dev_recall_old=recall_old,
                    dev_recall_new=recall_new,
                    accepted=accepted,
                )
            )
            if accepted and cache_path is not None:
                save_description_cache(report.cache(), cache_path)
    report.rounds_run = rounds_run
    return report
