"""Autoregressive query decomposition with furthest-first sub-query
selection and an LLM stop check.

Each step asks the provider for a batch of hypothesis sub-queries, keeps
the one that clusters apart from everything planned so far (TF-IDF +
k-means over the combined texts), and then asks the provider whether the
original query is satisfied.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import PlanningError
from .llm import LlmProvider, complete
from .text_analysis import kmeans, tfidf_fit, tfidf_transform

logger = logging.getLogger(__name__)

_VERDICT_RE = re.compile(r"\s*([A-Za-z]+)")


@dataclass(frozen=True)
class SubQuery:
    text: str
    step_index: int  # 1-based, contiguous within a plan
    parent_query_id: str


@dataclass
class PlanState:
    """Mutable state for one query's planning loop; never shared."""

    query: str
    query_id: str = ""
    history: list[SubQuery] = field(default_factory=list)
    hypotheses: list[str] = field(default_factory=list)
    done: bool = False
    done_reason: str | None = None  # "satisfied" or "exhausted"
    max_steps: int = 6
    batch_size: int = 4
    cluster_k: int | None = None  # None -> min(len(union), len(prev) + 1)
    seed: int = 0
    judge_sees_retrieved: bool = False
    retrieved_names: list[str] = field(default_factory=list)


def format_history(entries: list[str]) -> str:
    if not entries:
        return "(none)"
    return "\n".join(f"{i}. {text}" for i, text in enumerate(entries, 1))


def propose_hypotheses(state: PlanState, provider: LlmProvider) -> list[str]:
    """One completion, one candidate per non-blank line, capped at the
    batch size; producing zero candidates is an error."""
    if state.done:
        raise PlanningError("plan is already done")
    response = complete(
        provider,
        "planner",
        {
            "query": state.query,
            "history": format_history([s.text for s in state.history]),
            "mode": "propose",
            "batch_size": str(state.batch_size),
        },
    )
    lines = [line.strip() for line in response.splitlines() if line.strip()]
    if not lines:
        raise PlanningError(f"no hypotheses for query {state.query_id or state.query!r}")
    return lines[: state.batch_size]


@dataclass(frozen=True)
class SelectionDetail:
    """Clustering evidence behind one selection, exposed for testing."""

    chosen: str
    k: int
    prev_labels: tuple[int, ...]
    cand_labels: tuple[int, ...]
    filtered: tuple[str, ...]


def select_subquery_detail(
    prev: list[str], cand: list[str], seed: int, cluster_k: int | None = None
) -> SelectionDetail:
    """Furthest-first choice among candidates.

    With no previous sub-queries (or when every candidate lands in a
    cluster already occupied by a previous one) the choice falls back to a
    seeded-uniform pick over all candidates; otherwise it is a
    seeded-uniform pick over the candidates whose cluster contains no
    previous sub-query.
    """
    if not cand:
        raise ValueError("no candidates to select from")
    rng = random.Random(seed)
    if not prev:
        return SelectionDetail(
            chosen=rng.choice(cand), k=0, prev_labels=(), cand_labels=(), filtered=()
        )
    union = list(prev) + list(cand)
    model = tfidf_fit(union)
    if not model.vocabulary:
        return SelectionDetail(
            chosen=rng.choice(cand), k=0, prev_labels=(), cand_labels=(), filtered=()
        )
    vectors = np.stack([tfidf_transform(model, t).to_dense(model.dimension) for t in union])
    k = cluster_k if cluster_k is not None else min(len(union), len(prev) + 1)
    k = max(1, min(k, len(union)))
    assignment = kmeans(vectors, k, seed)
    prev_labels = assignment.labels[: len(prev)]
    cand_labels = assignment.labels[len(prev):]
    occupied = set(prev_labels)
    filtered = tuple(
        text for text, label in zip(cand, cand_labels) if label not in occupied
    )
    chosen = rng.choice(list(filtered) if filtered else cand)
    return SelectionDetail(
        chosen=chosen,
        k=k,
        prev_labels=prev_labels,
        cand_labels=cand_labels,
        filtered=filtered,
    )


def select_subquery(prev: list[str], cand: list[str], seed: int, cluster_k: int | None = None) -> str:
    return select_subquery_detail(prev, cand, seed, cluster_k).chosen


def goal_satisfied(state: PlanState, provider: LlmProvider) -> bool:
    """Ask the provider to judge the plan; parse a leading yes/no token.

    Anything unparseable counts as "no" and is logged.
    """
    if not state.history:
        raise PlanningError("cannot judge an empty plan")
    entries = [s.text for s in state.history]
    if state.judge_sees_retrieved and state.retrieved_names:
        entries = entries + [f"(retrieved so far: {', '.join(state.retrieved_names)})"]
    response = complete(
        provider,
        "planner",
        {
            "query": state.query,
            "history": format_history(entries),
            "mode": "judge",
        },
    )
    match = _VERDICT_RE.match(response)
    token = match.group(1).lower() if match else ""
    if token == "yes":
        return True
    if token != "no":
        logger.warning("unparseable planner verdict %r; treating as no", response[:80])
    return False


def plan_step(state: PlanState, provider: LlmProvider) -> SubQuery:
    """Propose, select, append, then stop-check; returns the new sub-query.

    ``state.done`` flips when the judge is satisfied or the step cap is
    reached, whichever happens first.
    """
    if state.done:
        raise PlanningError("plan is already done")
    state.hypotheses = propose_hypotheses(state, provider)
    prev = [s.text for s in state.history]
    chosen = select_subquery(
        prev, state.hypotheses, seed=state.seed + len(state.history), cluster_k=state.cluster_k
    )
    sub_query = SubQuery(
        text=chosen, step_index=len(state.history) + 1, parent_query_id=state.query_id
    )
    state.history.append(sub_query)
    if goal_satisfied(state, provider):
        state.done = True
        state.done_reason = "satisfied"
    elif len(state.history) >= state.max_steps:
        state.done = True
        state.done_reason = "exhausted"
    return sub_query
