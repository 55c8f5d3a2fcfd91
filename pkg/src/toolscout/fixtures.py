"""Deterministic desk-scale test assets.

Two kinds of things live here:

* brute-force oracles — small, independent re-implementations (cosine
  ranking, BM25, the softmax loss, DCG) used by the test suite to check
  the production paths against;
* the fixture generator — a synthetic 60-tool catalog, 30 multi-aspect
  queries, scripted transcripts for every provider call the end-to-end
  suites make, and a checksum manifest so the committed copy can be
  re-verified from its seed.

Fixtures are generated once, pinned by checksum, and committed; tests
never depend on generation randomness at test time. Every query is
constructed so that one of its aspects is phrased without the target
tool's vocabulary: one-shot dense retrieval provably misses that tool,
while the scripted decomposition recovers the whole gold set.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .catalog import ToolCatalog, assign_splits, load_catalog, load_queries
from .dense import HashEmbedder, build_index, dense_topk
from .errors import FixtureError
from .llm import RecordingProvider, save_transcript, train_ngram
from .optimizer import OptimizerConfig, gate, run_optimization
from .pipeline import Pipeline, PipelineConfig
from .text_analysis import tokenize

# --- independent oracles -----------------------------------------------------


def brute_force_cosine_ranking(
    entries: list[tuple[str, list[float]]], query: list[float]
) -> list[tuple[str, float]]:
    """Full cosine ranking via plain Python sums (vectors pre-normalized)."""
    scored = []
    for doc_id, vector in entries:
        scored.append((doc_id, sum(a * b for a, b in zip(vector, query))))
    return sorted(scored, key=lambda item: (-item[1], item[0]))


def brute_force_bm25(
    docs: dict[str, str], query: str, k1: float = 1.2, b: float = 0.75
) -> list[tuple[str, float]]:
    """Per-document BM25 evaluated directly from the formula."""
    token_lists = {doc_id: tokenize(text) for doc_id, text in docs.items()}
    n = len(docs)
    if n == 0:
        return []
    avg = sum(len(t) for t in token_lists.values()) / n
    df: Counter[str] = Counter()
    for tokens in token_lists.values():
        df.update(set(tokens))
    scored = []
    for doc_id, tokens in token_lists.items():
        tf = Counter(tokens)
        score = 0.0
        for term in tokenize(query):
            if df[term] == 0 or tf[term] == 0:
                continue
            idf = math.log(1 + (n - df[term] + 0.5) / (df[term] + 0.5))
            score += idf * tf[term] * (k1 + 1) / (
                tf[term] + k1 * (1 - b + b * len(tokens) / avg)
            )
        if score > 0:
            scored.append((doc_id, score))
    return sorted(scored, key=lambda item: (-item[1], item[0]))


def softmax_loss_reference(
    queries: list[list[float]],
    positives: list[list[float]],
    negatives: list[list[list[float]]],
    w: list[list[float]],
) -> float:
    """Mean -ln(exp(s+)/(exp(s+) + sum exp(s-))) with s = (Wq).(Wd),
    written directly from the definition (no log-sum-exp tricks)."""

    def project(vec):
        return [sum(w[i][j] * vec[j] for j in range(len(vec))) for i in range(len(w))]

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    total = 0.0
    for q, pos, negs in zip(queries, positives, negatives):
        wq = project(q)
        s_pos = dot(wq, project(pos))
        denom = math.exp(s_pos) + sum(math.exp(dot(wq, project(d))) for d in negs)
        total -= math.log(math.exp(s_pos) / denom)
    return total / len(queries)


def dcg_reference(grades_in_rank_order: list[int]) -> float:
    """Plain DCG: sum of (2^g - 1) / log2(position + 1)."""
    return sum(
        (2**g - 1) / math.log2(pos + 1) for pos, g in enumerate(grades_in_rank_order, 1)
    )


def recall_reference(retrieved: list[str], gold: list[str]) -> float:
    hits = sum(1 for g in set(gold) if g in set(retrieved))
    return hits / len(set(gold))


# --- fixture generation --------------------------------------------------------

EMBED_DIMENSION = 256
POOL_SIZE = 5
MAX_STEPS = 6
BATCH_SIZE = 4
PIPELINE_SEED = 0
SPLIT_SEED = 7
EG_TARGET_COUNT = 10

_CATEGORY_WORDS = {
    "music": ["playlist", "lyrics", "concert", "vinyl", "podcast",
              "karaoke", "orchestra", "remix", "festival", "soundtrack"],
    "travel": ["flight", "hostel", "itinerary", "visa", "cruise",
               "landmark", "roadtrip", "luggage", "passport", "safari"],
    "finance": ["budget", "invoice", "dividend", "mortgage", "payroll",
                "audit", "portfolio", "refund", "ledger", "pension"],
    "cooking": ["marinade", "sourdough", "espresso", "casserole", "fermentation",
                "grill", "pastry", "broth", "seasoning", "cocktail"],
    "fitness": ["marathon", "yoga", "deadlift", "cardio", "pilates",
                "sprint", "stretching", "rowing", "cycling", "swimming"],
    "weather": ["rainfall", "humidity", "forecast", "blizzard", "heatwave",
                "thunderstorm", "frost", "drought", "windchill", "aurora"],
}

_NAME_SUFFIXES = ["Finder", "Tracker", "Planner", "Hub", "Scout",
                  "Desk", "Board", "Vault", "Radar", "Studio"]

# Entity decorations attached to query texts, paired with the generic
# phrasing the scripted entity filter answers with.
_ENTITIES = [
    ("with the ID '987654'", "with a specific ID"),
    ("for account RX-4471", "for a specific account"),
    ("before March 3rd", "before a specific date"),
    ("for my friend Alice", "for a specific person"),
    ("under order number 20481", "under a specific order number"),
    ("from the 2019 archive", "from a specific year's archive"),
]

# Deliberately free of catalog vocabulary, so the vaguely-phrased aspect
# carries no signal for its tool under the bag-of-tokens embedder.
_VAGUE_PHRASES = [
    "sort out a small personal errand of mine",
    "get a loose end of mine handled",
    "take care of an odd little job for me",
    "wrap up a nagging chore of mine",
    "tidy up one leftover matter of mine",
    "handle an unusual request of mine",
]

_FILLERS = [
    "Please keep everything easy to follow.",
    "A tidy summary at the end would be welcome.",
    "Ideally this happens without much back and forth.",
    "No rush on any of it.",
    "Feel free to ask if anything is unclear.",
    "Short bullet points are perfect.",
]


def _tool_id(category: str, base: str) -> str:
    return f"{category}-{base}"


def _tool_name(base: str, index: int) -> str:
    return f"{base.title()} {_NAME_SUFFIXES[index % len(_NAME_SUFFIXES)]}"


def _description(name: str, base: str, category: str) -> str:
    return (
        f"{name} helps with {base} tasks in the {category} domain. "
        f"Browse {base} listings, compare {base} options, and save {base} notes."
    )


def _poor_description(index: int) -> str:
    return (
        f"A general utility, edition {index}. Provides assorted features "
        "and handy options for everyday needs."
    )


def _sub_query(base: str, category: str) -> str:
    return f"find {base} {category} resources"


@dataclass(frozen=True)
class FixtureSuite:
    """Paths plus the manifest the acceptance tests replay against."""

    root: Path
    catalog_path: Path
    queries_path: Path
    transcript_path: Path
    eg_catalog_path: Path
    config_path: Path
    manifest_path: Path
    manifest: dict


def pipeline_config() -> PipelineConfig:
    return PipelineConfig(
        pool_size=POOL_SIZE,
        max_steps=MAX_STEPS,
        batch_size=BATCH_SIZE,
        seed=PIPELINE_SEED,
    )


def build_fixture_pipeline(catalog: ToolCatalog, llm) -> Pipeline:
    """The exact pipeline wiring the fixture transcripts were recorded with."""
    embedder = HashEmbedder(EMBED_DIMENSION)
    scorer = train_ngram([catalog.tools[t].description for t in catalog.ids()], order=2)
    return Pipeline.build(catalog, embedder, scorer, llm, pipeline_config())


def _build_tools(poor_ids: set[str] | None = None) -> list[dict]:
    rows = []
    index = 0
    for category in sorted(_CATEGORY_WORDS):
        for base in _CATEGORY_WORDS[category]:
            tool_id = _tool_id(category, base)
            name = _tool_name(base, index)
            if poor_ids and tool_id in poor_ids:
                description = _poor_description(index)
            else:
                description = _description(name, base, category)
            rows.append(
                {"id": tool_id, "name": name, "category": category, "description": description}
            )
            index += 1
    return rows


def _write_jsonl(rows: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


class _ScriptPolicy:
    """Intended responses for every provider call the suites make.

    Planning: one sub-query per gold tool, revealed one at a time; the
    judge answers Yes once the plan covers them all. Prediction: the
    sub-query's target tool name when it is among the offered tools, else
    "none". Entity filtering, reasons, and rewrites come from
    generation-time lookup tables.
    """

    def __init__(
        self,
        plans: dict[str, list[str]],
        target_by_subquery: dict[str, str],
        names: dict[str, str],
        generic_queries: dict[str, str],
        rewrites: dict[str, str],
    ):
        self.plans = plans  # query text -> ordered sub-query texts
        self.target_by_subquery = target_by_subquery  # sub-query text -> tool id
        self.names = names  # tool id -> tool name
        self.generic_queries = generic_queries  # query text -> generic text
        self.rewrites = rewrites  # tool name -> replacement text

    @staticmethod
    def _planned_count(history: str) -> int:
        if history.strip() == "(none)":
            return 0
        return sum(1 for line in history.splitlines() if line.strip())

    def __call__(self, template_id: str, variables: dict[str, str]) -> str:
        if template_id == "planner":
            plan = self.plans[variables["query"]]
            done = self._planned_count(variables["history"])
            if variables["mode"] == "propose":
                if done >= len(plan):
                    raise FixtureError("planner asked to propose past the end of a plan")
                return plan[done]
            return "Yes" if done >= len(plan) else "No"
        if template_id == "predictor":
            target = self.target_by_subquery[variables["sub_query"]]
            marker = f"- {self.names[target]}:"
            return self.names[target] if marker in variables["tools"] else "none"
        if template_id == "entity_filter":
            return self.generic_queries[variables["query"]]
        if template_id == "functionality_assessment":
            scenario_count = variables["queries"].count("- ")
            return "\n".join(
                f"The scenarios describe needs that {variables['tool_name']} is built to cover."
                for _ in range(max(1, min(scenario_count, 3)))
            )
        if template_id == "edit_ground":
            return self.rewrites[variables["tool_name"]]
        raise FixtureError(f"unexpected template {template_id!r}")


def _compose_query_text(gold: list[str], vague_tool: str, query_index: int, attempt: int) -> str:
    aspects = []
    for tool_id in gold:
        category, base = tool_id.split("-", 1)
        if tool_id == vague_tool:
            aspects.append(_VAGUE_PHRASES[(query_index + attempt) % len(_VAGUE_PHRASES)])
        else:
            aspects.append(f"look into {base} {category} resources")
    entity, _ = _ENTITIES[query_index % len(_ENTITIES)]
    filler = _FILLERS[(query_index + attempt) % len(_FILLERS)]
    body = "; then ".join(aspects)
    return f"I want to {body} {entity}. {filler}"


def _generic_query_text(text: str, query_index: int) -> str:
    entity, generic = _ENTITIES[query_index % len(_ENTITIES)]
    return text.replace(entity, generic)


def _draw_gold_sets(rng: random.Random, tool_ids: list[str]) -> list[list[str]]:
    """30 gold sets of size 2-4, each spanning at least two categories."""
    sets = []
    for _ in range(30):
        size = rng.randint(2, 4)
        while True:
            gold = sorted(rng.sample(tool_ids, size))
            if len({t.split("-", 1)[0] for t in gold}) >= 2:
                break
        sets.append(gold)
    return sets


def generate_fixture(seed: int, out_dir: str | Path) -> FixtureSuite:
    """Generate the full suite into ``out_dir`` and verify its built-in
    properties; raises :class:`FixtureError` if any construction check
    fails."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    tools = _build_tools()
    names = {row["id"]: row["name"] for row in tools}
    tool_ids = sorted(names)

    catalog_path = out / "catalog.jsonl"
    _write_jsonl(tools, catalog_path)
    catalog = load_catalog(catalog_path)
    embedder = HashEmbedder(EMBED_DIMENSION)
    index = build_index(catalog, embedder)

    # Gold sets and splits come before query texts: the keyword-poor
    # variant needs tools covered in both train and dev, which may require
    # padding gold sets, which changes the texts.
    gold_sets = _draw_gold_sets(rng, tool_ids)
    query_ids = [f"q{i:02d}" for i in range(1, 31)]
    assignment = assign_splits(query_ids, SPLIT_SEED)
    dev_ids = [q for q in query_ids if assignment[q] == "dev"]
    train_ids = [q for q in query_ids if assignment[q] == "train"]
    gold_by_query = dict(zip(query_ids, gold_sets))

    def _covered(ids):
        covered: set[str] = set()
        for qid in ids:
            covered.update(gold_by_query[qid])
        return covered

    dev_covered = sorted(_covered(dev_ids))
    padding = [t for t in tool_ids if t not in dev_covered]
    attempts = 0
    while len(dev_covered) < EG_TARGET_COUNT + 2 and padding:
        qid = dev_ids[attempts % len(dev_ids)]
        if len(gold_by_query[qid]) < 4:
            extra = padding.pop(0)
            gold_by_query[qid] = sorted(gold_by_query[qid] + [extra])
            dev_covered.append(extra)
        attempts += 1
        if attempts > 200:
            raise FixtureError("could not pad dev coverage")
    dev_covered = sorted(dev_covered)

    train_covered = _covered(train_ids)
    eg_targets: list[str] = []
    for tool_id in dev_covered:
        if len(eg_targets) == EG_TARGET_COUNT:
            break
        if tool_id in train_covered:
            eg_targets.append(tool_id)
            continue
        for qid in train_ids:
            if len(gold_by_query[qid]) < 4:
                gold_by_query[qid] = sorted(gold_by_query[qid] + [tool_id])
                eg_targets.append(tool_id)
                break
    if len(eg_targets) < EG_TARGET_COUNT:
        raise FixtureError(f"only {len(eg_targets)} tools covered in train and dev")

    # Query texts, verified as composed: the vaguely-phrased gold tool must
    # be absent from the one-shot dense top-5 for the whole query.
    query_rows = []
    plans: dict[str, list[str]] = {}
    target_by_subquery: dict[str, str] = {}
    generic_queries: dict[str, str] = {}
    for qi, qid in enumerate(query_ids):
        gold = gold_by_query[qid]
        vague_tool = gold[qi % len(gold)]
        text = None
        for attempt in range(12):
            candidate = _compose_query_text(gold, vague_tool, qi, attempt)
            one_shot = {t for t, _ in dense_topk(index, embedder.embed(candidate), 5)}
            if vague_tool not in one_shot:
                text = candidate
                break
        if text is None:
            raise FixtureError(f"{qid}: could not phrase a one-shot miss for {vague_tool}")
        generic_queries[text] = _generic_query_text(text, qi)
        plan = []
        for tool_id in gold:
            category, base = tool_id.split("-", 1)
            sub = _sub_query(base, category)
            plan.append(sub)
            target_by_subquery[sub] = tool_id
        plans[text] = plan
        graded = {tool_id: 2 for tool_id in gold}
        mate = next(
            t for t in tool_ids
            if t.split("-", 1)[0] == gold[0].split("-", 1)[0] and t not in gold
        )
        graded[mate] = 1
        query_rows.append(
            {
                "id": qid,
                "query": text,
                "relevant_tool_ids": gold,
                "graded": dict(sorted(graded.items())),
            }
        )
    if len(plans) != len(query_rows):
        raise FixtureError("duplicate query texts")

    queries_path = out / "queries.jsonl"
    _write_jsonl(query_rows, queries_path)
    dataset = load_queries(queries_path, catalog, SPLIT_SEED)

    # Replacement texts for targets: the informative description plus a
    # sentence in the sub-query's own words. One designated stubborn tool
    # keeps getting a useless rewrite, so its gate rejects every round.
    stubborn = eg_targets[0]
    rewrites: dict[str, str] = {}
    for tool_id in eg_targets:
        category, base = tool_id.split("-", 1)
        name = names[tool_id]
        if tool_id == stubborn:
            rewrites[name] = "A multi-purpose helper covering many situations and needs."
        else:
            rewrites[name] = (
                f"{name} finds {base} {category} resources. "
                + _description(name, base, category)
            )

    policy = _ScriptPolicy(plans, target_by_subquery, names, generic_queries, rewrites)
    recorder = RecordingProvider(policy)

    # --- session A: every query through the standard pipeline --------------
    pipeline = build_fixture_pipeline(catalog, recorder)
    expected_unions: dict[str, list[str]] = {}
    for record in dataset.records:
        result = pipeline.run(record)
        got = set(result.final_tools)
        if not record.gold_tool_ids <= got:
            raise FixtureError(
                f"{record.id}: planned retrieval missed {sorted(record.gold_tool_ids - got)}"
            )
        one_shot = {t for t, _ in dense_topk(index, embedder.embed(record.text), 5)}
        if record.gold_tool_ids <= one_shot:
            raise FixtureError(f"{record.id}: one-shot top-5 found every gold tool")
        expected_unions[record.id] = sorted(got)

    # --- session B: the description-optimization run -----------------------
    eg_catalog_path = out / "eg_catalog.jsonl"
    _write_jsonl(_build_tools(poor_ids=set(eg_targets)), eg_catalog_path)
    eg_catalog = load_catalog(eg_catalog_path)
    eg_pipeline = build_fixture_pipeline(eg_catalog, recorder)
    trainset = dataset.split("train")
    devset = dataset.split("dev")

    from .evaluation import evaluate_system

    pre = evaluate_system(devset, eg_pipeline, sample_size=len(devset), seed=0)
    report = run_optimization(trainset, devset, eg_pipeline, OptimizerConfig())
    post = evaluate_system(devset, eg_pipeline, sample_size=len(devset), seed=0)
    if not post.macro_recall > pre.macro_recall:
        raise FixtureError(
            f"optimization did not lift dev recall ({pre.macro_recall} -> {post.macro_recall})"
        )

    # Inference-startup path: base catalog plus the description cache,
    # pipeline built fresh (rerank LM retrained on the cached corpus).
    from .catalog import apply_description_cache

    cached_catalog = apply_description_cache(load_catalog(eg_catalog_path), report.cache())
    cached_pipeline = build_fixture_pipeline(cached_catalog, recorder)
    cached = evaluate_system(devset, cached_pipeline, sample_size=len(devset), seed=0)
    if cached.macro_recall != post.macro_recall:
        raise FixtureError("cache application did not reproduce the optimized recall")
    if report.rounds_run != OptimizerConfig().max_rounds:
        raise FixtureError(f"expected a full {OptimizerConfig().max_rounds}-round run")
    accepted_ids = {p.tool_id for p in report.accepted()}
    if stubborn in accepted_ids or not accepted_ids:
        raise FixtureError("stubborn tool accepted, or nothing accepted")

    # Record a gate trial that lowers a healthy tool's recall, for the
    # catalog-restoration check.
    lowering_tool = sorted(accepted_ids)[0]
    lowering_text = "An unrelated placeholder blurb with no useful cues."
    _, lowering_accepted = gate(devset, eg_pipeline, lowering_tool, lowering_text, report.state)
    if lowering_accepted:
        raise FixtureError("lowering rewrite was accepted")

    transcript_path = out / "transcript.jsonl"
    save_transcript(recorder.transcript, transcript_path)

    config_path = out / "config.cfg"
    config_lines = [
        "# knobs the fixture transcripts were recorded with",
        f"embed_dimension = {EMBED_DIMENSION}",
        f"pool_size = {POOL_SIZE}",
        f"max_steps = {MAX_STEPS}",
        f"batch_size = {BATCH_SIZE}",
        f"seed = {PIPELINE_SEED}",
        f"split_seed = {SPLIT_SEED}",
        "embed_provider = test",
        "llm_provider = scripted",
    ]
    config_path.write_text("\n".join(config_lines) + "\n", encoding="utf-8")

    files = [catalog_path, queries_path, eg_catalog_path, transcript_path, config_path]
    manifest = {
        "seed": seed,
        "split_seed": SPLIT_SEED,
        "embed_dimension": EMBED_DIMENSION,
        "pool_size": POOL_SIZE,
        "max_steps": MAX_STEPS,
        "batch_size": BATCH_SIZE,
        "pipeline_seed": PIPELINE_SEED,
        "tool_count": len(tools),
        "query_count": len(query_rows),
        "eg_targets": eg_targets,
        "stubborn_tool": stubborn,
        "lowering_gate": {"tool_id": lowering_tool, "text": lowering_text},
        "expected_unions": expected_unions,
        "checksums": {p.name: _sha256(p) for p in files},
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return FixtureSuite(
        root=out,
        catalog_path=catalog_path,
        queries_path=queries_path,
        transcript_path=transcript_path,
        eg_catalog_path=eg_catalog_path,
        config_path=config_path,
        manifest_path=manifest_path,
        manifest=manifest,
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()
