"""Operator surface: ingest, index, plan, retrieve, optimize, train, eval.

Configuration is a flat ``key = value`` file plus flag overrides (flags
win). Auth tokens are only ever read from the environment
(``TOOLSCOUT_LLM_TOKEN``, ``TOOLSCOUT_EMBED_TOKEN``), never from files.
With scripted/test providers and fixed seeds every subcommand's primary
output file is byte-reproducible; none of them write outside their
configured output paths.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import evaluation
from .catalog import (
    ToolCatalog,
    apply_description_cache,
    load_catalog,
    load_description_cache,
    load_queries,
    save_catalog,
    save_description_cache,
    save_queries,
)
from .dense import (
    HashEmbedder,
    ProjectedEmbedder,
    RemoteEmbedder,
    build_index,
    load_index,
    save_index,
)
from .errors import ConfigError, ToolScoutError
from .llm import RemoteChatProvider, ScriptedProvider, load_transcript, train_ngram
from .optimizer import OptimizerConfig, run_optimization
from .pipeline import Pipeline, PipelineConfig, TracingProvider
from .planner import PlanState, plan_step
from .training import ProjectionHead, TrainBatch, load_head, save_head, train


@dataclass
class Config:
    """All paths and knobs; field names double as config-file keys."""

    catalog: str = ""
    queries: str = ""
    cache: str = ""
    transcript: str = ""
    index: str = ""
    head: str = ""
    llm_provider: str = "scripted"  # scripted | remote
    embed_provider: str = "test"    # test | remote
    llm_endpoint: str = ""
    llm_model: str = ""
    embed_endpoint: str = ""
    embed_model: str = ""
    embed_dimension: int = 64
    ngram_order: int = 2
    pool_size: int = 20
    max_steps: int = 6
    batch_size: int = 4
    failure_threshold: float = 0.5
    max_rounds: int = 5
    query_cap: int = 8
    seed: int = 0
    split_seed: int = 7
    sample_size: int = 500
    n_negatives: int = 4
    train_batch_size: int = 16
    train_steps: int = 500
    learning_rate: float = 0.05
    transcript_strict: bool = True

    def validate(self) -> None:
        if self.pool_size < 1 or self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("pool_size, max_steps, and batch_size must be positive")
        if not 0.0 < self.failure_threshold <= 1.0:
            raise ConfigError("failure_threshold must be in (0, 1]")
        if self.max_rounds < 1 or self.query_cap < 1:
            raise ConfigError("max_rounds and query_cap must be positive")
        if self.embed_dimension < 1 or self.ngram_order < 1:
            raise ConfigError("embed_dimension and ngram_order must be positive")
        if self.llm_provider not in ("scripted", "remote"):
            raise ConfigError(f"unknown llm_provider {self.llm_provider!r}")
        if self.embed_provider not in ("test", "remote"):
            raise ConfigError(f"unknown embed_provider {self.embed_provider!r}")


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False}


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}: line {lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict[str, str], overrides: dict) -> Config:
    config = Config()
    known = {f.name: f.type for f in fields(Config)}
    for key, raw in file_values.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(config, key, _coerce(key, raw, getattr(config, key)))
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.validate()
    return config


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() not in _BOOL_VALUES:
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return _BOOL_VALUES[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _require(config: Config, *names: str) -> None:
    for name in names:
        if not getattr(config, name):
            raise ConfigError(f"missing required path: {name}")


def _load_catalog_with_cache(config: Config) -> ToolCatalog:
    catalog = load_catalog(config.catalog)
    if config.cache and Path(config.cache).exists():
        catalog = apply_description_cache(catalog, load_description_cache(config.cache))
    return catalog


def _embedder(config: Config):
    if config.embed_provider == "test":
        base = HashEmbedder(config.embed_dimension)
    else:
        _require(config, "embed_endpoint", "embed_model")
        base = RemoteEmbedder(config.embed_endpoint, config.embed_model, config.embed_dimension)
    if config.head and Path(config.head).exists():
        base = ProjectedEmbedder(base, load_head(config.head).w)
    return base


def _llm(config: Config):
    if config.llm_provider == "scripted":
        _require(config, "transcript")
        return ScriptedProvider(load_transcript(config.transcript, strict=config.transcript_strict))
    _require(config, "llm_endpoint", "llm_model")
    return RemoteChatProvider(config.llm_endpoint, config.llm_model)


def _scorer(config: Config, catalog: ToolCatalog):
    corpus = [catalog.tools[tool_id].description for tool_id in catalog.ids()]
    return train_ngram(corpus, order=config.ngram_order)


def _pipeline_config(config: Config) -> PipelineConfig:
    return PipelineConfig(
        pool_size=config.pool_size,
        max_steps=config.max_steps,
        batch_size=config.batch_size,
        seed=config.seed,
    )


def _pipeline(config: Config, catalog: ToolCatalog, index=None) -> Pipeline:
    embedder = _embedder(config)
    if index is None:
        index = build_index(catalog, embedder)
    return Pipeline(catalog, index, embedder, _scorer(config, catalog), _llm(config),
                    _pipeline_config(config))


def _find_record(config: Config, catalog: ToolCatalog, query_id: str):
    dataset = load_queries(config.queries, catalog, config.split_seed)
    for record in dataset.records:
        if record.id == query_id:
            return record, dataset
    raise ConfigError(f"query id {query_id!r} not found in {config.queries}")


# --- subcommands -------------------------------------------------------------


def cmd_ingest(config: Config, args) -> int:
    _require(config, "catalog", "queries")
    catalog = load_catalog(config.catalog)
    dataset = load_queries(config.queries, catalog, config.split_seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_catalog(catalog, out_dir / "catalog.norm.jsonl")
    save_queries(dataset, out_dir / "queries.norm.jsonl")
    counts = {name: len(dataset.split(name)) for name in ("train", "dev", "test")}
    print(f"catalog: {len(catalog)} tools (version {catalog.version})")
    print(f"queries: {len(dataset.records)} "
          f"(train {counts['train']}, dev {counts['dev']}, test {counts['test']})")
    return 0


def cmd_index(config: Config, args) -> int:
    _require(config, "catalog", "index")
    catalog = _load_catalog_with_cache(config)
    index = build_index(catalog, _embedder(config))
    save_index(index, config.index)
    print(f"indexed {len(index)} tools at catalog version {index.catalog_version}")
    return 0


def cmd_plan(config: Config, args) -> int:
    _require(config, "catalog", "queries")
    catalog = _load_catalog_with_cache(config)
    record, _ = _find_record(config, catalog, args.query_id)
    trace: list = []
    provider = TracingProvider(_llm(config), trace)
    state = PlanState(
        query=record.text,
        query_id=record.id,
        max_steps=config.max_steps,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    while not state.done:
        sub_query = plan_step(state, provider)
        trace.append({"kind": "sub_query", "step": sub_query.step_index, "text": sub_query.text})
        print(f"{sub_query.step_index}. {sub_query.text}")
    trace.append({"kind": "done", "reason": state.done_reason})
    print(f"done ({state.done_reason})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in trace:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def cmd_retrieve(config: Config, args) -> int:
    _require(config, "catalog", "queries", "index")
    catalog = _load_catalog_with_cache(config)
    index = load_index(config.index)
    if catalog.version > index.catalog_version:
        raise ConfigError(
            f"catalog version {catalog.version} is newer than the index stamp "
            f"{index.catalog_version}; run the index subcommand first"
        )
    record, _ = _find_record(config, catalog, args.query_id)
    result = _pipeline(config, catalog, index).run(record)
    for step in result.steps:
        shortlist = ", ".join(step.shortlist.tool_ids) or "(none)"
        print(f"step {step.step_index}: {step.sub_query} -> {shortlist}")
    print("final:", ", ".join(sorted(result.final_tools)) or "(none)")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for entry in result.trace:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return 0


def cmd_optimize(config: Config, args) -> int:
    _require(config, "catalog", "queries", "cache")
    catalog = load_catalog(config.catalog)  # optimization starts from base text
    dataset = load_queries(config.queries, catalog, config.split_seed)
    pipeline = _pipeline(config, catalog)
    report = run_optimization(
        dataset.split("train"),
        dataset.split("dev"),
        pipeline,
        OptimizerConfig(
            failure_threshold=config.failure_threshold,
            max_rounds=config.max_rounds,
            query_cap=config.query_cap,
        ),
        cache_path=config.cache,
    )
    if not report.accepted():
        # still leave a valid (empty) cache behind
        save_description_cache(report.cache(), config.cache)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            for p in report.proposals:
                fh.write(json.dumps({
                    "tool_id": p.tool_id,
                    "round": p.round,
                    "failure_ratio": p.failure_ratio,
                    "dev_recall_old": p.dev_recall_old,
                    "dev_recall_new": p.dev_recall_new,
                    "accepted": p.accepted,
                    "old_text": p.old_text,
                    "new_text": p.new_text,
                }, sort_keys=True) + "\n")
    print(f"rounds: {report.rounds_run}")
    print(f"proposals: {len(report.proposals)} ({len(report.accepted())} accepted)")
    return 0


def cmd_train(config: Config, args) -> int:
    _require(config, "catalog", "queries")
    if not args.head_out:
        raise ConfigError("missing required path: --head-out")
    catalog = _load_catalog_with_cache(config)
    dataset = load_queries(config.queries, catalog, config.split_seed)
    embedder = _embedder(config)
    tool_vectors = {tool_id: embedder.embed(catalog.tools[tool_id].description)
                    for tool_id in catalog.ids()}
    rng = random.Random(config.seed)
    pairs = []
    for record in sorted(dataset.split("train"), key=lambda r: r.id):
        query_vec = embedder.embed(record.text)
        for gold_id in sorted(record.gold_tool_ids):
            negatives_pool = [t for t in catalog.ids() if t not in record.gold_tool_ids]
            sampled = rng.sample(negatives_pool, min(config.n_negatives, len(negatives_pool)))
            pairs.append((query_vec, tool_vectors[gold_id],
                          [tool_vectors[t] for t in sampled]))
    if not pairs:
        raise ConfigError("no training pairs in the train split")
    batches = [
        TrainBatch.from_pairs(pairs[i:i + config.train_batch_size])
        for i in range(0, len(pairs), config.train_batch_size)
    ]
    result = train(
        ProjectionHead.identity(embedder.dimension),
        batches,
        steps=config.train_steps,
        learning_rate=config.learning_rate,
        seed=config.seed,
    )
    save_head(result.head, args.head_out)
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {config.train_steps} steps on {len(batches)} batches; "
          f"loss {first:.4f} -> {last:.4f}")
    return 0


def cmd_eval(config: Config, args) -> int:
    _require(config, "catalog", "queries")
    catalog = _load_catalog_with_cache(config)
    dataset = load_queries(config.queries, catalog, config.split_seed)
    records = dataset.split(args.split)
    if not records:
        raise ConfigError(f"split {args.split!r} is empty")
    pipeline = _pipeline(config, catalog)
    sample = args.sample if args.sample is not None else config.sample_size
    report = evaluation.evaluate_system(records, pipeline, sample_size=sample, seed=config.seed)
    if args.out:
        evaluation.save_report(report, args.out)
    print(evaluation.format_summary(report))
    return 0


# --- entry point ---------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--catalog", help="tools file")
    parser.add_argument("--queries", help="queries file")
    parser.add_argument("--cache", help="description cache file")
    parser.add_argument("--transcript", help="scripted transcript file")
    parser.add_argument("--index", help="dense index file")
    parser.add_argument("--head", help="trained projection head file")
    parser.add_argument("--llm-provider", dest="llm_provider", choices=["scripted", "remote"])
    parser.add_argument("--embed-provider", dest="embed_provider", choices=["test", "remote"])
    parser.add_argument("--embed-dim", dest="embed_dimension", type=int)
    parser.add_argument("--pool-size", dest="pool_size", type=int)
    parser.add_argument("--max-steps", dest="max_steps", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--failure-threshold", dest="failure_threshold", type=float)
    parser.add_argument("--max-rounds", dest="max_rounds", type=int)
    parser.add_argument("--seed", dest="seed", type=int)
    parser.add_argument("--split-seed", dest="split_seed", type=int)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolscout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize data files")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build and persist the dense index")
    _add_common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("plan", help="print a query's sub-query decomposition")
    _add_common(p)
    p.add_argument("--query-id", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("retrieve", help="run the full loop for one query")
    _add_common(p)
    p.add_argument("--query-id", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("optimize", help="improve failing tool descriptions")
    _add_common(p)
    p.add_argument("--report")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("train", help="fit the projection head on the train split")
    _add_common(p)
    p.add_argument("--head-out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a split and write a report")
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--sample", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    return parser


_CONFIG_FIELDS = {f.name for f in fields(Config)}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        overrides = {
            key: value
            for key, value in vars(args).items()
            if key in _CONFIG_FIELDS and value is not None
        }
        config = build_config(file_values, overrides)
        return args.func(config, args)
    except (ToolScoutError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
