"""Tool catalog and query dataset: loading, validation, persistence, and
versioned description mutation.

Catalog values are immutable snapshots. Editing a description produces a
new catalog with the version bumped; consumers holding indexes must
rebuild when the version changes.

File formats (UTF-8, one JSON object per line):

* tools file — required keys ``id``, ``name``, ``category``,
  ``description``; optional ``base_description`` and ``history`` (list of
  ``[round, text, dev_recall]``). A first line of ``{"catalog_version": N}``
  is accepted as a header; plain ingestion files have no header and load
  as version 0.
* queries file — keys ``id``, ``query``, ``relevant_tool_ids`` (non-empty
  array), optional ``graded`` (map of tool id to 0|1|2).
* description cache — a single JSON object mapping tool id to
  ``{"description", "round", "dev_recall"}``.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import CatalogError, DatasetError

SPLIT_RATIOS = (0.70, 0.15, 0.15)
SPLIT_NAMES = ("train", "dev", "test")


@dataclass(frozen=True)
class Revision:
    """One accepted description replacement."""

    round: int
    text: str
    dev_recall: float


@dataclass(frozen=True)
class Tool:
    id: str
    name: str
    category: str
    description: str
    base_description: str
    history: tuple[Revision, ...] = ()


@dataclass(frozen=True)
class ToolCatalog:
    """Id-keyed tool collection with a version that bumps on any edit."""

    tools: dict[str, Tool]
    version: int = 0

    def __len__(self) -> int:
        return len(self.tools)

    def __contains__(self, tool_id: str) -> bool:
        return tool_id in self.tools

    def get(self, tool_id: str) -> Tool:
        try:
            return self.tools[tool_id]
        except KeyError:
            raise CatalogError(f"unknown tool id {tool_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self.tools)


@dataclass(frozen=True)
class QueryRecord:
    id: str
    text: str
    gold_tool_ids: frozenset[str]
    graded_relevance: dict[str, int] | None = None
    split: str = ""


@dataclass(frozen=True)
class QueryDataset:
    records: tuple[QueryRecord, ...]
    split_seed: int
    split_ratios: tuple[float, float, float] = SPLIT_RATIOS

    def split(self, name: str) -> list[QueryRecord]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]


def _read_json_lines(path: str | Path, error_cls) -> list[tuple[int, dict]]:
    rows: list[tuple[int, dict]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise error_cls(f"{path}: malformed line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise error_cls(f"{path}: malformed line {lineno}: expected an object")
            rows.append((lineno, obj))
    return rows


def _string_field(obj: dict, key: str, lineno: int, path) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise CatalogError(f"{path}: line {lineno}: missing or non-string field {key!r}")
    return value


def load_catalog(path: str | Path) -> ToolCatalog:
    """Load and validate a tools file; an empty file is an empty catalog."""
    rows = _read_json_lines(path, CatalogError)
    version = 0
    if rows and "catalog_version" in rows[0][1] and "id" not in rows[0][1]:
        version = int(rows[0][1]["catalog_version"])
        rows = rows[1:]
    tools: dict[str, Tool] = {}
    for lineno, obj in rows:
        tool_id = _string_field(obj, "id", lineno, path)
        if tool_id in tools:
            raise CatalogError(f"{path}: line {lineno}: duplicate tool id {tool_id!r}")
        description = _string_field(obj, "description", lineno, path)
        if not description:
            raise CatalogError(f"{path}: line {lineno}: empty description for {tool_id!r}")
        history = []
        for entry in obj.get("history", []):
            try:
                rnd, text, recall = entry
            except (TypeError, ValueError):
                raise CatalogError(
                    f"{path}: line {lineno}: bad history entry for {tool_id!r}"
                ) from None
            history.append(Revision(round=int(rnd), text=str(text), dev_recall=float(recall)))
        tools[tool_id] = Tool(
            id=tool_id,
            name=_string_field(obj, "name", lineno, path),
            category=_string_field(obj, "category", lineno, path),
            description=description,
            base_description=str(obj.get("base_description", description)),
            history=tuple(history),
        )
    return ToolCatalog(tools=tools, version=version)


def save_catalog(catalog: ToolCatalog, path: str | Path) -> None:
    """Write the catalog, including lineage, so load round-trips exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"catalog_version": catalog.version}) + "\n")
        for tool_id in catalog.ids():
            tool = catalog.tools[tool_id]
            record = {
                "id": tool.id,
                "name": tool.name,
                "category": tool.category,
                "description": tool.description,
                "base_description": tool.base_description,
                "history": [[r.round, r.text, r.dev_recall] for r in tool.history],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def split_sizes(n: int) -> tuple[int, int, int]:
    """70/15/15 sizes via integer arithmetic; test takes the remainder."""
    n_train = n * 70 // 100
    n_dev = n * 15 // 100
    return n_train, n_dev, n - n_train - n_dev


def assign_splits(record_ids: list[str], split_seed: int) -> dict[str, str]:
    """Pure function of (record ids, seed): seeded shuffle, then partition."""
    order = sorted(record_ids)
    random.Random(split_seed).shuffle(order)
    n_train, n_dev, _ = split_sizes(len(order))
    assignment = {}
    for pos, record_id in enumerate(order):
        if pos < n_train:
            assignment[record_id] = "train"
        elif pos < n_train + n_dev:
            assignment[record_id] = "dev"
        else:
            assignment[record_id] = "test"
    return assignment


def load_queries(path: str | Path, catalog: ToolCatalog, split_seed: int) -> QueryDataset:
    """Load queries, validate tool references, and assign 70/15/15 splits."""
    rows = _read_json_lines(path, DatasetError)
    records: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in rows:
        query_id = obj.get("id")
        if not isinstance(query_id, str) or not query_id:
            raise DatasetError(f"{path}: line {lineno}: missing query id")
        if query_id in seen:
            raise DatasetError(f"{path}: line {lineno}: duplicate query id {query_id!r}")
        seen.add(query_id)
        text = obj.get("query")
        if not isinstance(text, str) or not text:
            raise DatasetError(f"{path}: line {lineno}: query {query_id!r} has no text")
        gold = obj.get("relevant_tool_ids")
        if not isinstance(gold, list) or not gold:
            raise DatasetError(
                f"{path}: line {lineno}: query {query_id!r} has no relevant_tool_ids"
            )
        for tool_id in gold:
            if tool_id not in catalog:
                raise DatasetError(
                    f"query {query_id!r} references unknown tool {tool_id!r}"
                )
        graded = obj.get("graded")
        if graded is not None:
            for tool_id, grade in graded.items():
                if tool_id not in catalog:
                    raise DatasetError(
                        f"query {query_id!r} grades unknown tool {tool_id!r}"
                    )
                if grade not in (0, 1, 2):
                    raise DatasetError(
                        f"query {query_id!r}: grade {grade!r} for {tool_id!r} not in 0..2"
                    )
            graded = {k: int(v) for k, v in graded.items()}
        records.append(
            QueryRecord(
                id=query_id,
                text=text,
                gold_tool_ids=frozenset(gold),
                graded_relevance=graded,
            )
        )
    assignment = assign_splits([r.id for r in records], split_seed)
    records = [replace(r, split=assignment[r.id]) for r in records]
    return QueryDataset(records=tuple(records), split_seed=split_seed)


def save_queries(dataset: QueryDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in dataset.records:
            row = {
                "id": record.id,
                "query": record.text,
                "relevant_tool_ids": sorted(record.gold_tool_ids),
            }
            if record.graded_relevance is not None:
                row["graded"] = {k: record.graded_relevance[k] for k in sorted(record.graded_relevance)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def apply_description(
    catalog: ToolCatalog,
    tool_id: str,
    new_text: str,
    round: int,
    dev_recall: float,
) -> ToolCatalog:
    """Replace one tool's description, append to its lineage, bump version."""
    tool = catalog.get(tool_id)
    if not new_text:
        raise CatalogError(f"empty replacement description for {tool_id!r}")
    updated = replace(
        tool,
        description=new_text,
        history=tool.history + (Revision(round=round, text=new_text, dev_recall=dev_recall),),
    )
    tools = dict(catalog.tools)
    tools[tool_id] = updated
    return ToolCatalog(tools=tools, version=catalog.version + 1)


def swap_description(catalog: ToolCatalog, tool_id: str, text: str) -> ToolCatalog:
    """Trial swap for gating: same version, no lineage entry.

    The result is an ephemeral candidate catalog; persist an accepted text
    with :func:`apply_description` instead.
    """
    tool = catalog.get(tool_id)
    if not text:
        raise CatalogError(f"empty trial description for {tool_id!r}")
    tools = dict(catalog.tools)
    tools[tool_id] = replace(tool, description=text)
    return ToolCatalog(tools=tools, version=catalog.version)


def load_description_cache(path: str | Path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        cache = json.load(fh)
    if not isinstance(cache, dict):
        raise CatalogError(f"{path}: description cache must be a JSON object")
    return cache


def save_description_cache(cache: dict[str, dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cache, fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_description_cache(catalog: ToolCatalog, cache: dict[str, dict]) -> ToolCatalog:
    """Install cached descriptions (inference startup), in sorted id order."""
    for tool_id in sorted(cache):
        entry = cache[tool_id]
        catalog = apply_description(
            catalog,
            tool_id,
            entry["description"],
            round=int(entry["round"]),
            dev_recall=float(entry["dev_recall"]),
        )
    return catalog
