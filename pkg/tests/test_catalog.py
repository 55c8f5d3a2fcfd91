import json

import pytest

from toolscout.catalog import (
    Revision,
    apply_description,
    apply_description_cache,
    assign_splits,
    load_catalog,
    load_description_cache,
    load_queries,
    save_catalog,
    save_description_cache,
    split_sizes,
    swap_description,
)
from toolscout.errors import CatalogError, DatasetError


def write_lines(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def tool_row(tool_id, description="does things", **extra):
    row = {"id": tool_id, "name": tool_id.title(), "category": "misc",
           "description": description}
    row.update(extra)
    return row


@pytest.fixture()
def catalog_path(tmp_path):
    path = tmp_path / "tools.jsonl"
    write_lines(path, [tool_row("a"), tool_row("b"), tool_row("c")])
    return path


class TestLoadCatalog:
    def test_loads_three_tools_at_version_zero(self, catalog_path):
        catalog = load_catalog(catalog_path)
        assert len(catalog) == 3 and catalog.version == 0
        assert catalog.get("a").base_description == "does things"

    def test_duplicate_id_names_the_culprit(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        write_lines(path, [tool_row("X"), tool_row("X")])
        with pytest.raises(CatalogError, match="'X'"):
            load_catalog(path)

    def test_empty_file_is_an_empty_catalog(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert len(load_catalog(path)) == 0

    def test_empty_description_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        write_lines(path, [tool_row("a", description="")])
        with pytest.raises(CatalogError, match="empty description"):
            load_catalog(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps(tool_row("a")) + "\n{not json\n")
        with pytest.raises(CatalogError, match="line 2"):
            load_catalog(path)

    def test_key_order_does_not_matter(self, tmp_path):
        path = tmp_path / "shuffled.jsonl"
        path.write_text(
            '{"description": "d", "category": "c", "id": "t1", "name": "n"}\n'
        )
        assert load_catalog(path).get("t1").description == "d"


class TestRoundTrip:
    def test_save_load_preserves_everything(self, catalog_path, tmp_path):
        catalog = load_catalog(catalog_path)
        catalog = apply_description(catalog, "a", "richer text", round=1, dev_recall=0.5)
        catalog = apply_description(catalog, "a", "richest text", round=2, dev_recall=0.75)
        out = tmp_path / "saved.jsonl"
        save_catalog(catalog, out)
        loaded = load_catalog(out)
        assert loaded == catalog

    def test_history_round_trips(self, catalog_path, tmp_path):
        catalog = apply_description(load_catalog(catalog_path), "b", "new", 3, 0.25)
        out = tmp_path / "saved.jsonl"
        save_catalog(catalog, out)
        assert load_catalog(out).get("b").history == (Revision(3, "new", 0.25),)


class TestApplyDescription:
    def test_appends_history_and_bumps_version(self, catalog_path):
        catalog = load_catalog(catalog_path)
        updated = apply_description(catalog, "a", "better", round=1, dev_recall=0.4)
        assert updated.version == catalog.version + 1
        assert updated.get("a").description == "better"
        assert len(updated.get("a").history) == 1
        # original snapshot untouched
        assert catalog.get("a").description == "does things"

    def test_identical_text_twice_appends_twice(self, catalog_path):
        catalog = load_catalog(catalog_path)
        catalog = apply_description(catalog, "a", "same", 1, 0.1)
        catalog = apply_description(catalog, "a", "same", 2, 0.1)
        assert len(catalog.get("a").history) == 2 and catalog.version == 2

    def test_unknown_tool(self, catalog_path):
        with pytest.raises(CatalogError, match="ghost"):
            apply_description(load_catalog(catalog_path), "ghost", "text", 1, 0.0)

    def test_empty_text(self, catalog_path):
        with pytest.raises(CatalogError):
            apply_description(load_catalog(catalog_path), "a", "", 1, 0.0)

    def test_other_tools_untouched(self, catalog_path):
        catalog = load_catalog(catalog_path)
        updated = apply_description(catalog, "a", "better", 1, 0.4)
        for other in ("b", "c"):
            assert updated.get(other) == catalog.get(other)

    def test_swap_keeps_version_and_history(self, catalog_path):
        catalog = load_catalog(catalog_path)
        trial = swap_description(catalog, "a", "trial text")
        assert trial.version == catalog.version
        assert trial.get("a").description == "trial text"
        assert trial.get("a").history == ()


def query_row(query_id, gold, text=None, graded=None):
    row = {"id": query_id, "query": text or f"query {query_id}",
           "relevant_tool_ids": gold}
    if graded is not None:
        row["graded"] = graded
    return row


class TestLoadQueries:
    def make_files(self, tmp_path, n=100):
        catalog_file = tmp_path / "tools.jsonl"
        write_lines(catalog_file, [tool_row(f"t{i}") for i in range(5)])
        queries_file = tmp_path / "queries.jsonl"
        write_lines(
            queries_file,
            [query_row(f"q{i:03d}", [f"t{i % 5}"]) for i in range(n)],
        )
        return load_catalog(catalog_file), queries_file

    def test_split_sizes_70_15_15(self, tmp_path):
        catalog, queries_file = self.make_files(tmp_path, n=100)
        dataset = load_queries(queries_file, catalog, split_seed=7)
        assert len(dataset.split("train")) == 70
        assert len(dataset.split("dev")) == 15
        assert len(dataset.split("test")) == 15

    def test_same_seed_same_assignment(self, tmp_path):
        catalog, queries_file = self.make_files(tmp_path, n=40)
        first = load_queries(queries_file, catalog, split_seed=3)
        second = load_queries(queries_file, catalog, split_seed=3)
        assert [r.split for r in first.records] == [r.split for r in second.records]

    def test_different_seed_differs(self, tmp_path):
        catalog, queries_file = self.make_files(tmp_path, n=40)
        first = load_queries(queries_file, catalog, split_seed=3)
        second = load_queries(queries_file, catalog, split_seed=4)
        assert [r.split for r in first.records] != [r.split for r in second.records]

    def test_assignment_independent_of_file_order(self):
        ids = [f"q{i}" for i in range(20)]
        shuffled = list(reversed(ids))
        assert assign_splits(ids, 5) == assign_splits(shuffled, 5)

    def test_duplicate_query_id_rejected(self, tmp_path):
        catalog, _ = self.make_files(tmp_path, n=1)
        bad = tmp_path / "dup_queries.jsonl"
        write_lines(bad, [query_row("q1", ["t0"]), query_row("q1", ["t1"])])
        with pytest.raises(DatasetError, match="duplicate"):
            load_queries(bad, catalog, split_seed=0)

    def test_unknown_gold_tool_rejected(self, tmp_path):
        catalog, _ = self.make_files(tmp_path, n=1)
        bad = tmp_path / "bad_queries.jsonl"
        write_lines(bad, [query_row("q1", ["ghost"])])
        with pytest.raises(DatasetError, match="ghost"):
            load_queries(bad, catalog, split_seed=0)

    def test_bad_grade_rejected(self, tmp_path):
        catalog, _ = self.make_files(tmp_path, n=1)
        bad = tmp_path / "bad_grades.jsonl"
        write_lines(bad, [query_row("q1", ["t0"], graded={"t0": 3})])
        with pytest.raises(DatasetError, match="grade"):
            load_queries(bad, catalog, split_seed=0)

    def test_splits_disjoint_and_exhaustive(self, tmp_path):
        catalog, queries_file = self.make_files(tmp_path, n=33)
        dataset = load_queries(queries_file, catalog, split_seed=11)
        names = [r.split for r in dataset.records]
        assert all(name in ("train", "dev", "test") for name in names)
        sizes = split_sizes(33)
        assert (names.count("train"), names.count("dev"), names.count("test")) == sizes


class TestDescriptionCache:
    def test_round_trip_and_apply(self, catalog_path, tmp_path):
        cache = {"a": {"description": "cached text", "round": 2, "dev_recall": 0.8}}
        path = tmp_path / "cache.json"
        save_description_cache(cache, path)
        catalog = apply_description_cache(load_catalog(catalog_path), load_description_cache(path))
        assert catalog.get("a").description == "cached text"
        assert catalog.version == 1
        assert catalog.get("a").history[-1] == Revision(2, "cached text", 0.8)

    def test_unknown_tool_in_cache(self, catalog_path, tmp_path):
        path = tmp_path / "cache.json"
        save_description_cache({"ghost": {"description": "x", "round": 1, "dev_recall": 0}}, path)
        with pytest.raises(CatalogError, match="ghost"):
            apply_description_cache(load_catalog(catalog_path), load_description_cache(path))
