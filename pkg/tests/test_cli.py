import json

from toolscout.cli import main


def base_args(fixture_dir, catalog="catalog.jsonl"):
    return [
        "--config", str(fixture_dir / "config.cfg"),
        "--catalog", str(fixture_dir / catalog),
        "--queries", str(fixture_dir / "queries.jsonl"),
        "--transcript", str(fixture_dir / "transcript.jsonl"),
    ]


class TestIngest:
    def test_normalizes_and_reports(self, fixture_dir, tmp_path, capsys):
        code = main(["ingest", *base_args(fixture_dir), "--out-dir", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "60 tools" in out and "30" in out
        assert (tmp_path / "catalog.norm.jsonl").exists()
        assert (tmp_path / "queries.norm.jsonl").exists()

    def test_invalid_file_is_a_one_line_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "a", "name": "a", "category": "c", "description": ""}\n')
        code = main([
            "ingest", "--catalog", str(bad), "--queries", str(bad),
            "--out-dir", str(tmp_path / "out"),
        ])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and len(err.strip().splitlines()) == 1

    def test_missing_path_reported(self, tmp_path, capsys):
        code = main(["ingest", "--out-dir", str(tmp_path)])
        assert code == 1
        assert "catalog" in capsys.readouterr().err


class TestIndex:
    def test_builds_and_stamps(self, fixture_dir, tmp_path, capsys):
        index_path = tmp_path / "index.jsonl"
        code = main(["index", *base_args(fixture_dir), "--index", str(index_path)])
        assert code == 0
        header = json.loads(index_path.read_text().splitlines()[0])
        assert header["count"] == 60 and header["catalog_version"] == 0
        assert header["provider_id"] == "hash-256"

    def test_applies_cache_before_indexing(self, fixture_dir, tmp_path):
        cache_path = tmp_path / "cache.json"
        cache_path.write_text(json.dumps({
            "music-playlist": {"description": "new words", "round": 1, "dev_recall": 1.0}
        }))
        index_path = tmp_path / "index.jsonl"
        code = main([
            "index", *base_args(fixture_dir),
            "--cache", str(cache_path), "--index", str(index_path),
        ])
        assert code == 0
        header = json.loads(index_path.read_text().splitlines()[0])
        assert header["catalog_version"] == 1


class TestPlan:
    def test_prints_decomposition(self, fixture_dir, fixture_dataset, capsys, tmp_path):
        out_path = tmp_path / "plan.jsonl"
        code = main([
            "plan", *base_args(fixture_dir), "--query-id", "q01", "--out", str(out_path),
        ])
        assert code == 0
        printed = capsys.readouterr().out
        record = next(r for r in fixture_dataset.records if r.id == "q01")
        # one line per gold tool plus the done line
        assert printed.count("\n") == len(record.gold_tool_ids) + 1
        assert "done (satisfied)" in printed
        rows = [json.loads(line) for line in out_path.read_text().splitlines()]
        assert rows[-1] == {"kind": "done", "reason": "satisfied"}

    def test_unknown_query_id(self, fixture_dir, capsys):
        code = main(["plan", *base_args(fixture_dir), "--query-id", "nope"])
        assert code == 1
        assert "nope" in capsys.readouterr().err


class TestRetrieve:
    def test_final_set_matches_fixture_union(self, fixture_dir, manifest, tmp_path, capsys):
        index_path = tmp_path / "index.jsonl"
        assert main(["index", *base_args(fixture_dir), "--index", str(index_path)]) == 0
        code = main([
            "retrieve", *base_args(fixture_dir),
            "--index", str(index_path), "--query-id", "q07",
        ])
        assert code == 0
        printed = capsys.readouterr().out
        final_line = [l for l in printed.splitlines() if l.startswith("final:")][0]
        got = sorted(t.strip() for t in final_line.split(":", 1)[1].split(","))
        assert got == manifest["expected_unions"]["q07"]

    def test_refuses_stale_index(self, fixture_dir, tmp_path, capsys):
        index_path = tmp_path / "index.jsonl"
        assert main(["index", *base_args(fixture_dir), "--index", str(index_path)]) == 0
        cache_path = tmp_path / "cache.json"
        cache_path.write_text(json.dumps({
            "music-playlist": {"description": "new words", "round": 1, "dev_recall": 1.0}
        }))
        code = main([
            "retrieve", *base_args(fixture_dir),
            "--index", str(index_path), "--cache", str(cache_path),
            "--query-id", "q01",
        ])
        assert code == 1
        assert "index subcommand" in capsys.readouterr().err


class TestOptimize:
    def test_writes_cache_and_report(self, fixture_dir, manifest, tmp_path, capsys):
        cache_path = tmp_path / "cache.json"
        report_path = tmp_path / "report.jsonl"
        code = main([
            "optimize", *base_args(fixture_dir, catalog="eg_catalog.jsonl"),
            "--cache", str(cache_path), "--report", str(report_path),
        ])
        assert code == 0
        assert "rounds: 5" in capsys.readouterr().out
        cache = json.loads(cache_path.read_text())
        assert set(cache) <= set(manifest["eg_targets"])
        assert manifest["stubborn_tool"] not in cache
        rows = [json.loads(line) for line in report_path.read_text().splitlines()]
        assert all(row["failure_ratio"] > 0.5 for row in rows)


class TestTrain:
    def test_writes_head(self, fixture_dir, tmp_path, capsys):
        head_path = tmp_path / "head.txt"
        code = main([
            "train", *base_args(fixture_dir), "--head-out", str(head_path),
            "--seed", "0",
        ])
        assert code == 0
        assert head_path.read_text().splitlines()[0] == "256"
        assert "loss" in capsys.readouterr().out


class TestHeadIntegration:
    def test_projection_head_threads_through_index_and_retrieve(
        self, fixture_dir, manifest, tmp_path
    ):
        # steps=0 trains an identity head: rankings keep matching the
        # transcript while the fine-tuned code path is exercised end to end
        config = tmp_path / "train.cfg"
        config.write_text(
            (fixture_dir / "config.cfg").read_text() + "train_steps = 0\n"
        )
        head_path = tmp_path / "head.txt"
        args = base_args(fixture_dir)
        args[1] = str(config)  # swap in the train config
        assert main(["train", *args, "--head-out", str(head_path)]) == 0

        index_path = tmp_path / "index.jsonl"
        assert main([
            "index", *base_args(fixture_dir),
            "--head", str(head_path), "--index", str(index_path),
        ]) == 0
        header = json.loads(index_path.read_text().splitlines()[0])
        assert header["provider_id"] == "hash-256+head"

        code = main([
            "retrieve", *base_args(fixture_dir),
            "--head", str(head_path), "--index", str(index_path),
            "--query-id", "q07",
        ])
        assert code == 0


class TestEval:
    def test_report_over_test_split(self, fixture_dir, tmp_path, capsys):
        out_path = tmp_path / "report.jsonl"
        code = main([
            "eval", *base_args(fixture_dir), "--split", "test",
            "--sample", "500", "--out", str(out_path),
        ])
        assert code == 0
        rows = [json.loads(line) for line in out_path.read_text().splitlines()]
        summary = rows[-1]
        # 30 queries split 70/15/15 -> 5 test queries; sample capped there
        assert summary["query_count"] == 5
        assert summary["macro_recall"] == 1.0
        printed = capsys.readouterr().out
        assert "recall" in printed and "100.00" in printed


class TestConfigPrecedence:
    def test_flag_overrides_file(self, fixture_dir, tmp_path, capsys):
        # config says pool_size 5; flag forces an absurd value that still works
        index_path = tmp_path / "index.jsonl"
        assert main(["index", *base_args(fixture_dir), "--index", str(index_path)]) == 0
        code = main([
            "retrieve", *base_args(fixture_dir), "--index", str(index_path),
            "--query-id", "q01", "--pool-size", "5",
        ])
        assert code == 0

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("no_such_knob = 3\n")
        code = main(["ingest", "--config", str(config), "--out-dir", str(tmp_path)])
        assert code == 1
        assert "no_such_knob" in capsys.readouterr().err

    def test_invalid_bounds_rejected(self, fixture_dir, tmp_path, capsys):
        code = main([
            "ingest", *base_args(fixture_dir), "--out-dir", str(tmp_path),
            "--failure-threshold", "1.5",
        ])
        assert code == 1
        assert "failure_threshold" in capsys.readouterr().err
