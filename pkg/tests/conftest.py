import json
from pathlib import Path

import pytest

from toolscout.catalog import load_catalog, load_queries
from toolscout.fixtures import SPLIT_SEED, build_fixture_pipeline
from toolscout.llm import ScriptedProvider, load_transcript

FIXTURE_DIR = Path(__file__).parent / "data" / "fixture"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def manifest() -> dict:
    return json.loads((FIXTURE_DIR / "manifest.json").read_text())


@pytest.fixture()
def scripted_llm():
    return ScriptedProvider(load_transcript(FIXTURE_DIR / "transcript.jsonl", strict=True))


@pytest.fixture()
def fixture_catalog():
    return load_catalog(FIXTURE_DIR / "catalog.jsonl")


@pytest.fixture()
def fixture_dataset(fixture_catalog):
    return load_queries(FIXTURE_DIR / "queries.jsonl", fixture_catalog, SPLIT_SEED)


@pytest.fixture()
def fixture_pipeline(fixture_catalog, scripted_llm):
    return build_fixture_pipeline(fixture_catalog, scripted_llm)


@pytest.fixture()
def eg_catalog():
    return load_catalog(FIXTURE_DIR / "eg_catalog.jsonl")


@pytest.fixture()
def eg_pipeline(eg_catalog, scripted_llm):
    return build_fixture_pipeline(eg_catalog, scripted_llm)
