"""Embedding providers and an exact top-k dense index over tool descriptions.

Search is exhaustive cosine over L2-normalized vectors — catalogs here are
thousands of tools, so correctness and determinism beat ANN structures.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from .catalog import ToolCatalog
from .errors import EmbeddingError
from .text_analysis import tokenize


def normalize(vector: np.ndarray) -> np.ndarray:
    """L2-normalize; the zero vector stays zero."""
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        return vector
    return vector / norm


class EmbeddingProvider(Protocol):
    provider_id: str
    dimension: int

    def embed(self, text: str) -> np.ndarray:
        """Map text to an L2-normalized vector of ``dimension`` entries."""
        ...


class HashEmbedder:
    """Network-free deterministic embedder for tests and fixtures.

    Bag of tokens hashed into ``dimension`` signed buckets, then
    normalized. Same text always gives the same vector, across processes
    and platforms (sha256, not the salted builtin hash).
    """

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.provider_id = f"hash-{dimension}"

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=float)
        for token in tokenize(text):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "big") % self.dimension
            sign = 1.0 if digest[8] & 1 else -1.0
            vec[bucket] += sign
        return normalize(vec)


class RemoteEmbedder:
    """HTTP embedding client.

    Wire format: POST ``{"model": ..., "input": [text, ...]}`` to the
    endpoint, response ``{"vectors": [[...], ...]}``. The bearer token is
    read from the environment, never from configuration files. Calls hold
    no shared mutable state; ``max_in_flight`` bounds concurrent requests.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        dimension: int,
        token_env: str = "TOOLSCOUT_EMBED_TOKEN",
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.provider_id = f"remote:{model}"
        self._token = os.environ.get(token_env, "")
        self._timeout = timeout
        self._max_attempts = max_attempts
        self._backoff = backoff
        self._gate = threading.Semaphore(max_in_flight)
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        headers = {}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        payload = {"model": self.model, "input": [text]}
        last_error: Exception | None = None
        for attempt in range(self._max_attempts):
            if attempt:
                time.sleep(self._backoff * 2 ** (attempt - 1))
            try:
                with self._gate:
                    response = self._client.post(self.endpoint, json=payload, headers=headers)
                response.raise_for_status()
                vectors = response.json()["vectors"]
                break
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_error = exc
        else:
            raise EmbeddingError(f"embedding request failed: {last_error}")
        if len(vectors) != 1 or len(vectors[0]) != self.dimension:
            raise EmbeddingError(
                f"endpoint returned shape {len(vectors)}x{len(vectors[0]) if vectors else 0}, "
                f"expected 1x{self.dimension}"
            )
        return normalize(np.asarray(vectors[0], dtype=float))


class ProjectedEmbedder:
    """Wrap a provider with a trained linear head applied to its output.

    Both query and document vectors must go through the same head, so
    retrieval in fine-tuned mode simply swaps the provider for this
    wrapper before indexing and querying.
    """

    def __init__(self, base: EmbeddingProvider, weights: np.ndarray):
        if weights.shape != (base.dimension, base.dimension):
            raise ValueError(
                f"head shape {weights.shape} does not match provider dimension {base.dimension}"
            )
        self._base = base
        self._weights = weights
        self.dimension = base.dimension
        self.provider_id = f"{base.provider_id}+head"

    def embed(self, text: str) -> np.ndarray:
        return normalize(self._weights @ self._base.embed(text))


@dataclass(frozen=True)
class DenseIndex:
    """One normalized vector per catalog tool, stamped with the catalog
    version it was built from."""

    ids: tuple[str, ...]
    matrix: np.ndarray  # len(ids) x dimension
    catalog_version: int
    provider_id: str

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1]) if self.matrix.size else 0

    def __len__(self) -> int:
        return len(self.ids)


def build_index(catalog: ToolCatalog, provider: EmbeddingProvider) -> DenseIndex:
    """Embed every tool's current description, in sorted id order."""
    ids = catalog.ids()
    rows = []
    for tool_id in ids:
        try:
            rows.append(provider.embed(catalog.tools[tool_id].description))
        except Exception as exc:
            raise EmbeddingError(f"embedding failed for tool {tool_id!r}: {exc}") from exc
    matrix = np.vstack(rows) if rows else np.zeros((0, provider.dimension))
    return DenseIndex(
        ids=tuple(ids),
        matrix=matrix,
        catalog_version=catalog.version,
        provider_id=provider.provider_id,
    )


def reindex_tool(index: DenseIndex, tool_id: str, vector: np.ndarray, catalog_version: int) -> DenseIndex:
    """Replace a single tool's vector (used by the description gate)."""
    if tool_id not in index.ids:
        raise EmbeddingError(f"tool {tool_id!r} not present in index")
    matrix = index.matrix.copy()
    matrix[index.ids.index(tool_id)] = vector
    return DenseIndex(
        ids=index.ids,
        matrix=matrix,
        catalog_version=catalog_version,
        provider_id=index.provider_id,
    )


def dense_topk(index: DenseIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exhaustive cosine ranking, descending, ties by ascending tool id."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if len(index) == 0 or k == 0:
        return []
    if query_vec.shape != (index.dimension,):
        raise ValueError(
            f"query dimension {query_vec.shape} does not match index dimension {index.dimension}"
        )
    scores = index.matrix @ query_vec
    ranked = sorted(
        zip(index.ids, (float(s) for s in scores)),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def save_index(index: DenseIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "provider_id": index.provider_id,
            "dimension": index.dimension,
            "catalog_version": index.catalog_version,
            "count": len(index),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, tool_id in enumerate(index.ids):
            row = {"id": tool_id, "vector": [float(x) for x in index.matrix[i]]}
            fh.write(json.dumps(row) + "\n")


def load_index(path: str | Path) -> DenseIndex:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise EmbeddingError(f"{path}: empty index file")
    header = json.loads(lines[0])
    ids = []
    rows = []
    for line in lines[1:]:
        row = json.loads(line)
        ids.append(row["id"])
        rows.append(row["vector"])
    matrix = np.asarray(rows, dtype=float) if rows else np.zeros((0, header["dimension"]))
    if len(ids) != header["count"]:
        raise EmbeddingError(f"{path}: header count {header['count']} != {len(ids)} rows")
    return DenseIndex(
        ids=tuple(ids),
        matrix=matrix,
        catalog_version=int(header["catalog_version"]),
        provider_id=header["provider_id"],
    )
