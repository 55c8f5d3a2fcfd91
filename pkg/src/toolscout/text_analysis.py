"""Deterministic text machinery: tokenizer, TF-IDF, k-means, and BM25.

Everything here is pure and seeded; fitted structures are immutable and
safe for unrestricted concurrent reads.
"""

from __future__ import annotations

import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SparseVector:
    """Sparse vector with strictly increasing indices.

    L2-normalized unless empty (the all-zero vector is represented by no
    entries at all).
    """

    indices: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()

    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.weights))

    def dot(self, other: "SparseVector") -> float:
        lookup = dict(zip(other.indices, other.weights))
        return sum(w * lookup.get(i, 0.0) for i, w in zip(self.indices, self.weights))

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim, dtype=float)
        for i, w in zip(self.indices, self.weights):
            out[i] = w
        return out


@dataclass(frozen=True)
class TfIdfModel:
    """Vocabulary plus smoothed inverse document frequencies.

    idf(t) = ln((1 + N) / (1 + df(t))) + 1, so every idf is >= 1 and
    transform weights are finite for any fitted corpus.
    """

    vocabulary: dict[str, int]
    idf: dict[str, float]
    fitted_corpus_size: int

    @property
    def dimension(self) -> int:
        return len(self.vocabulary)


def tfidf_fit(corpus: list[str]) -> TfIdfModel:
    """Fit vocabulary and idf weights on a non-empty corpus."""
    if not corpus:
        raise ValueError("cannot fit TF-IDF on an empty corpus")
    n = len(corpus)
    df: Counter[str] = Counter()
    for text in corpus:
        df.update(set(tokenize(text)))
    vocabulary = {token: i for i, token in enumerate(sorted(df))}
    idf = {token: math.log((1 + n) / (1 + df[token])) + 1.0 for token in vocabulary}
    return TfIdfModel(vocabulary=vocabulary, idf=idf, fitted_corpus_size=n)


def tfidf_transform(model: TfIdfModel, text: str) -> SparseVector:
    """L2-normalized tf*idf vector; all-OOV text maps to the zero vector."""
    tf = Counter(t for t in tokenize(text) if t in model.vocabulary)
    if not tf:
        return SparseVector()
    pairs = sorted((model.vocabulary[t], c * model.idf[t]) for t, c in tf.items())
    norm = math.sqrt(sum(w * w for _, w in pairs))
    return SparseVector(
        indices=tuple(i for i, _ in pairs),
        weights=tuple(w / norm for _, w in pairs),
    )


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]
    centroids: np.ndarray
    seed: int
    # objective (sum of squared distances) after each assignment pass
    inertia_history: tuple[float, ...] = ()


def kmeans(vectors, k: int, seed: int) -> ClusterAssignment:
    """Lloyd's algorithm with seeded farthest-point initialization.

    Runs until the assignment reaches a fixpoint or 100 iterations,
    whichever comes first. Ties (nearest centroid, farthest point) break
    toward the lowest index, so results are fully deterministic.
    """
    data = np.asarray(vectors, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty list of same-dimension vectors")
    n = data.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} vectors")

    rng = random.Random(seed)
    centers = [rng.randrange(n)]
    dist = np.sum((data - data[centers[0]]) ** 2, axis=1)
    while len(centers) < k:
        nxt = int(np.argmax(dist))
        centers.append(nxt)
        dist = np.minimum(dist, np.sum((data - data[nxt]) ** 2, axis=1))
    centroids = data[centers].copy()

    labels = np.full(n, -1, dtype=int)
    history: list[float] = []
    for _ in range(100):
        d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = data[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return ClusterAssignment(
        labels=tuple(int(x) for x in labels),
        centroids=centroids,
        seed=seed,
        inertia_history=tuple(history),
    )


@dataclass(frozen=True)
class Bm25Index:
    """Inverted index with Okapi scoring.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); a document's score is the
    sum over query tokens (with multiplicity) of
    idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len/avglen)).
    """

    postings: dict[str, tuple[tuple[str, int], ...]] = field(default_factory=dict)
    doc_lengths: dict[str, int] = field(default_factory=dict)
    avg_doc_length: float = 0.0
    k1: float = 1.2
    b: float = 0.75


def bm25_build(docs: dict[str, str], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for doc_id in sorted(docs):
        tokens = tokenize(docs[doc_id])
        lengths[doc_id] = len(tokens)
        for token, tf in sorted(Counter(tokens).items()):
            postings.setdefault(token, []).append((doc_id, tf))
    avg = sum(lengths.values()) / len(lengths) if lengths else 0.0
    return Bm25Index(
        postings={t: tuple(p) for t, p in postings.items()},
        doc_lengths=lengths,
        avg_doc_length=avg,
        k1=k1,
        b=b,
    )


def bm25_topk(index: Bm25Index, query: str, k: int) -> list[tuple[str, float]]:
    """Top-k documents by BM25, descending; zero-score docs are dropped and
    exact ties break by ascending document id."""
    n = len(index.doc_lengths)
    if n == 0 or k <= 0:
        return []
    scores: dict[str, float] = {}
    for token in tokenize(query):
        plist = index.postings.get(token)
        if not plist:
            continue
        df = len(plist)
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        for doc_id, tf in plist:
            dl = index.doc_lengths[doc_id]
            denom = tf + index.k1 * (1 - index.b + index.b * dl / index.avg_doc_length)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (index.k1 + 1) / denom
    ranked = sorted(
        ((d, s) for d, s in scores.items() if s > 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]
