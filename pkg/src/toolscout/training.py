"""Contrastive fine-tuning of a square projection head over frozen
embeddings.

The objective is softmax cross-entropy over one positive and n explicit
negatives per query: scores are s(q, d) = (W q) . (W d), and the loss is
the mean over the batch of -ln softmax(positive | all candidates).
Gradients are analytic and checked against finite differences in tests.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TrainingDivergedError


@dataclass
class ProjectionHead:
    """Trainable square map applied to both query and document vectors."""

    w: np.ndarray

    @classmethod
    def identity(cls, dimension: int) -> "ProjectionHead":
        return cls(w=np.eye(dimension))

    @property
    def dimension(self) -> int:
        return int(self.w.shape[0])

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(w=self.w.copy())


@dataclass(frozen=True)
class TrainBatch:
    """B queries, each with one positive and n >= 1 negative vectors."""

    queries: np.ndarray    # B x D
    positives: np.ndarray  # B x D
    negatives: np.ndarray  # B x n x D

    def __post_init__(self):
        b, d = self.queries.shape
        if self.positives.shape != (b, d):
            raise ValueError("positives shape mismatch")
        if self.negatives.ndim != 3 or self.negatives.shape[0] != b or self.negatives.shape[2] != d:
            raise ValueError("negatives shape mismatch")
        if b < 1 or self.negatives.shape[1] < 1:
            raise ValueError("need at least one pair and one negative")

    @classmethod
    def from_pairs(cls, pairs) -> "TrainBatch":
        queries, positives, negatives = zip(*pairs)
        return cls(
            queries=np.asarray(queries, dtype=float),
            positives=np.asarray(positives, dtype=float),
            negatives=np.asarray(negatives, dtype=float),
        )

    @property
    def size(self) -> int:
        return int(self.queries.shape[0])


def _candidate_scores(batch: TrainBatch, w: np.ndarray, share_in_batch: bool):
    """Per item: projected query and the candidate list [positive, negatives...].

    With ``share_in_batch`` the other items' positives are appended as
    extra negatives.
    """
    wq = batch.queries @ w.T
    wpos = batch.positives @ w.T
    wneg = batch.negatives @ w.T
    items = []
    for j in range(batch.size):
        cands = [batch.positives[j]] + list(batch.negatives[j])
        proj = [wpos[j]] + list(wneg[j])
        if share_in_batch:
            for k in range(batch.size):
                if k != j:
                    cands.append(batch.positives[k])
                    proj.append(wpos[k])
        logits = np.array([wq[j] @ p for p in proj])
        items.append((batch.queries[j], wq[j], cands, proj, logits))
    return items


def _check_finite(batch: TrainBatch, w: np.ndarray) -> None:
    for arr in (batch.queries, batch.positives, batch.negatives, w):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite input")


def loss(batch: TrainBatch, head: ProjectionHead, share_in_batch: bool = False) -> float:
    _check_finite(batch, head.w)
    total = 0.0
    # overflow here is legal: a non-finite result is how divergence surfaces
    with np.errstate(over="ignore", invalid="ignore"):
        for _, _, _, _, logits in _candidate_scores(batch, head.w, share_in_batch):
            shifted = logits - logits.max()
            total += float(np.log(np.exp(shifted).sum()) - shifted[0])
    return total / batch.size


def grad(batch: TrainBatch, head: ProjectionHead, share_in_batch: bool = False) -> np.ndarray:
    """Analytic dLoss/dW.

    For a candidate d with softmax weight p (and p - 1 for the positive),
    d s(q, d)/dW = (W d) q^T + (W q) d^T; the loss gradient is the
    weighted sum averaged over the batch.
    """
    _check_finite(batch, head.w)
    out = np.zeros_like(head.w)
    for q, wq, cands, proj, logits in _candidate_scores(batch, head.w, share_in_batch):
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        coef = p.copy()
        coef[0] -= 1.0
        for c, d, wd in zip(coef, cands, proj):
            out += c * (np.outer(wd, q) + np.outer(wq, d))
    return out / batch.size


@dataclass
class TrainResult:
    head: ProjectionHead
    losses: list[float]


def train(
    head: ProjectionHead,
    batches: list[TrainBatch],
    steps: int,
    learning_rate: float,
    seed: int,
    share_in_batch: bool = False,
) -> TrainResult:
    """Plain gradient descent; the seed shuffles batch visiting order per
    epoch, so runs are deterministic for a fixed seed and batch list."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps and not batches:
        raise ValueError("no batches to train on")
    rng = random.Random(seed)
    current = head.copy()
    losses: list[float] = []
    order: list[int] = []
    for step in range(steps):
        if step % len(batches) == 0:
            order = list(range(len(batches)))
            rng.shuffle(order)
        batch = batches[order[step % len(batches)]]
        value = loss(batch, current, share_in_batch)
        if not np.isfinite(value):
            raise TrainingDivergedError(step)
        losses.append(value)
        current.w = current.w - learning_rate * grad(batch, current, share_in_batch)
    return TrainResult(head=current, losses=losses)


def save_head(head: ProjectionHead, path: str | Path) -> None:
    """Text matrix with a dimension header line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{head.dimension}\n")
        for row in head.w:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_head(path: str | Path) -> ProjectionHead:
    with open(path, encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    dimension = int(lines[0])
    rows = [[float(x) for x in line.split()] for line in lines[1:]]
    w = np.asarray(rows, dtype=float)
    if w.shape != (dimension, dimension):
        raise ValueError(f"{path}: expected {dimension}x{dimension} matrix, got {w.shape}")
    return ProjectionHead(w=w)
