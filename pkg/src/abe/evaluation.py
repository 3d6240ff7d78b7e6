"""Retrieval scoring, ensemble distances, and cosine-similarity pair analyses.

Everything here is forward-only numpy over immutable embedding sets. The
ensemble distance between two samples is the mean over learners of the
per-learner Euclidean distances. Recall@K counts queries whose K nearest
neighbours (query excluded, ties broken by ascending sample index) contain at
least one same-label sample.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .model import EnsembleModel
from .tensor import Tensor


@dataclass
class EmbeddingSet:
    per_learner: np.ndarray  # [N, M, D] float64
    labels: np.ndarray  # [N]

    def __post_init__(self):
        self.per_learner = np.asarray(self.per_learner, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.per_learner.ndim != 3:
            raise ValueError(f"per_learner must be [N,M,D], got rank {self.per_learner.ndim}")
        if self.labels.shape != (self.per_learner.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.per_learner.shape[0]} embeddings"
            )

    @property
    def n(self) -> int:
        return self.per_learner.shape[0]

    @property
    def learners(self) -> int:
        return self.per_learner.shape[1]

    def learner_slice(self, m: int) -> "EmbeddingSet":
        return EmbeddingSet(per_learner=self.per_learner[:, m : m + 1, :], labels=self.labels)

    def concatenated(self) -> np.ndarray:
        """[N, M*D] ensemble embeddings (learner order preserved)."""
        n = self.n
        return self.per_learner.reshape(n, -1)


@dataclass
class MetricsRecord:
    """One evaluation snapshot of a training run."""

    iteration: int
    recall: dict[str, dict[int, float]]  # scope ("ensemble", "learner_i") -> K -> value
    loss_total: float
    loss_metric: list[float]
    loss_divergence: float
    cos_self: tuple[float, float] | None  # mean, std; None when M == 1
    cos_pos: tuple[float, float]
    cos_neg: tuple[float, float]

    def to_json_dict(self) -> dict:
        return {
            "iter": self.iteration,
            "recall": {scope: {str(k): v for k, v in ks.items()} for scope, ks in self.recall.items()},
            "loss_total": self.loss_total,
            "loss_metric": self.loss_metric,
            "loss_div": self.loss_divergence,
            "cos_self_mean": None if self.cos_self is None else self.cos_self[0],
            "cos_pos_mean": self.cos_pos[0],
            "cos_neg_mean": self.cos_neg[0],
        }


def _row_block_distances(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    diff = x[lo:hi, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def ensemble_distance_matrix(embeddings: EmbeddingSet, workers: int = 1) -> np.ndarray:
    """[N,N] mean-over-learners Euclidean distances; symmetric, zero diagonal."""
    n, m = embeddings.n, embeddings.learners
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    out = np.zeros((n, n))
    for lm in range(m):
        x = embeddings.per_learner[:, lm, :]
        if workers > 1:
            block = max(1, -(-n // workers))
            bounds = [(lo, min(lo + block, n)) for lo in range(0, n, block)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda b: _row_block_distances(x, *b), bounds))
            out += np.concatenate(parts, axis=0)
        else:
            out += _row_block_distances(x, 0, n)
    out /= m
    np.fill_diagonal(out, 0.0)
    return out


def recall_at_k(
    embeddings: EmbeddingSet, ks: Sequence[int], workers: int = 1
) -> dict[int, float]:
    """Mean hit rate at each K; the query itself is never a candidate."""
    n = embeddings.n
    for k in ks:
        if not 1 <= k <= n - 1:
            raise ValueError(f"K={k} out of range [1,{n - 1}]")
    labels = embeddings.labels
    counts = np.bincount(labels - labels.min())
    if (counts[counts > 0] < 2).any():
        warnings.warn("some classes have fewer than 2 samples; their queries can never hit")
    dist = ensemble_distance_matrix(embeddings, workers=workers)
    kmax = max(ks)
    hits = {k: 0 for k in ks}
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        order = order[order != i][:kmax]
        same = labels[order] == labels[i]
        for k in ks:
            if same[:k].any():
                hits[k] += 1
    return {k: hits[k] / n for k in ks}


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def cosine_pair_values(embeddings: EmbeddingSet, kind: str) -> np.ndarray:
    """Cosines of all pairs of the requested kind.

    ``self`` compares the M embeddings of one sample across learners;
    ``positive``/``negative`` compare unit-rescaled concatenated embeddings of
    distinct samples with equal/unequal labels.
    """
    if kind == "self":
        if embeddings.learners < 2:
            raise ValueError("self pairs need at least 2 learners")
        x = _unit_rows(embeddings.per_learner)  # [N,M,D]
        sims = np.einsum("npd,nqd->npq", x, x)
        p, q = np.triu_indices(embeddings.learners, k=1)
        values = sims[:, p, q].reshape(-1)
    elif kind in ("positive", "negative"):
        x = _unit_rows(embeddings.concatenated())
        sims = x @ x.T
        i, j = np.triu_indices(embeddings.n, k=1)
        same = embeddings.labels[i] == embeddings.labels[j]
        values = sims[i, j][same if kind == "positive" else ~same]
    else:
        raise ValueError(f"unknown pair kind {kind!r}")
    return np.clip(values, -1.0, 1.0)


@dataclass
class CosineStats:
    kind: str
    bin_edges: np.ndarray  # [bins+1] over [-1, 1]
    density: np.ndarray  # [bins], sums to 1
    mean: float
    std: float
    count: int


def cosine_pair_stats(embeddings: EmbeddingSet, kind: str, bins: int = 40) -> CosineStats:
    """Histogram over [-1,1] plus mean/std for one pair population."""
    values = cosine_pair_values(embeddings, kind)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    total = max(1, values.size)
    return CosineStats(
        kind=kind,
        bin_edges=edges,
        density=counts / total,
        mean=float(values.mean()) if values.size else float("nan"),
        std=float(values.std()) if values.size else float("nan"),
        count=int(values.size),
    )


def best_checkpoint_selection(records: Sequence[MetricsRecord]) -> MetricsRecord:
    """The record with the highest ensemble Recall@1; earliest iteration wins ties."""
    if not records:
        raise ValueError("no metrics records to select from")
    best = records[0]
    for rec in records[1:]:
        if rec.recall["ensemble"][1] > best.recall["ensemble"][1]:
            best = rec
    return best


def embed_dataset(
    model: EnsembleModel, images: np.ndarray, labels: np.ndarray, chunk: int = 128
) -> EmbeddingSet:
    """Forward-only per-learner embeddings of every image."""
    parts = []
    with T.no_grad():
        for lo in range(0, images.shape[0], chunk):
            embs = model.forward_all(Tensor(images[lo : lo + chunk]))
            parts.append(np.stack([e.data for e in embs], axis=1))
    return EmbeddingSet(per_learner=np.concatenate(parts, axis=0), labels=labels)


def attention_summary(model: EnsembleModel, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Per-learner masks averaged over channels and samples: [M, H', W'] in [0,1]."""
    sums = None
    n = images.shape[0]
    with T.no_grad():
        for lo in range(0, n, chunk):
            masks = model.attention_masks(Tensor(images[lo : lo + chunk]))
            batch = np.stack([mk.data.mean(axis=1).sum(axis=0) for mk in masks])  # [M,H,W]
            sums = batch if sums is None else sums + batch
    assert sums is not None
    return sums / n
