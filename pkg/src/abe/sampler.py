"""Minibatch construction: designated positive/negative pairs over a labeled dataset.

A batch of size B holds B/2 anchors drawn without replacement plus one sampled
partner per anchor: same-label partners for the first B/4 anchors, different-
label partners for the rest. Pair i links batch positions (i, B/2+i).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .errors import DataError
from .tensor import Tensor

_MAX_ANCHOR_RETRIES = 100


class Pair(NamedTuple):
    anchor: int
    partner: int
    same_label: bool


@dataclass
class PairBatch:
    images: Tensor  # [B,C,H,W]
    labels: np.ndarray  # [B]
    pairs: list[Pair]


class LabeledDatasetView:
    """Per-class index lists over a dataset plus the sampling RNG."""

    def __init__(self, dataset: Dataset, rng: np.random.Generator):
        self.dataset = dataset
        self.rng = rng
        self.class_indices: dict[int, np.ndarray] = {
            int(c): np.flatnonzero(dataset.labels == c) for c in dataset.class_ids()
        }

    @property
    def n(self) -> int:
        return self.dataset.n


def build_batch(view: LabeledDatasetView, batch_size: int) -> PairBatch:
    """Sample one PairBatch; deterministic given the view's RNG state."""
    if batch_size % 4 != 0 or batch_size < 4:
        raise ValueError(f"batch_size must be a positive multiple of 4, got {batch_size}")
    n = view.n
    half = batch_size // 2
    quarter = batch_size // 4
    if n < half:
        raise DataError(f"dataset has {n} samples, cannot draw {half} distinct anchors")
    if len(view.class_indices) < 2:
        raise DataError("negative pairs require at least two classes")
    rng = view.rng
    labels = view.dataset.labels

    anchors = list(rng.choice(n, size=half, replace=False))
    partners: list[int] = []
    for slot in range(half):
        positive = slot < quarter
        retries = 0
        while True:
            a = anchors[slot]
            members = view.class_indices[int(labels[a])]
            if positive:
                candidates = members[members != a]
            else:
                candidates = None  # any sample of a different class
            if positive and candidates.size == 0:
                retries += 1
                if retries > _MAX_ANCHOR_RETRIES:
                    raise DataError(
                        f"no positive partner for class {int(labels[a])} after "
                        f"{_MAX_ANCHOR_RETRIES} anchor resamples"
                    )
                taken = set(anchors)
                free = np.asarray([i for i in range(n) if i not in taken], dtype=np.intp)
                if free.size == 0:
                    raise DataError("no unused samples left to resample a singleton-class anchor")
                anchors[slot] = int(rng.choice(free))
                continue
            if positive:
                partners.append(int(rng.choice(candidates)))
            else:
                others = np.flatnonzero(labels != labels[a])
                partners.append(int(rng.choice(others)))
            break

    order = np.asarray(anchors + partners, dtype=np.intp)
    pairs = [
        Pair(anchor=i, partner=half + i, same_label=bool(i < quarter)) for i in range(half)
    ]
    batch_labels = labels[order]
    for p in pairs:  # same-label flags must agree with the actual labels
        assert (batch_labels[p.anchor] == batch_labels[p.partner]) == p.same_label
    return PairBatch(
        images=Tensor(view.dataset.images[order]),
        labels=batch_labels,
        pairs=pairs,
    )


def label_indicator(labels: np.ndarray, pairs: list[Pair]) -> np.ndarray:
    """y flags per pair: 1 where the two labels agree."""
    labels = np.asarray(labels)
    a = np.asarray([p.anchor for p in pairs], dtype=np.intp)
    b = np.asarray([p.partner for p in pairs], dtype=np.intp)
    return labels[a] == labels[b]
