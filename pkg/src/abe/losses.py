"""Contrastive metric loss, divergence loss, and their weighted combination.

The contrastive loss pulls same-label pairs together and pushes different-label
pairs past a squared-distance margin. The divergence loss is a hinge on the
squared distance between two learners' embeddings of the same input ("self
pairs"), summed over samples and unordered learner pairs, with no
normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    contrastive_margin: float = 1.0
    divergence_margin: float = 1.0
    divergence_weight: float = 1.0

    def __post_init__(self):
        if not self.contrastive_margin > 0:
            raise ConfigError(f"contrastive_margin must be positive, got {self.contrastive_margin}")
        if not self.divergence_margin > 0:
            raise ConfigError(f"divergence_margin must be positive, got {self.divergence_margin}")
        if self.divergence_weight < 0:
            raise ConfigError(f"divergence_weight must be nonnegative, got {self.divergence_weight}")


@dataclass
class LossBreakdown:
    """Per-term values of one total-loss evaluation, for logging."""

    total: float
    metric: list[float]
    divergence: float


def _pair_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared Euclidean distances between two [P,D] tensors."""
    return T.tsum(T.square(T.sub(a, b)), axis=1)


def contrastive_loss(anchors: Tensor, partners: Tensor, same_label, config: LossConfig) -> Tensor:
    """Mean over designated pairs of y*D^2 + (1-y)*max(0, m - D^2).

    ``anchors`` and ``partners`` are [P,D] embeddings of one learner;
    ``same_label`` flags y=1 pairs. Differentiable w.r.t. both embeddings.
    """
    y = np.asarray(same_label, dtype=np.float64)
    p = y.shape[0] if y.ndim else 0
    if p == 0:
        raise ValueError("contrastive_loss: need at least one designated pair")
    if anchors.shape[0] != p or partners.shape[0] != p:
        raise ValueError(
            f"contrastive_loss: {p} flags but {anchors.shape[0]}/{partners.shape[0]} embeddings"
        )
    d2 = _pair_sq_dists(anchors, partners)
    attract = T.elementwise_mul(d2, Tensor(y))
    repel = T.elementwise_mul(T.relu(T.rsub_scalar(config.contrastive_margin, d2)), Tensor(1.0 - y))
    return T.mul_scalar(T.tsum(T.add(attract, repel)), 1.0 / p)


def divergence_loss(per_learner: Sequence[Tensor], config: LossConfig) -> Tensor:
    """Sum over samples and unordered learner pairs of max(0, m - d_self^2).

    ``per_learner`` holds one [B,D] embedding tensor per learner. With a single
    learner there are no self pairs and the loss is exactly zero.
    """
    m = len(per_learner)
    if m < 2:
        return Tensor(0.0)
    total: Tensor | None = None
    for p in range(m):
        for q in range(p + 1, m):
            d2 = _pair_sq_dists(per_learner[p], per_learner[q])
            term = T.tsum(T.relu(T.rsub_scalar(config.divergence_margin, d2)))
            total = term if total is None else T.add(total, term)
    assert total is not None
    return total


def total_loss(
    per_learner: Sequence[Tensor],
    pairs: Sequence[tuple[int, int, bool]],
    config: LossConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Sum of per-learner contrastive losses plus weighted divergence loss.

    ``per_learner`` holds each learner's embeddings for the whole batch;
    ``pairs`` designates (anchor index, partner index, same-label) triples
    into those rows. Returns the scalar loss and its per-term breakdown.
    """
    if not pairs:
        raise ValueError("total_loss: need at least one designated pair")
    anchor_idx = np.asarray([p[0] for p in pairs], dtype=np.intp)
    partner_idx = np.asarray([p[1] for p in pairs], dtype=np.intp)
    flags = np.asarray([p[2] for p in pairs], dtype=bool)

    total: Tensor | None = None
    metric_values: list[float] = []
    for emb in per_learner:
        lm = contrastive_loss(
            T.gather_rows(emb, anchor_idx), T.gather_rows(emb, partner_idx), flags, config
        )
        metric_values.append(lm.item())
        total = lm if total is None else T.add(total, lm)
    assert total is not None

    if config.divergence_weight > 0 and len(per_learner) > 1:
        div = divergence_loss(per_learner, config)
        total = T.add(total, T.mul_scalar(div, config.divergence_weight))
        div_value = div.item()
    else:
        # still logged, but kept off the tape when it cannot contribute gradient
        with T.no_grad():
            div_value = divergence_loss(per_learner, config).item()

    return total, LossBreakdown(total=total.item(), metric=metric_values, divergence=div_value)
