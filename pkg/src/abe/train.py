"""The training loop behind ``abe train``: sample, forward, loss, backward, step.

Every ``eval_every`` iterations (plus iteration 0 and the final iteration) the
model is scored on the disjoint-class test split and one JSON record is
appended to ``metrics.jsonl``. The best-Recall@1 weights are kept as
``best.ckpt`` and the final weights as ``last.ckpt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, generate, load_dataset, split_disjoint_classes
from .errors import NumericalAbort
from .evaluation import (
    EmbeddingSet,
    MetricsRecord,
    cosine_pair_stats,
    embed_dataset,
    recall_at_k,
)
from .losses import LossBreakdown, LossConfig, total_loss
from .model import EnsembleModel, init_parameters
from .sampler import LabeledDatasetView, build_batch
from .tensor import OptimizerState, Tensor, backward, sgd_momentum_step


@dataclass
class TrainResult:
    best: MetricsRecord
    last: MetricsRecord
    records: list[MetricsRecord]
    out_dir: Path


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset)
    return generate(cfg.synthetic_spec())


def evaluate_model(
    cfg: ExperimentConfig,
    model: EnsembleModel,
    test: Dataset,
    iteration: int,
    loss_breakdown: LossBreakdown,
    workers: int = 1,
) -> MetricsRecord:
    """Score the model on a held-out dataset: recalls per scope plus cosine stats."""
    embeddings = embed_dataset(model, test.images, test.labels)
    ks = list(cfg.recall_ks)
    recall: dict[str, dict[int, float]] = {
        "ensemble": recall_at_k(embeddings, ks, workers=workers)
    }
    for m in range(model.learners):
        recall[f"learner_{m}"] = recall_at_k(embeddings.learner_slice(m), ks, workers=workers)
    cos_pos = cosine_pair_stats(embeddings, "positive")
    cos_neg = cosine_pair_stats(embeddings, "negative")
    cos_self = cosine_pair_stats(embeddings, "self") if model.learners >= 2 else None
    return MetricsRecord(
        iteration=iteration,
        recall=recall,
        loss_total=loss_breakdown.total,
        loss_metric=loss_breakdown.metric,
        loss_divergence=loss_breakdown.divergence,
        cos_self=None if cos_self is None else (cos_self.mean, cos_self.std),
        cos_pos=(cos_pos.mean, cos_pos.std),
        cos_neg=(cos_neg.mean, cos_neg.std),
    )


def _probe_loss(
    model: EnsembleModel, view: LabeledDatasetView, cfg: ExperimentConfig, loss_cfg: LossConfig
) -> LossBreakdown:
    """Forward-only loss on one batch, for the iteration-0 record."""
    batch = build_batch(view, cfg.batch_size)
    with T.no_grad():
        embeddings = model.forward_all(batch.images)
        _, breakdown = total_loss(embeddings, batch.pairs, loss_cfg)
    return breakdown


def run_training(cfg: ExperimentConfig, workers: int = 1, quiet: bool = True) -> TrainResult:
    """Run one experiment to completion; deterministic given the config."""
    cfg.validate()
    dataset = resolve_dataset(cfg)
    train_ds, test_ds = split_disjoint_classes(dataset, cfg.train_fraction)

    # spawned children carry distinct keys, so the three RNG streams are independent
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = init_parameters(cfg.variant, cfg.backbone(dataset.input_shape), seed=seeds[0])
    sampler_view = LabeledDatasetView(train_ds, np.random.default_rng(seeds[1]))
    probe_view = LabeledDatasetView(train_ds, np.random.default_rng(seeds[2]))

    loss_cfg = LossConfig(
        contrastive_margin=cfg.contrastive_margin,
        divergence_margin=cfg.divergence_margin,
        divergence_weight=cfg.divergence_weight,
    )
    opt = OptimizerState(learning_rate=cfg.learning_rate, momentum=cfg.momentum)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    records: list[MetricsRecord] = []
    best: MetricsRecord | None = None

    with open(metrics_path, "w") as log:

        def emit(iteration: int, breakdown: LossBreakdown) -> None:
            nonlocal best
            record = evaluate_model(cfg, model, test_ds, iteration, breakdown, workers=workers)
            records.append(record)
            log.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
            log.flush()
            if best is None or record.recall["ensemble"][1] > best.recall["ensemble"][1]:
                best = record
                save_checkpoint(
                    out_dir / "best.ckpt", checkpoint_from_model(model, cfg, opt, iteration)
                )
            if not quiet:
                r1 = record.recall["ensemble"][1]
                print(f"iter {iteration:6d}  loss {breakdown.total:.4f}  recall@1 {r1:.4f}")

        emit(0, _probe_loss(model, probe_view, cfg, loss_cfg))

        for iteration in range(1, cfg.total_iterations + 1):
            batch = build_batch(sampler_view, cfg.batch_size)
            embeddings = model.forward_all(batch.images)
            loss, breakdown = total_loss(embeddings, batch.pairs, loss_cfg)
            if not math.isfinite(breakdown.total):
                raise NumericalAbort(
                    f"non-finite loss at iteration {iteration}: total={breakdown.total}, "
                    f"metric={breakdown.metric}, divergence={breakdown.divergence}"
                )
            backward(loss)
            sgd_momentum_step(model.params, opt)
            if iteration % cfg.eval_every == 0 or iteration == cfg.total_iterations:
                emit(iteration, breakdown)

    save_checkpoint(
        out_dir / "last.ckpt",
        checkpoint_from_model(model, cfg, opt, cfg.total_iterations),
    )
    assert best is not None
    return TrainResult(best=best, last=records[-1], records=records, out_dir=out_dir)
