"""Command-line harness: generate, train, eval, compare, histogram, masks.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint
from .config import load_config, load_synthetic_spec
from .data import Dataset, generate, load_dataset, save_dataset, split_disjoint_classes
from .errors import ConfigError, DataError, NumericalAbort
from .evaluation import (
    attention_summary,
    cosine_pair_stats,
    embed_dataset,
    recall_at_k,
)
from .model import EnsembleModel, Variant
from . import report
from .train import run_training


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=str, default=None, help="override the output directory")
    parser.add_argument(
        "--threads", type=int, default=1, help="worker threads (>1 allowed only for eval)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abe",
        description="Attention-based ensembles for deep metric learning, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset file from a spec")
    p.add_argument("spec_file", help="key=value synthetic spec")
    p.add_argument("out_path", help="dataset file to write")
    _add_common(p)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True, help="key=value experiment config")
    p.add_argument("--verbose", action="store_true", help="print a line per evaluation")
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument(
        "dataset",
        nargs="?",
        default=None,
        help="dataset file to score in full; omitted: rebuild the config's test split",
    )
    p.add_argument("--ks", type=str, default=None, help="comma list of K values")
    _add_common(p)

    p = sub.add_parser("compare", help="train several variants under one config")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--variants",
        type=str,
        default="SINGLE,M_HEADS,M_TAILS,M_HEADS_ATT,ABE",
        help="comma list of variants to train",
    )
    _add_common(p)

    p = sub.add_parser("histogram", help="cosine histograms of positive/negative/self pairs")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", default=None)
    p.add_argument("--out-prefix", required=True, help="prefix for the CSV/PNG outputs")
    p.add_argument("--bins", type=int, default=40)
    _add_common(p)

    p = sub.add_parser("masks", help="export per-learner attention masks as PGM images")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", default=None)
    p.add_argument("--samples", type=str, default="0", help="comma list of sample indices")
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _check_threads(args) -> None:
    if args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    if args.threads > 1 and args.command != "eval":
        raise ConfigError("--threads > 1 is permitted only for the eval command")


def _eval_dataset_for(ckpt: Checkpoint, dataset_arg: str | None) -> Dataset:
    """Explicit dataset files are scored in full; otherwise rebuild the test split."""
    if dataset_arg is not None:
        return load_dataset(dataset_arg)
    cfg = ckpt.config
    full = load_dataset(cfg.dataset) if cfg.dataset is not None else generate(cfg.synthetic_spec())
    return split_disjoint_classes(full, cfg.train_fraction)[1]


def _load_model(args) -> tuple[Checkpoint, Dataset, EnsembleModel]:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _eval_dataset_for(ckpt, args.dataset)
    model = model_from_checkpoint(ckpt, dataset.input_shape)
    return ckpt, dataset, model


def _format_recall(scope: str, values: dict[int, float]) -> str:
    return f"{scope:>12}  " + "  ".join(f"R@{k}={v:.4f}" for k, v in sorted(values.items()))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = load_synthetic_spec(args.spec_file)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    dataset = generate(spec)
    save_dataset(args.out_path, dataset)
    n, c, h, w = dataset.images.shape
    print(f"wrote {args.out_path}: N={n} C={c} H={h} W={w}")
    ids, counts = np.unique(dataset.labels, return_counts=True)
    census = ", ".join(f"{int(i)}:{int(k)}" for i, k in zip(ids, counts))
    print(f"samples per class: {census}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    result = run_training(cfg, quiet=not args.verbose)
    report.save_training_curves(result.out_dir / "training_curves.png", result.records)
    best = result.best
    print(f"best record (iteration {best.iteration}):")
    print(_format_recall("ensemble", best.recall["ensemble"]))
    for scope in sorted(k for k in best.recall if k.startswith("learner_")):
        print(_format_recall(scope, best.recall[scope]))
    print(json.dumps(best.to_json_dict(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ckpt, dataset, model = _load_model(args)
    ks = (
        tuple(int(k) for k in args.ks.split(","))
        if args.ks is not None
        else ckpt.config.recall_ks
    )
    embeddings = embed_dataset(model, dataset.images, dataset.labels)
    recall = {"ensemble": recall_at_k(embeddings, list(ks), workers=args.threads)}
    for m in range(model.learners):
        recall[f"learner_{m}"] = recall_at_k(embeddings.learner_slice(m), list(ks))
    stats = {
        "positive": cosine_pair_stats(embeddings, "positive"),
        "negative": cosine_pair_stats(embeddings, "negative"),
    }
    if model.learners >= 2:
        stats["self"] = cosine_pair_stats(embeddings, "self")

    print(f"checkpoint iteration {ckpt.iteration}, {dataset.n} samples")
    for scope in recall:
        print(_format_recall(scope, recall[scope]))
    means = "  ".join(f"cos_{k}_mean={s.mean:.4f}" for k, s in stats.items())
    print(means)

    out_dir = Path(args.out) if args.out is not None else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "iter": ckpt.iteration,
        "recall": {s: {str(k): v for k, v in vals.items()} for s, vals in recall.items()},
        **{f"cos_{k}_mean": s.mean for k, s in stats.items()},
    }
    (out_dir / "eval_metrics.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    return 0


def cmd_compare(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    try:
        variants = [Variant(v.strip().upper()) for v in args.variants.split(",")]
    except ValueError as exc:
        raise ConfigError(f"unknown variant in --variants: {exc}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    ks = list(cfg.recall_ks)
    for variant in variants:
        run_cfg = dataclasses.replace(
            cfg, variant=variant, out_dir=str(out_dir / variant.value.lower())
        )
        try:
            result = run_training(run_cfg)
        except (ConfigError, DataError, NumericalAbort) as exc:
            print(f"variant {variant.value} failed, skipping: {exc}", file=sys.stderr)
            continue
        ckpt = load_checkpoint(Path(run_cfg.out_dir) / "best.ckpt")
        dataset = _eval_dataset_for(ckpt, None)
        model = model_from_checkpoint(ckpt, dataset.input_shape)
        best = result.best
        learner_scopes = [s for s in best.recall if s.startswith("learner_")]
        individual = np.asarray(
            [[best.recall[s][k] for k in ks] for s in learner_scopes]
        )
        rows.append(
            {
                "variant": variant.value,
                "ensemble": {k: best.recall["ensemble"][k] for k in ks},
                "individual_mean": dict(zip(ks, individual.mean(axis=0))),
                "individual_std": dict(zip(ks, individual.std(axis=0))),
                "params": model.param_count(),
                "flops": model.flop_count(),
            }
        )

    report.write_compare_csv(out_dir / "comparison.csv", rows, ks)
    report.save_compare_figure(out_dir / "comparison.png", rows)
    print(report.format_compare_table(rows, ks))
    print(f"wrote {out_dir / 'comparison.csv'} and comparison.png")
    return 0


def cmd_histogram(args) -> int:
    ckpt, dataset, model = _load_model(args)
    embeddings = embed_dataset(model, dataset.images, dataset.labels)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)

    kinds = ["positive", "negative"]
    if model.learners >= 2:
        kinds.append("self")
    else:
        print("warning: single learner, self histogram omitted", file=sys.stderr)
    stats = {kind: cosine_pair_stats(embeddings, kind, bins=args.bins) for kind in kinds}
    suffix = {"positive": "pos", "negative": "neg", "self": "self"}
    for kind in kinds:
        report.write_histogram_csv(f"{prefix}_{suffix[kind]}.csv", stats[kind])
    report.save_histogram_figure(f"{prefix}_hist.png", stats)
    print("  ".join(f"cos_{suffix[k]}_mean={stats[k].mean:.4f}" for k in kinds))
    return 0


def cmd_masks(args) -> int:
    ckpt, dataset, model = _load_model(args)
    if not model.variant.has_attention:
        raise ConfigError(f"variant {model.variant.value} has no attention masks")
    try:
        sample_ids = [int(s) for s in args.samples.split(",")]
    except ValueError:
        raise ConfigError(f"--samples must be a comma list of integers, got {args.samples!r}")
    for sid in sample_ids:
        if not 0 <= sid < dataset.n:
            raise ConfigError(f"sample index {sid} out of range [0,{dataset.n})")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subset = dataset.images[sample_ids]

    from . import tensor as T
    from .tensor import Tensor

    with T.no_grad():
        masks = model.attention_masks(Tensor(subset))
    per_sample = np.stack([mk.data.mean(axis=1) for mk in masks])  # [M, S, H', W']
    mean_masks = attention_summary(model, subset)  # [M, H', W']

    for m in range(model.learners):
        for si, sid in enumerate(sample_ids):
            report.write_pgm(out_dir / f"mask_s{sid}_l{m}.pgm", per_sample[m, si])
        report.write_pgm(out_dir / f"mask_mean_l{m}.pgm", mean_masks[m])
    report.save_mask_montage(out_dir / "masks.png", per_sample, mean_masks)
    print(f"wrote {model.learners * (len(sample_ids) + 1)} PGM masks and masks.png to {out_dir}")
    return 0


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "histogram": cmd_histogram,
    "masks": cmd_masks,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_threads(args)
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
