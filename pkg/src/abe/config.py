"""Flat key=value experiment configuration: parsing, validation, serialization.

Unknown keys are hard errors so ablation typos fail loudly. Lines starting with
``#`` and blank lines are ignored. The same parser backs experiment configs,
synthetic dataset spec files, and the config snapshot embedded in checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import Site, SyntheticSpec
from .errors import ConfigError
from .model import BackboneConfig, TrunkLayer, Variant


def parse_trunk(text: str) -> tuple[TrunkLayer, ...]:
    """Comma list of WIDTHxKERNEL[p] items, p = 2x2 max pool after the layer."""
    layers = []
    for i, raw in enumerate(text.split(",")):
        item = raw.strip()
        pool = item.endswith("p")
        if pool:
            item = item[:-1]
        try:
            width_s, _, kernel_s = item.partition("x")
            width = int(width_s)
            kernel = int(kernel_s) if kernel_s else 3
        except ValueError:
            raise ConfigError(f"trunk layer {i}: cannot parse {raw.strip()!r} as WIDTHxKERNEL[p]")
        layers.append(TrunkLayer(width=width, kernel=kernel, pool=pool))
    return tuple(layers)


def format_trunk(trunk: tuple[TrunkLayer, ...]) -> str:
    return ",".join(f"{t.width}x{t.kernel}{'p' if t.pool else ''}" for t in trunk)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse {text!r} as a boolean")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, _, w = text.partition("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as HxW grid")


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as a comma list of integers")


def _parse_sites(text: str) -> tuple[Site, ...]:
    sites = []
    for i, item in enumerate(text.split(",")):
        parts = item.strip().split(":")
        if len(parts) != 4:
            raise ConfigError(f"part site {i}: expected TOP:LEFT:HEIGHT:WIDTH, got {item.strip()!r}")
        try:
            sites.append(tuple(int(v) for v in parts))
        except ValueError:
            raise ConfigError(f"part site {i}: non-integer field in {item.strip()!r}")
    return tuple(sites)  # type: ignore[return-value]


def _format_sites(sites: tuple[Site, ...]) -> str:
    return ",".join(":".join(str(v) for v in s) for s in sites)


def read_kv_file(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text(), origin=str(path))


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected KEY = VALUE, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    # data: either a dataset file or an inline synthetic spec
    dataset: str | None = None
    classes: int = 16
    samples_per_class: int = 64
    grid: tuple[int, int] = (16, 16)
    channels: int = 1
    parts: int = 4
    part_sites: tuple[Site, ...] | None = None
    noise_sigma: float = 0.05
    data_seed: int = 0
    augment: bool = True
    train_fraction: float = 0.5

    # architecture
    variant: Variant = Variant.ABE
    trunk: tuple[TrunkLayer, ...] = (TrunkLayer(8, 3, True), TrunkLayer(16, 3))
    branch_point: int = 1
    attention_depth: int = 1
    learners: int = 2
    embedding_dim: int = 64
    normalize_embeddings: bool = True

    # loss
    contrastive_margin: float = 1.0
    divergence_margin: float = 1.0
    divergence_weight: float = 1.0

    # optimization and evaluation
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    total_iterations: int = 5000
    eval_every: int = 200
    recall_ks: tuple[int, ...] = (1, 2, 4, 8)
    seed: int = 0
    out_dir: str = "runs/experiment"

    def violations(self) -> list[str]:
        out = []
        if self.batch_size % 4 != 0 or self.batch_size < 4:
            out.append(f"batch_size must be a positive multiple of 4, got {self.batch_size}")
        if not self.learning_rate > 0:
            out.append(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"momentum must lie in [0,1), got {self.momentum}")
        if self.total_iterations < 0:
            out.append(f"total_iterations must be >= 0, got {self.total_iterations}")
        if self.eval_every < 1:
            out.append(f"eval_every must be >= 1, got {self.eval_every}")
        elif self.total_iterations > 0 and self.eval_every > self.total_iterations:
            out.append(
                f"eval_every ({self.eval_every}) must not exceed total_iterations "
                f"({self.total_iterations})"
            )
        if not self.recall_ks:
            out.append("recall_ks must not be empty")
        elif 1 not in self.recall_ks:
            out.append("recall_ks must include 1 (best-checkpoint selection uses Recall@1)")
        if not 0.0 < self.train_fraction < 1.0:
            out.append(f"train_fraction must lie in (0,1), got {self.train_fraction}")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigError("invalid experiment config: " + "; ".join(problems))

    # -- derived views --------------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            classes=self.classes,
            samples_per_class=self.samples_per_class,
            grid=self.grid,
            channels=self.channels,
            parts=self.parts,
            part_sites=self.part_sites,
            noise_sigma=self.noise_sigma,
            seed=self.data_seed,
            augment=self.augment,
        )

    def backbone(self, input_shape: tuple[int, int, int]) -> BackboneConfig:
        return BackboneConfig(
            input_shape=input_shape,
            trunk=self.trunk,
            branch_point=self.branch_point,
            embedding_dim=self.embedding_dim,
            learners=self.learners,
            attention_depth=self.attention_depth,
            normalize_embeddings=self.normalize_embeddings,
        )


_PARSERS = {
    "dataset": str,
    "classes": int,
    "samples_per_class": int,
    "grid": _parse_grid,
    "channels": int,
    "parts": int,
    "part_sites": _parse_sites,
    "noise_sigma": float,
    "data_seed": int,
    "augment": _parse_bool,
    "train_fraction": float,
    "variant": lambda s: Variant(s.strip().upper()),
    "trunk": parse_trunk,
    "branch_point": int,
    "attention_depth": int,
    "learners": int,
    "embedding_dim": int,
    "normalize_embeddings": _parse_bool,
    "contrastive_margin": float,
    "divergence_margin": float,
    "divergence_weight": float,
    "batch_size": int,
    "learning_rate": float,
    "momentum": float,
    "total_iterations": int,
    "eval_every": int,
    "recall_ks": _parse_int_list,
    "seed": int,
    "out_dir": str,
}


def config_from_kv(kv: dict[str, str], origin: str = "<config>") -> ExperimentConfig:
    unknown = sorted(set(kv) - set(_PARSERS))
    if unknown:
        raise ConfigError(f"{origin}: unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, raw in kv.items():
        try:
            values[key] = _PARSERS[key](raw)
        except ConfigError:
            raise
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{origin}: bad value for {key}: {raw!r} ({exc})")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return config_from_kv(read_kv_file(path), origin=str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical key=value text; parses back to an equal config."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if f.name == "trunk":
            text = format_trunk(value)
        elif f.name == "grid":
            text = f"{value[0]}x{value[1]}"
        elif f.name == "part_sites":
            text = _format_sites(value)
        elif f.name == "recall_ks":
            text = ",".join(str(k) for k in value)
        elif f.name == "variant":
            text = value.value
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


_SPEC_KEYS = {
    "classes",
    "samples_per_class",
    "grid",
    "channels",
    "parts",
    "part_sites",
    "noise_sigma",
    "seed",
    "augment",
}


def load_synthetic_spec(path) -> SyntheticSpec:
    """Spec files reuse the experiment keys, with ``seed`` meaning the data seed."""
    kv = read_kv_file(path)
    unknown = sorted(set(kv) - _SPEC_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown synthetic spec keys: {', '.join(unknown)}")
    values = {}
    for key, raw in kv.items():
        parser = _PARSERS["data_seed"] if key == "seed" else _PARSERS[key]
        try:
            values[key] = parser(raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key}: {raw!r} ({exc})")
    spec = SyntheticSpec(**values)
    spec.validate()
    return spec
