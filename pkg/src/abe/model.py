"""Ensemble architectures over a configurable toy convolutional backbone.

The backbone is an ordered conv stack split at a branch point into a spatial
feature extractor (lower layers, producing a spatial map) and a global
embedding function (upper layers plus global average pooling and a final
projection). Attention variants insert a shared attention trunk of pooling-free
conv layers after the spatial extractor, plus one 1x1-conv-and-sigmoid head per
learner whose [0,1] mask gates the spatial map elementwise before the global
embedding runs.

Variants:
  SINGLE       one spatial extractor, one embedding, M forced to 1
  M_HEADS      shared spatial extractor, per-learner embeddings
  M_TAILS      per-learner spatial extractors, shared embedding
  M_HEADS_ATT  shared spatial extractor + attention, per-learner embeddings
  ABE          shared spatial extractor + attention, shared embedding
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Variant(enum.Enum):
    SINGLE = "SINGLE"
    M_HEADS = "M_HEADS"
    M_TAILS = "M_TAILS"
    M_HEADS_ATT = "M_HEADS_ATT"
    ABE = "ABE"

    @property
    def has_attention(self) -> bool:
        return self in (Variant.M_HEADS_ATT, Variant.ABE)

    @property
    def shared_spatial(self) -> bool:
        return self is not Variant.M_TAILS

    @property
    def shared_embedding(self) -> bool:
        return self in (Variant.SINGLE, Variant.M_TAILS, Variant.ABE)


ATTENTION_KERNEL = 3  # attention-trunk convs; heads are always 1x1


@dataclass(frozen=True)
class TrunkLayer:
    width: int
    kernel: int = 3
    pool: bool = False  # 2x2 max pool after the activation


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int]  # C,H,W
    trunk: tuple[TrunkLayer, ...]
    branch_point: int
    embedding_dim: int
    learners: int = 1
    attention_depth: int = 1
    normalize_embeddings: bool = True

    def violations(self) -> list[str]:
        out = []
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            out.append(f"input_shape must be three positive extents, got {self.input_shape}")
        if not self.trunk:
            out.append("trunk must have at least one layer")
        if not 0 < self.branch_point < len(self.trunk):
            out.append(
                f"branch_point must satisfy 0 < {self.branch_point} < {len(self.trunk)} "
                f"(trunk layers)"
            )
        for i, layer in enumerate(self.trunk):
            if layer.width < 1:
                out.append(f"trunk layer {i}: width must be positive, got {layer.width}")
            if layer.kernel < 1 or layer.kernel % 2 == 0:
                out.append(f"trunk layer {i}: kernel must be odd and positive, got {layer.kernel}")
        if self.learners < 1:
            out.append(f"learners must be >= 1, got {self.learners}")
        if self.embedding_dim < 1:
            out.append(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        elif self.learners >= 1 and self.embedding_dim % max(self.learners, 1) != 0:
            out.append(
                f"embedding_dim {self.embedding_dim} must be divisible by learners {self.learners}"
            )
        if self.attention_depth < 0:
            out.append(f"attention_depth must be >= 0, got {self.attention_depth}")
        if len(self.input_shape) == 3 and self.trunk:
            h, w = self.input_shape[1], self.input_shape[2]
            for i, layer in enumerate(self.trunk):
                if layer.pool:
                    if h % 2 or w % 2:
                        out.append(
                            f"trunk layer {i}: 2x2 pool needs even spatial extent, got {h}x{w}"
                        )
                        break
                    h, w = h // 2, w // 2
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigError("invalid backbone config: " + "; ".join(problems))

    def spatial_output_shape(self) -> tuple[int, int, int]:
        """Channels and spatial extent at the branch point."""
        c = self.input_shape[0]
        h, w = self.input_shape[1], self.input_shape[2]
        for layer in self.trunk[: self.branch_point]:
            c = layer.width
            if layer.pool:
                h, w = h // 2, w // 2
        return c, h, w

    def embedding_input_channels(self) -> int:
        """Channel count entering the final projection, after the upper conv stack."""
        return self.trunk[-1].width


def _effective_learners(variant: Variant, config: BackboneConfig) -> int:
    return 1 if variant is Variant.SINGLE else config.learners


def _learner_dim(variant: Variant, config: BackboneConfig) -> int:
    return config.embedding_dim // _effective_learners(variant, config)


def param_shapes(variant: Variant, config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter tensor, in canonical order."""
    config.validate()
    m = _effective_learners(variant, config)
    shapes: dict[str, tuple[int, ...]] = {}

    def add_convs(prefix: str, layers: Sequence[TrunkLayer], in_c: int, start: int) -> int:
        c = in_c
        for off, layer in enumerate(layers):
            shapes[f"{prefix}/conv{start + off}/w"] = (layer.width, c, layer.kernel, layer.kernel)
            shapes[f"{prefix}/conv{start + off}/b"] = (layer.width,)
            c = layer.width
        return c

    bp = config.branch_point
    lower, upper = config.trunk[:bp], config.trunk[bp:]
    in_c = config.input_shape[0]
    spatial_c = config.spatial_output_shape()[0]

    spatial_prefixes = ["spatial"] if variant.shared_spatial else [f"spatial{i}" for i in range(m)]
    for prefix in spatial_prefixes:
        add_convs(prefix, lower, in_c, 0)

    if variant.has_attention:
        c = spatial_c
        for i in range(config.attention_depth):
            shapes[f"att/conv{i}/w"] = (spatial_c, c, ATTENTION_KERNEL, ATTENTION_KERNEL)
            shapes[f"att/conv{i}/b"] = (spatial_c,)
            c = spatial_c
        for i in range(m):
            shapes[f"att_head{i}/w"] = (spatial_c, spatial_c, 1, 1)
            shapes[f"att_head{i}/b"] = (spatial_c,)

    d = _learner_dim(variant, config)
    embed_prefixes = ["embed"] if variant.shared_embedding else [f"embed{i}" for i in range(m)]
    for prefix in embed_prefixes:
        out_c = add_convs(prefix, upper, spatial_c, bp)
        shapes[f"{prefix}/fc/w"] = (out_c, d)
        shapes[f"{prefix}/fc/b"] = (d,)
    return shapes


def glorot_uniform_bound(shape: tuple[int, ...]) -> float:
    """sqrt(6/(fan_in+fan_out)); convs use (C*kh*kw, K*kh*kw), matrices (I, O)."""
    if len(shape) == 4:
        k, c, kh, kw = shape
        fan_in, fan_out = c * kh * kw, k * kh * kw
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ValueError(f"no Glorot fans for rank-{len(shape)} shape {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class EnsembleModel:
    """One architecture instance: variant, backbone config, and named parameters."""

    def __init__(self, variant: Variant, config: BackboneConfig, params: dict[str, Tensor]):
        expected = param_shapes(variant, config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
                )
        self.variant = variant
        self.config = config
        self.params = params

    # -- structure ----------------------------------------------------------

    @property
    def learners(self) -> int:
        return _effective_learners(self.variant, self.config)

    @property
    def learner_dim(self) -> int:
        return _learner_dim(self.variant, self.config)

    def _check_learner(self, m: int) -> None:
        if not 0 <= m < self.learners:
            raise ValueError(f"learner index {m} out of range [0,{self.learners})")

    # -- forward passes ------------------------------------------------------

    def _conv_stack(self, x: Tensor, prefix: str, layers, start: int) -> Tensor:
        h = x
        for off, layer in enumerate(layers):
            h = T.relu(
                T.conv2d(
                    h,
                    self.params[f"{prefix}/conv{start + off}/w"],
                    self.params[f"{prefix}/conv{start + off}/b"],
                )
            )
            if layer.pool:
                h = T.max_pool2d(h)
        return h

    def _spatial(self, x: Tensor, m: int) -> Tensor:
        prefix = "spatial" if self.variant.shared_spatial else f"spatial{m}"
        return self._conv_stack(x, prefix, self.config.trunk[: self.config.branch_point], 0)

    def _embed(self, h: Tensor, m: int) -> Tensor:
        prefix = "embed" if self.variant.shared_embedding else f"embed{m}"
        bp = self.config.branch_point
        h = self._conv_stack(h, prefix, self.config.trunk[bp:], bp)
        pooled = T.global_avg_pool(h)
        e = T.linear(pooled, self.params[f"{prefix}/fc/w"], self.params[f"{prefix}/fc/b"])
        if self.config.normalize_embeddings:
            e = T.l2_normalize(e)
        return e

    def _attention_trunk(self, s: Tensor) -> Tensor:
        h = s
        for i in range(self.config.attention_depth):
            h = T.relu(T.conv2d(h, self.params[f"att/conv{i}/w"], self.params[f"att/conv{i}/b"]))
        return h

    def _attention_head(self, trunk_out: Tensor, m: int) -> Tensor:
        return T.sigmoid(
            T.conv2d(trunk_out, self.params[f"att_head{m}/w"], self.params[f"att_head{m}/b"])
        )

    def attention_masks(self, x: Tensor) -> list[Tensor]:
        """Per-learner soft masks, each shaped like the spatial feature map."""
        if not self.variant.has_attention:
            raise ValueError(f"variant {self.variant.value} has no attention module")
        s = self._spatial(x, 0)
        trunk_out = self._attention_trunk(s)
        return [self._attention_head(trunk_out, m) for m in range(self.learners)]

    def forward_learner(self, x: Tensor, m: int, mask_override: float | None = None) -> Tensor:
        """Embed ``x`` with learner ``m``; [B,...] input gives a [B, D/M] embedding."""
        self._check_learner(m)
        s = self._spatial(x, m)
        if self.variant.has_attention:
            if mask_override is None:
                mask = self._attention_head(self._attention_trunk(s), m)
            else:
                mask = Tensor(np.full(s.shape, float(mask_override)))
            s = T.elementwise_mul(s, mask)
        return self._embed(s, m)

    def forward_all(self, x: Tensor, mask_override: float | None = None) -> list[Tensor]:
        """All learners' embeddings, evaluating shared stages once."""
        if self.variant is Variant.M_TAILS:
            return [self._embed(self._spatial(x, m), m) for m in range(self.learners)]
        s = self._spatial(x, 0)
        if self.variant.has_attention:
            if mask_override is None:
                trunk_out = self._attention_trunk(s)
                masks = [self._attention_head(trunk_out, m) for m in range(self.learners)]
            else:
                masks = [
                    Tensor(np.full(s.shape, float(mask_override))) for _ in range(self.learners)
                ]
            return [
                self._embed(T.elementwise_mul(s, masks[m]), m) for m in range(self.learners)
            ]
        return [self._embed(s, m) for m in range(self.learners)]

    # -- accounting -----------------------------------------------------------

    def param_count(self) -> int:
        """Exact number of scalar parameters."""
        return sum(p.size for p in self.params.values())

    def flop_count(self) -> int:
        """Analytic multiply-accumulates per forward image across all learners.

        Conv and linear layers only; shared stages are counted once, per-learner
        stages once per learner.
        """
        cfg = self.config
        m = self.learners

        def convs_macs(layers, in_c: int, h: int, w: int) -> tuple[int, int, int, int]:
            macs, c = 0, in_c
            for layer in layers:
                macs += layer.width * c * layer.kernel * layer.kernel * h * w
                c = layer.width
                if layer.pool:
                    h, w = h // 2, w // 2
            return macs, c, h, w

        in_c, h0, w0 = cfg.input_shape
        bp = cfg.branch_point
        spatial_macs, sc, sh, sw = convs_macs(cfg.trunk[:bp], in_c, h0, w0)
        embed_macs, ec, _, _ = convs_macs(cfg.trunk[bp:], sc, sh, sw)
        embed_macs += ec * self.learner_dim  # final projection

        total = spatial_macs * (1 if self.variant.shared_spatial else m)
        total += embed_macs * m
        if self.variant.has_attention:
            k2 = ATTENTION_KERNEL * ATTENTION_KERNEL
            total += cfg.attention_depth * sc * sc * k2 * sh * sw  # shared trunk, once
            total += m * sc * sc * sh * sw  # 1x1 heads, per learner
        return total


def init_parameters(
    variant: Variant, config: BackboneConfig, seed: int | np.random.SeedSequence
) -> EnsembleModel:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(variant, config).items():
        if name.endswith("/b"):
            params[name] = Tensor(np.zeros(shape))
        else:
            bound = glorot_uniform_bound(shape)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return EnsembleModel(variant, config, params)
