"""Binary checkpoints: config snapshot, parameters, optimizer state, iteration.

Layout: magic ``ABECK1\\n``, u32 version, length-prefixed config text, u32
tensor count, then per tensor a length-prefixed name, u32 rank, u32 dims, and
little-endian float64 data. Optimizer velocities are stored under ``opt/``
names and the iteration as the single-element tensor ``meta/iter``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_kv, parse_kv_text, serialize_config
from .errors import ConfigError, DataError
from .model import EnsembleModel, Variant, init_parameters
from .tensor import OptimizerState, Tensor

MAGIC = b"ABECK1\n"
VERSION = 1

_ITER_NAME = "meta/iter"
_OPT_PREFIX = "opt/"


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    iteration: int


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: list[tuple[str, np.ndarray]] = list(ckpt.params.items())
    tensors += [(_OPT_PREFIX + name, v) for name, v in ckpt.velocity.items()]
    tensors.append((_ITER_NAME, np.asarray([float(ckpt.iteration)])))

    config_text = serialize_config(ckpt.config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(config_text)))
        f.write(config_text)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, origin: str):
        self.blob = blob
        self.off = 0
        self.origin = origin

    def take(self, count: int, what: str) -> bytes:
        if self.off + count > len(self.blob):
            raise DataError(
                f"{self.origin}: truncated while reading {what} at byte offset {self.off}"
            )
        chunk = self.blob[self.off : self.off + count]
        self.off += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic at byte offset 0")
    r = _Reader(blob, str(path))
    r.off = len(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    config_text = r.take(r.u32("config length"), "config text").decode("utf-8")
    config = config_from_kv(parse_kv_text(config_text, origin=f"{path}#config"))

    count = r.u32("tensor count")
    params: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    iteration: int | None = None
    for _ in range(count):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * size, f"data of {name}"), dtype="<f8").reshape(dims)
        data = data.astype(np.float64)
        if name == _ITER_NAME:
            iteration = int(data.reshape(-1)[0])
        elif name.startswith(_OPT_PREFIX):
            velocity[name[len(_OPT_PREFIX) :]] = data
        else:
            params[name] = data
    if r.off != len(blob):
        raise DataError(f"{path}: {len(blob) - r.off} trailing bytes at offset {r.off}")
    if iteration is None:
        raise DataError(f"{path}: checkpoint is missing its iteration record")
    return Checkpoint(config=config, params=params, velocity=velocity, iteration=iteration)


def checkpoint_from_model(
    model: EnsembleModel, config: ExperimentConfig, opt: OptimizerState, iteration: int
) -> Checkpoint:
    return Checkpoint(
        config=config,
        params={name: p.data.copy() for name, p in model.params.items()},
        velocity={name: v.copy() for name, v in opt.velocity.items()},
        iteration=iteration,
    )


def model_from_checkpoint(ckpt: Checkpoint, input_shape: tuple[int, int, int]) -> EnsembleModel:
    """Rebuild the model; parameter names and shapes must match the config exactly."""
    backbone = ckpt.config.backbone(input_shape)
    model = init_parameters(ckpt.config.variant, backbone, seed=0)
    expected = {name: p.shape for name, p in model.params.items()}
    stored = {name: arr.shape for name, arr in ckpt.params.items()}
    if expected != stored:
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        wrong = sorted(
            name for name in set(expected) & set(stored) if expected[name] != stored[name]
        )
        raise DataError(
            "checkpoint does not fit the configured architecture: "
            f"missing={missing}, extra={extra}, shape-mismatch={wrong}"
        )
    for name, arr in ckpt.params.items():
        model.params[name] = Tensor(arr.copy())
    return EnsembleModel(ckpt.config.variant, backbone, model.params)
