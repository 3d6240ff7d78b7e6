"""Synthetic part-compositional datasets, disjoint-class splits, and file I/O.

Class identity is carried by the combination of small texture prototypes
rendered at fixed, non-overlapping spatial windows ("part sites"), so that
spatially selective embeddings have something real to attend to. Samples add
Gaussian pixel noise and, optionally, global intensity jitter and horizontal
flips.

Dataset file format: magic ``ABEDS1\\n``, little-endian u32 N,C,H,W, then
N*C*H*W float32 pixels (row-major), then N u32 labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"ABEDS1\n"
PROTOTYPES_PER_SITE = 4  # texture variants per site; class capacity = 4**parts

# Each site's prototypes share one strong base texture and differ by a small
# additive pattern: class identity is carried by fine texture, not raw energy,
# so raw-pixel retrieval is hard while class centroids stay far apart.
_BASE_RANGE = (0.3, 0.9)
_DELTA_SCALE = 0.3

Site = tuple[int, int, int, int]  # top, left, height, width


def default_part_sites(grid: tuple[int, int], parts: int) -> list[Site]:
    """Evenly spaced disjoint windows on a ceil(sqrt(P)) lattice."""
    h, w = grid
    cols = int(np.ceil(np.sqrt(parts)))
    rows = int(np.ceil(parts / cols))
    cell_h, cell_w = h // rows, w // cols
    win_h, win_w = max(1, cell_h // 2), max(1, cell_w // 2)
    off_h, off_w = (cell_h - win_h) // 2, (cell_w - win_w) // 2
    sites = []
    for i in range(parts):
        r, c = divmod(i, cols)
        sites.append((r * cell_h + off_h, c * cell_w + off_w, win_h, win_w))
    return sites


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 16
    samples_per_class: int = 64
    grid: tuple[int, int] = (16, 16)
    channels: int = 1
    parts: int = 4
    part_sites: tuple[Site, ...] | None = None
    noise_sigma: float = 0.05
    seed: int = 0
    augment: bool = True  # global intensity jitter (+-10%) and horizontal flip

    def resolved_sites(self) -> list[Site]:
        if self.part_sites is not None:
            return list(self.part_sites)
        return default_part_sites(self.grid, self.parts)

    def violations(self) -> list[str]:
        out = []
        if self.classes < 4:
            out.append(f"classes must be >= 4, got {self.classes}")
        if self.samples_per_class < 4:
            out.append(f"samples_per_class must be >= 4, got {self.samples_per_class}")
        if self.parts < 2:
            out.append(f"parts must be >= 2, got {self.parts}")
        if self.channels < 1:
            out.append(f"channels must be >= 1, got {self.channels}")
        if self.grid[0] < 2 or self.grid[1] < 2:
            out.append(f"grid must be at least 2x2, got {self.grid}")
        if self.noise_sigma < 0:
            out.append(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        sites = self.resolved_sites()
        if len(sites) != self.parts:
            out.append(f"{self.parts} parts but {len(sites)} part sites")
        h, w = self.grid
        occupied = np.zeros((h, w), dtype=bool)
        for i, (top, left, sh, sw) in enumerate(sites):
            if top < 0 or left < 0 or sh < 1 or sw < 1 or top + sh > h or left + sw > w:
                out.append(f"part site {i} {sites[i]} does not fit inside the {h}x{w} grid")
                continue
            window = occupied[top : top + sh, left : left + sw]
            if window.any():
                out.append(f"part site {i} {sites[i]} overlaps an earlier site")
            window[:] = True
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigError("invalid synthetic spec: " + "; ".join(problems))


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] float64
    labels: np.ndarray  # [N] int64
    class_names: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got rank {self.images.ndim}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)


def _assign_class_tuples(rng: np.random.Generator, classes: int, parts: int) -> np.ndarray:
    """Distinct per-class prototype tuples, drawn uniformly from the tuple space."""
    total = PROTOTYPES_PER_SITE**parts
    if classes > total:
        raise ConfigError(
            f"{classes} classes exceed the {total} distinct prototype tuples "
            f"available with {parts} parts"
        )
    if total <= 65536:
        codes = rng.permutation(total)[:classes]
        digits = np.empty((classes, parts), dtype=np.int64)
        for i, code in enumerate(codes):
            for j in range(parts):
                digits[i, j] = code % PROTOTYPES_PER_SITE
                code //= PROTOTYPES_PER_SITE
        return digits
    chosen: set[tuple[int, ...]] = set()
    rows = []
    while len(rows) < classes:
        cand = tuple(int(v) for v in rng.integers(0, PROTOTYPES_PER_SITE, parts))
        if cand not in chosen:
            chosen.add(cand)
            rows.append(cand)
    return np.asarray(rows, dtype=np.int64)


def generate(spec: SyntheticSpec) -> Dataset:
    """Render the dataset described by ``spec``, deterministically from its seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sites = spec.resolved_sites()
    c, (h, w) = spec.channels, spec.grid

    prototypes = [
        rng.uniform(0.0, 1.0, size=(PROTOTYPES_PER_SITE, c, sh, sw)) for (_, _, sh, sw) in sites
    ]
    tuples = _assign_class_tuples(rng, spec.classes, spec.parts)

    n = spec.classes * spec.samples_per_class
    images = np.zeros((n, c, h, w))
    labels = np.empty(n, dtype=np.int64)
    idx = 0
    for cls in range(spec.classes):
        for _ in range(spec.samples_per_class):
            canvas = np.zeros((c, h, w))
            for site_i, (top, left, sh, sw) in enumerate(sites):
                canvas[:, top : top + sh, left : left + sw] = prototypes[site_i][tuples[cls, site_i]]
            if spec.augment:
                canvas = canvas * rng.uniform(0.9, 1.1)
                if rng.random() < 0.5:
                    canvas = canvas[:, :, ::-1]
            if spec.noise_sigma > 0:
                canvas = canvas + rng.normal(0.0, spec.noise_sigma, size=(c, h, w))
            images[idx] = canvas
            labels[idx] = cls
            idx += 1

    # pixels are stored as float32 on disk; quantize now so save/load round-trips bit-exactly
    images = images.astype(np.float32).astype(np.float64)
    return Dataset(images=images, labels=labels)


def split_disjoint_classes(dataset: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """Split by class id: the first floor(fraction*classes) classes become the train side."""
    classes = dataset.class_ids()
    n_train = int(np.floor(train_fraction * len(classes)))
    problems = []
    if n_train < 2:
        problems.append(f"train side would get {n_train} classes (need >= 2)")
    if len(classes) - n_train < 2:
        problems.append(f"test side would get {len(classes) - n_train} classes (need >= 2)")
    if problems:
        raise ConfigError(
            f"train_fraction={train_fraction} over {len(classes)} classes: " + "; ".join(problems)
        )
    train_classes = set(classes[:n_train].tolist())
    mask = np.asarray([lbl in train_classes for lbl in dataset.labels.tolist()])
    return (
        Dataset(images=dataset.images[mask], labels=dataset.labels[mask]),
        Dataset(images=dataset.images[~mask], labels=dataset.labels[~mask]),
    )


def save_dataset(path, dataset: Dataset) -> None:
    n, c, h, w = dataset.images.shape
    if dataset.labels.min(initial=0) < 0 or dataset.labels.max(initial=0) >= 2**32:
        raise DataError("labels must fit in u32 to be saved")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad dataset magic at byte offset 0")
    off = len(MAGIC)
    if len(blob) < off + 16:
        raise DataError(f"{path}: truncated header at byte offset {len(blob)}")
    n, c, h, w = struct.unpack_from("<4I", blob, off)
    off += 16
    pixel_bytes = 4 * n * c * h * w
    label_bytes = 4 * n
    expected = off + pixel_bytes + label_bytes
    if len(blob) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for N={n} C={c} H={h} W={w}, "
            f"got {len(blob)} (divergence at byte offset {min(len(blob), expected)})"
        )
    images = np.frombuffer(blob, dtype="<f4", count=n * c * h * w, offset=off)
    images = images.reshape(n, c, h, w).astype(np.float64)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off + pixel_bytes)
    return Dataset(images=images, labels=labels.astype(np.int64))
