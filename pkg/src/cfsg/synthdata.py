"""Synthetic two-domain dataset generator and the dataset file format.

The generative model plants class information directly into the partition
blocks of the input vector:

* the common block is divided into one chunk per granularity level; chunk g
  carries the prototype of the sample's level-g ancestor, so siblings
  genuinely share every coarse chunk while the finest chunk stays
  class-unique;
* the specific block carries a per-fine-class prototype, optionally mixed
  with a much stronger per-parent atom (`sibling_scale`), which makes
  sibling classes nearly identical there: only the structuralization losses
  keep the fine separation organized instead of letting plain
  cross-entropy scatter it across all channels;
* the confounding block carries no class signal.

The target domain applies an affine transform (scale plus a fixed random
offset direction) to the designated blocks (specific and confounding by
default), emulating a style shift that leaves commonality intact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .hierarchy import HierarchySpec
from .model import PartitionSpec

# Sub-seed role offsets: every stream is seed + offset (documented rule).
SEED_OFFSET_PROTOTYPES = 1
SEED_OFFSET_SHIFT = 2
SEED_OFFSET_SOURCE_NOISE = 3
SEED_OFFSET_TARGET_NOISE = 4


@dataclass(frozen=True)
class SyntheticDomainConfig:
    """Knobs of the generative model; deterministic given `seed`."""

    prototype_scales: tuple[float, ...] = (1.0, 1.0, 1.0)  # one per level, fine first
    noise_std: float = 0.1
    shift_scale: float = 1.0
    shift_offset: float = 0.0
    shift_blocks: tuple[str, ...] = ("specific", "confounding")
    sibling_scale: float = 0.0
    samples_per_class: int = 20
    seed: int = 0

    def validate(self, h: HierarchySpec) -> None:
        if len(self.prototype_scales) != h.levels:
            raise ValidationError(
                f"need {h.levels} prototype scales (one per level), got {len(self.prototype_scales)}")
        if self.noise_std < 0:
            raise ValidationError(f"noise std must be >= 0, got {self.noise_std}")
        if self.sibling_scale < 0:
            raise ValidationError(f"sibling scale must be >= 0, got {self.sibling_scale}")
        if self.samples_per_class < 1:
            raise ValidationError(f"samples per class must be >= 1, got {self.samples_per_class}")
        for b in self.shift_blocks:
            if b not in ("common", "specific", "confounding"):
                raise ValidationError(f"unknown shift block {b!r}")


@dataclass
class Dataset:
    """In-memory dataset: inputs, per-level labels, and the hierarchy."""

    x: np.ndarray          # N x d float64
    labels: np.ndarray     # N x G int64, column g = label at level g
    hierarchy: HierarchySpec
    domain: str = "source"

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.asarray(self.x, dtype=np.float64))
        self.labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if self.x.ndim != 2 or self.labels.ndim != 2 or self.x.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"inconsistent dataset shapes: x {self.x.shape}, labels {self.labels.shape}")
        if self.labels.shape[1] != self.hierarchy.levels:
            raise ValidationError(
                f"labels have {self.labels.shape[1]} levels, hierarchy has {self.hierarchy.levels}")
        validate_labels(self.hierarchy, self.labels)

    def __len__(self) -> int:
        return self.x.shape[0]


def validate_labels(h: HierarchySpec, labels: np.ndarray) -> None:
    """Check every row is a consistent ancestor chain of its fine label."""
    for g in range(h.levels):
        col = labels[:, g]
        if col.min(initial=0) < 0 or col.max(initial=0) >= h.class_counts[g]:
            raise ValidationError(f"level {g} labels out of range [0, {h.class_counts[g]})")
    for g in range(h.levels - 1):
        parents = np.array([h.parent_maps[g][int(c)] for c in labels[:, g]])
        bad = np.nonzero(parents != labels[:, g + 1])[0]
        if bad.size:
            raise ValidationError(
                f"sample {int(bad[0])} violates ancestor consistency at level {g + 1}")


def _common_chunks(p: PartitionSpec, levels: int) -> list[slice]:
    """Split the common block into one chunk per granularity level."""
    bounds = np.linspace(0, p.d_c, levels + 1).astype(int)
    return [slice(int(bounds[g]), int(bounds[g + 1])) for g in range(levels)]


def class_prototype_table(h: HierarchySpec, p: PartitionSpec,
                          cfg: SyntheticDomainConfig) -> np.ndarray:
    """Noise-free input vector per fine class (K x d), shared by both domains."""
    cfg.validate(h)
    rng = np.random.default_rng(cfg.seed + SEED_OFFSET_PROTOTYPES)
    chunks = _common_chunks(p, h.levels)
    chunk_protos = [cfg.prototype_scales[g] * rng.normal(
        size=(h.class_counts[g], chunks[g].stop - chunks[g].start))
        for g in range(h.levels)]
    fine_protos = cfg.prototype_scales[0] * rng.normal(size=(h.num_fine, p.d_p))
    n_parents = h.class_counts[1] if h.levels > 1 else 0
    sibling_atoms = cfg.sibling_scale * rng.normal(size=(max(n_parents, 1), p.d_p))

    table = np.zeros((h.num_fine, p.d))
    for k in range(h.num_fine):
        chain = h.label_vector(k)
        for g in range(h.levels):
            table[k, chunks[g]] += chunk_protos[g][chain[g]]
        table[k, p.specific] = fine_protos[k]
        if n_parents and cfg.sibling_scale > 0:
            table[k, p.specific] += sibling_atoms[chain[1]]
    return table


def generate_synthetic_domains(h: HierarchySpec, p: PartitionSpec,
                               cfg: SyntheticDomainConfig) -> tuple[Dataset, Dataset]:
    """Build matched source and target datasets, deterministic per seed."""
    cfg.validate(h)
    table = class_prototype_table(h, p, cfg)
    shift_dir = np.random.default_rng(cfg.seed + SEED_OFFSET_SHIFT).normal(size=p.d)

    n = h.num_fine * cfg.samples_per_class
    labels = np.repeat(h.label_matrix(), cfg.samples_per_class, axis=0)
    base = np.repeat(table, cfg.samples_per_class, axis=0)

    def build(domain: str, noise_offset: int, shifted: bool) -> Dataset:
        x = base.copy()
        if cfg.noise_std > 0:
            noise_rng = np.random.default_rng(cfg.seed + noise_offset)
            x += cfg.noise_std * noise_rng.normal(size=x.shape)
        if shifted:
            for name in cfg.shift_blocks:
                sl = p.block(name)
                x[:, sl] = cfg.shift_scale * x[:, sl] + cfg.shift_offset * shift_dir[sl]
        return Dataset(x=x, labels=labels.copy(), hierarchy=h, domain=domain)

    source = build("source", SEED_OFFSET_SOURCE_NOISE, shifted=False)
    target = build("target", SEED_OFFSET_TARGET_NOISE, shifted=True)
    return source, target


# ---------------------------------------------------------------------------
# dataset file format: {"hierarchy": {...}, "samples": [{"x": [...], "labels": [...]}]}
# ---------------------------------------------------------------------------

def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "hierarchy": ds.hierarchy.to_dict(),
        "samples": [{"x": [float(v) for v in row_x], "labels": [int(v) for v in row_l]}
                    for row_x, row_l in zip(ds.x, ds.labels)],
    }


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds)) + "\n", encoding="utf-8")


def load_dataset(path, domain: str | None = None) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read dataset file {path}: {exc}") from exc
    try:
        h = HierarchySpec.from_dict(doc["hierarchy"])
        samples = doc["samples"]
        x = np.array([s["x"] for s in samples], dtype=np.float64)
        labels = np.array([s["labels"] for s in samples], dtype=np.int64)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"dataset file {path} missing field: {exc}") from exc
    return Dataset(x=x, labels=labels, hierarchy=h, domain=domain or path.stem)
