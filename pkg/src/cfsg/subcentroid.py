"""Momentum-updated per-class part centroids and nearest-centroid inference.

The bank stores one centroid per (class, level, block), in the pooled part
dimensions (spatial means).  Batch prototypes move centroids with
``F <- mu*F + (1-mu)*P``; the first prototype a class ever receives
initializes its centroid directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, UninitializedCentroidError, ValidationError
from .hierarchy import HierarchySpec
from .model import PartitionSpec, PooledParts

PARTS = ("common", "specific", "confounding")


def batch_part_prototypes(pooled: PooledParts, labels: np.ndarray) -> dict[int, dict[str, np.ndarray]]:
    """Per-class means of the pooled part vectors for one level.

    `labels` holds this level's integer class per sample.  Classes absent
    from the batch yield no prototype.
    """
    labels = np.asarray(labels, dtype=np.int64)
    arrays = {name: getattr(pooled, name).data for name in PARTS}
    if labels.size == 0:
        raise ValidationError("empty batch")
    out: dict[int, dict[str, np.ndarray]] = {}
    for k in sorted(int(c) for c in np.unique(labels)):
        rows = np.flatnonzero(labels == k)
        out[k] = {name: arr[rows].mean(axis=0) for name, arr in arrays.items()}
    return out


@dataclass
class SubCentroidBank:
    """Per-class, per-level, per-block centroids with momentum mu."""

    hierarchy: HierarchySpec
    partition: PartitionSpec
    momentum: float = 0.9
    centroids: list[dict[str, np.ndarray]] = field(default_factory=list)
    initialized: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError(f"momentum must be in [0, 1], got {self.momentum}")
        dims = {"common": self.partition.d_c, "specific": self.partition.d_p,
                "confounding": self.partition.d_n}
        if not self.centroids:
            self.centroids = [{name: np.zeros((k, dims[name])) for name in PARTS}
                              for k in self.hierarchy.class_counts]
        if not self.initialized:
            self.initialized = [np.zeros(k, dtype=bool) for k in self.hierarchy.class_counts]

    def update(self, level: int, prototypes: dict[int, dict[str, np.ndarray]]) -> None:
        """Momentum-move this level's centroids toward the batch prototypes."""
        mu = self.momentum
        for k, parts in prototypes.items():
            for name in PARTS:
                proto = np.asarray(parts[name], dtype=np.float64)
                if proto.shape != self.centroids[level][name][k].shape:
                    raise DimensionError(
                        f"prototype for class {k} block {name} has shape {proto.shape}, "
                        f"expected {self.centroids[level][name][k].shape}")
                if self.initialized[level][k]:
                    self.centroids[level][name][k] = mu * self.centroids[level][name][k] + (1.0 - mu) * proto
                else:
                    self.centroids[level][name][k] = proto
            self.initialized[level][k] = True

    def predict(self, pooled: PooledParts, lam=(1.0, 1.0, 1.0), level: int = 0) -> np.ndarray:
        """Argmin over classes of the lam-weighted sum of per-block Euclidean
        distances to the centroids; ties resolve to the lowest class id."""
        missing = np.flatnonzero(~self.initialized[level])
        if missing.size:
            raise UninitializedCentroidError(
                f"level {level} classes never initialized: {missing.tolist()}")
        lam_c, lam_p, lam_n = (float(v) for v in lam)
        score = None
        for weight, name in ((lam_c, "common"), (lam_p, "specific"), (lam_n, "confounding")):
            f = getattr(pooled, name).data                      # B x d_part
            centers = self.centroids[level][name]               # K x d_part
            if f.shape[-1] != centers.shape[-1]:
                raise DimensionError(
                    f"pooled {name} dim {f.shape[-1]} != centroid dim {centers.shape[-1]}")
            dist = np.sqrt(((f[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
            score = weight * dist if score is None else score + weight * dist
        return np.argmin(score, axis=1)

    def to_dict(self) -> dict:
        return {
            "momentum": self.momentum,
            "centroids": [{name: arr.tolist() for name, arr in level.items()}
                          for level in self.centroids],
            "initialized": [mask.tolist() for mask in self.initialized],
        }

    @staticmethod
    def from_dict(doc: dict, hierarchy: HierarchySpec, partition: PartitionSpec) -> "SubCentroidBank":
        try:
            centroids = [{name: np.array(level[name], dtype=np.float64) for name in PARTS}
                         for level in doc["centroids"]]
            initialized = [np.array(mask, dtype=bool) for mask in doc["initialized"]]
            momentum = float(doc["momentum"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"sub-centroid bank document missing field: {exc}") from exc
        return SubCentroidBank(hierarchy, partition, momentum,
                               centroids=centroids, initialized=initialized)
