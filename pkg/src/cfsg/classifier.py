"""Structured concept space: partitioned classifier weights and the
explicitly weighted decision rule.

Each granularity level owns a K x d weight matrix whose columns follow the
same fixed block layout as the feature partition.  Logits are the weighted
sum of per-block inner products; at training time all three weights are 1,
at inference they are normalized to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .model import PartitionSpec, PooledParts, _init_dense


def disentangle_weights(weight, p: PartitionSpec):
    """Column-slice a K x d weight matrix into its three blocks (lossless)."""
    if weight.ndim != 2 or weight.shape[1] != p.d:
        raise DimensionError(f"expected K x {p.d} weights, got shape {weight.shape}")
    return weight[:, p.common], weight[:, p.specific], weight[:, p.confounding]


def normalize_inference_weights(lam):
    """Scale (lam_c, lam_p, lam_n) to sum to one."""
    lam = tuple(float(v) for v in lam)
    if len(lam) != 3:
        raise ValidationError(f"need three inference weights, got {len(lam)}")
    if any(v < 0 for v in lam):
        raise ValidationError(f"inference weights must be nonnegative, got {lam}")
    total = sum(lam)
    if total <= 0:
        raise ValidationError("inference weights are all zero")
    return tuple(v / total for v in lam)


class ClassifierHead:
    """Affine classifier for one granularity level."""

    def __init__(self, num_classes: int, p: PartitionSpec, rng: np.random.Generator):
        self.partition = p
        self.weight = Tensor(_init_dense(rng, p.d, num_classes).T.copy())  # K x d
        self.bias = Tensor(np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def structured_logits(pooled: PooledParts, head: ClassifierHead, lam=(1.0, 1.0, 1.0)) -> Tensor:
    """lam_c <f_c, W_c> + lam_p <f_p, W_p> + lam_n <f_n, W_n> + b per class.

    `lam` entries may be floats or scalar tensors (learnable mode).
    """
    w_c, w_p, w_n = disentangle_weights(head.weight, head.partition)
    for f, w, name in ((pooled.common, w_c, "common"),
                       (pooled.specific, w_p, "specific"),
                       (pooled.confounding, w_n, "confounding")):
        if f.shape[-1] != w.shape[1]:
            raise DimensionError(f"{name} part dim {f.shape[-1]} != weight block dim {w.shape[1]}")
    lam_c, lam_p, lam_n = lam
    return (lam_c * (pooled.common @ w_c.transpose())
            + lam_p * (pooled.specific @ w_p.transpose())
            + lam_n * (pooled.confounding @ w_n.transpose())
            + head.bias)


def plain_logits(pooled_full: Tensor, head: ClassifierHead) -> Tensor:
    """Unpartitioned affine classifier <f, W> + b (concept structuralization off)."""
    return pooled_full @ head.weight.transpose() + head.bias


def predict(logits) -> np.ndarray:
    """Argmax class ids; ties resolve to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.size == 0:
        raise DimensionError("predict on empty logits")
    if arr.ndim == 1:
        return int(np.argmax(arr))
    return np.argmax(arr, axis=-1)


@dataclass
class StructuredClassifier:
    """Bundle of per-level heads plus the shared inference weights."""

    heads: list[ClassifierHead]
    lam: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def head(self, level: int) -> ClassifierHead:
        return self.heads[level]
