"""Desk-scale feature extractor, granularity transition layers, and the
channel partition that structures features into common / specific /
confounding blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .hierarchy import HierarchySpec

BN_EPS = 1e-8
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class PartitionSpec:
    """Contiguous channel split d = d_c + d_p + d_n (common, specific, confounding)."""

    d: int
    d_c: int
    d_p: int
    d_n: int

    def __post_init__(self):
        if self.d_c + self.d_p + self.d_n != self.d:
            raise ValidationError(f"partition blocks {self.d_c}+{self.d_p}+{self.d_n} != d={self.d}")
        if min(self.d_c, self.d_p, self.d_n) < 1:
            raise ValidationError(f"all partition blocks must be positive, got ({self.d_c},{self.d_p},{self.d_n})")

    @property
    def common(self) -> slice:
        return slice(0, self.d_c)

    @property
    def specific(self) -> slice:
        return slice(self.d_c, self.d_c + self.d_p)

    @property
    def confounding(self) -> slice:
        return slice(self.d_c + self.d_p, self.d)

    def block(self, name: str) -> slice:
        try:
            return {"common": self.common, "specific": self.specific, "confounding": self.confounding}[name]
        except KeyError:
            raise ValidationError(f"unknown partition block {name!r}") from None

    def to_dict(self) -> dict:
        return {"d": self.d, "d_c": self.d_c, "d_p": self.d_p, "d_n": self.d_n}

    @staticmethod
    def from_dict(doc: dict) -> "PartitionSpec":
        try:
            return PartitionSpec(int(doc["d"]), int(doc["d_c"]), int(doc["d_p"]), int(doc["d_n"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"partition document missing field: {exc}") from exc


def partition_channels(d: int, ratio=(5, 3, 2)) -> PartitionSpec:
    """Split d channels by a common:specific:confounding ratio.

    Specific and confounding blocks round down; the remainder goes to the
    common block.  Ratios are taken exactly (0.3 means 3/10, not the nearest
    float), so 5:3:2 over 10 channels gives (5, 3, 2).
    """
    if d < 3:
        raise ValidationError(f"need at least 3 channels to partition, got {d}")
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValidationError(f"ratio must be three positive numbers, got {ratio}")
    fracs = [Fraction(r).limit_denominator(10**9) for r in ratio]
    total = sum(fracs)
    d_p = int(fracs[1] / total * d)
    d_n = int(fracs[2] / total * d)
    d_c = d - d_p - d_n
    if min(d_c, d_p, d_n) < 1:
        raise ValidationError(f"d={d} too small for nonzero blocks at ratio {tuple(ratio)}")
    return PartitionSpec(d, d_c, d_p, d_n)


@dataclass
class StructuredFeatures:
    """One granularity level's features sliced into the three channel blocks."""

    common: Tensor      # B x d_c x L
    specific: Tensor    # B x d_p x L
    confounding: Tensor  # B x d_n x L

    def as_tuple(self):
        return (self.common, self.specific, self.confounding)


def disentangle_features(features: Tensor, p: PartitionSpec) -> StructuredFeatures:
    """Slice a B x d x L feature map into its three channel blocks."""
    if features.ndim != 3 or features.shape[1] != p.d:
        raise DimensionError(f"expected B x {p.d} x L features, got shape {features.shape}")
    return StructuredFeatures(
        common=features[:, p.common, :],
        specific=features[:, p.specific, :],
        confounding=features[:, p.confounding, :],
    )


@dataclass
class PooledParts:
    """Spatial means of the three blocks (B x d_c, B x d_p, B x d_n)."""

    common: Tensor
    specific: Tensor
    confounding: Tensor

    def as_tuple(self):
        return (self.common, self.specific, self.confounding)


def pool_parts(parts: StructuredFeatures) -> PooledParts:
    return PooledParts(
        common=parts.common.mean(axis=2),
        specific=parts.specific.mean(axis=2),
        confounding=parts.confounding.mean(axis=2),
    )


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


class Backbone:
    """Two dense layers with rectification; output reshaped to B x d_raw x L."""

    def __init__(self, d_in: int, hidden: int, d_raw: int, spatial_len: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_raw = d_raw
        self.spatial_len = spatial_len
        self.w1 = Tensor(_init_dense(rng, d_in, hidden))
        self.b1 = Tensor(np.zeros(hidden))
        self.w2 = Tensor(_init_dense(rng, hidden, d_raw * spatial_len))
        self.b2 = Tensor(np.zeros(d_raw * spatial_len))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"backbone expects B x {self.d_in} input, got {x.shape}")
        h = ad.relu(x @ self.w1 + self.b1)
        out = ad.relu(h @ self.w2 + self.b2)
        return out.reshape(x.shape[0], self.d_raw, self.spatial_len)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class GranularityTransitionLayer:
    """Per-position linear map, per-channel normalization, rectification."""

    def __init__(self, d_raw: int, d: int, rng: np.random.Generator):
        self.d_raw = d_raw
        self.d = d
        self.weight = Tensor(_init_dense(rng, d_raw, d))  # applied per spatial position
        self.bias = Tensor(np.zeros(d))
        self.gamma = Tensor(np.ones(d))
        self.beta = Tensor(np.zeros(d))
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def forward(self, features: Tensor, mode: str = "train") -> Tensor:
        if features.ndim != 3 or features.shape[1] != self.d_raw:
            raise DimensionError(f"GTL expects B x {self.d_raw} x L input, got {features.shape}")
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        z = features.transpose(1, 2) @ self.weight + self.bias  # B x L x d
        if mode == "train":
            m = z.mean(axis=(0, 1), keepdims=True)
            var = ((z - m) * (z - m)).mean(axis=(0, 1), keepdims=True)
            self.running_mean = (1.0 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * m.data.reshape(-1)
            self.running_var = (1.0 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var.data.reshape(-1)
        else:
            m = Tensor(self.running_mean.reshape(1, 1, -1))
            var = Tensor(self.running_var.reshape(1, 1, -1))
        normed = (z - m) / ad.tsqrt(var + BN_EPS)
        out = ad.relu(self.gamma * normed + self.beta)
        return out.transpose(1, 2)  # B x d x L

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias,
                f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}
