"""Training losses: multi-granularity classification, prediction alignment,
and the feature-structuralization terms (disentanglement plus the three
cosine alignment constraints).

The three channel blocks have unequal widths, so wherever blocks are
compared with each other (the disentanglement term) each block is pooled
over its channel axis to a length-L spatial vector first.  The sibling and
specificity constraints use the same pooled per-class prototypes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_NORM, Tensor, cross_entropy, kl_divergence
from .errors import ValidationError
from .hierarchy import HierarchySpec
from .model import StructuredFeatures

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossCoefficients:
    """eps_fuse blends ground truth into the fused target; the lambdas weight
    the three alignment constraints inside the structuralization block."""

    eps_fuse: float = 0.7
    lambda_cs: float = 1.0
    lambda_cd: float = 1.0
    lambda_sp: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eps_fuse <= 1.0:
            raise ValidationError(f"eps_fuse must be in [0, 1], got {self.eps_fuse}")
        if min(self.lambda_cs, self.lambda_cd, self.lambda_sp) < 0:
            raise ValidationError("loss coefficients must be nonnegative")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def batch_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of CE against integer labels."""
    target = one_hot(labels, probs.shape[-1])
    return cross_entropy(Tensor(target), probs, axis=-1).mean()


def coarse_ce_loss(coarse_probs: Sequence[Tensor], coarse_labels: Sequence[np.ndarray]) -> Tensor:
    """Sum over coarse levels of the mean-over-batch cross entropy."""
    if len(coarse_probs) != len(coarse_labels):
        raise ValidationError(
            f"got {len(coarse_probs)} coarse prediction levels but {len(coarse_labels)} label levels")
    total = Tensor(0.0)
    for probs, labels in zip(coarse_probs, coarse_labels):
        total = total + batch_cross_entropy(probs, labels)
    return total


def lift_matrix(h: HierarchySpec, level: int) -> np.ndarray:
    """(K_level, K_fine) matrix spreading each coarse class's mass uniformly
    over its fine descendants."""
    labels = h.label_matrix()[:, level]
    out = np.zeros((h.class_counts[level], h.num_fine))
    for c in range(h.class_counts[level]):
        members = np.flatnonzero(labels == c)
        if members.size:
            out[c, members] = 1.0 / members.size
    return out


def prediction_alignment_loss(coarse_probs: Sequence[Tensor], fine_probs: Tensor,
                              fine_labels: np.ndarray, h: HierarchySpec,
                              eps_fuse: float) -> Tensor:
    """KL(eps*y_f + (1-eps)*mean of lifted coarse predictions || fine predictions).

    Coarse distributions are lifted to the fine class set by spreading each
    coarse class's mass uniformly over its descendants.  With a single level
    there is nothing to fuse and the loss is 0.
    """
    if not 0.0 <= eps_fuse <= 1.0:
        raise ValidationError(f"eps_fuse must be in [0, 1], got {eps_fuse}")
    if h.levels == 1:
        logger.info("prediction alignment skipped: single-granularity hierarchy")
        return Tensor(0.0)
    if len(coarse_probs) != h.levels - 1:
        raise ValidationError(f"need {h.levels - 1} coarse prediction levels, got {len(coarse_probs)}")
    for t in (*coarse_probs, fine_probs):
        sums = t.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6, rtol=0.0):
            raise ValidationError("prediction distribution does not sum to 1 within 1e-6")

    lifted_sum = None
    for g, probs in enumerate(coarse_probs, start=1):
        lifted = probs @ Tensor(lift_matrix(h, g))
        lifted_sum = lifted if lifted_sum is None else lifted_sum + lifted
    fused = (eps_fuse * Tensor(one_hot(fine_labels, h.num_fine))
             + (1.0 - eps_fuse) * (lifted_sum * (1.0 / (h.levels - 1))))
    return kl_divergence(fused, fine_probs, axis=-1).mean()


def _pool_channels(part: Tensor) -> Tensor:
    """Channel-mean of a B x d_part x L block: a length-L vector per sample."""
    return part.mean(axis=1)


def _gram_minus_identity_sum(stacked: Tensor) -> Tensor:
    """SUM of (cosine Gram - I) over a (..., n, L) stack of row vectors."""
    norms = ad.tsqrt((stacked * stacked).sum(axis=-1, keepdims=True))
    denom = norms @ norms.transpose(-1, -2) + EPS_NORM
    cos = (stacked @ stacked.transpose(-1, -2)) / denom
    n = stacked.shape[-2]
    matrices = int(np.prod(stacked.shape[:-2], dtype=np.int64)) if stacked.ndim > 2 else 1
    return cos.sum() - float(n * matrices)


def disentanglement_loss(parts_by_level: Sequence[StructuredFeatures]) -> Tensor:
    """Cross-block orthogonality: per sample and level, stack the three
    channel-pooled block vectors, take SUM(cosine Gram - I), average over
    batch and levels."""
    if not parts_by_level:
        raise ValidationError("no feature levels given")
    batch = parts_by_level[0].common.shape[0]
    levels = len(parts_by_level)
    total = Tensor(0.0)
    for parts in parts_by_level:
        stacked = ad.stack([_pool_channels(p) for p in parts.as_tuple()], axis=1)  # B x 3 x L
        total = total + _gram_minus_identity_sum(stacked)
    return total * (1.0 / (batch * levels))


def common_granularity_similarity(parts_by_level: Sequence[StructuredFeatures]) -> Tensor:
    """Mean cosine between the same sample's common block at adjacent levels."""
    levels = len(parts_by_level)
    if levels == 1:
        logger.info("common-granularity similarity skipped: single level")
        return Tensor(0.0)
    batch = parts_by_level[0].common.shape[0]
    total = Tensor(0.0)
    for g in range(levels - 1):
        a = parts_by_level[g].common.reshape(batch, -1)
        b = parts_by_level[g + 1].common.reshape(batch, -1)
        num = (a * b).sum(axis=1)
        den = ad.tsqrt((a * a).sum(axis=1)) * ad.tsqrt((b * b).sum(axis=1)) + EPS_NORM
        total = total + (num / den).mean()
    return total * (1.0 / (levels - 1))


def class_part_prototypes(parts_by_level: Sequence[StructuredFeatures],
                          labels: np.ndarray, part: str) -> list[dict[int, Tensor]]:
    """Per level, channel-pooled per-class mean vectors (length L) for one block.

    Classes absent from the batch are skipped.
    """
    protos: list[dict[int, Tensor]] = []
    for g, parts in enumerate(parts_by_level):
        pooled = _pool_channels(getattr(parts, part))  # B x L
        level: dict[int, Tensor] = {}
        for k in sorted(int(c) for c in np.unique(labels[:, g])):
            rows = np.flatnonzero(labels[:, g] == k)
            level[k] = pooled[rows].mean(axis=0)
        protos.append(level)
    return protos


def common_sibling_similarity(common_protos: Sequence[dict[int, Tensor]],
                              h: HierarchySpec) -> Tensor:
    """Cosine agreement between common prototypes of classes sharing a parent,
    normalized per level by the parent count and the child-class count."""
    if h.levels == 1:
        return Tensor(0.0)
    total = Tensor(0.0)
    for g in range(h.levels - 1):
        level_sum = Tensor(0.0)
        present = common_protos[g]
        for q in range(h.class_counts[g + 1]):
            siblings = [present[c] for c in h.children(g, q) if c in present]
            if len(siblings) < 2:
                continue
            level_sum = level_sum + _gram_minus_identity_sum(ad.stack(siblings, axis=0))
        total = total + level_sum * (1.0 / (h.class_counts[g + 1] * h.class_counts[g]))
    return total * (1.0 / (h.levels - 1))


def specific_divergence(specific_protos: Sequence[dict[int, Tensor]],
                        class_counts: Sequence[int]) -> Tensor:
    """Cosine spread of per-class specific prototypes, summed over all levels
    and normalized by each level's class count and by (G - 1)."""
    levels = len(specific_protos)
    if levels == 1:
        return Tensor(0.0)
    total = Tensor(0.0)
    for g in range(levels):
        protos = [specific_protos[g][k] for k in sorted(specific_protos[g])]
        if len(protos) < 2:
            continue
        total = total + _gram_minus_identity_sum(ad.stack(protos, axis=0)) * (1.0 / class_counts[g])
    return total * (1.0 / (levels - 1))


@dataclass
class LossBreakdown:
    """All objective components from one forward pass, plus their weighted total."""

    fine_ce: Tensor
    coarse_ce: Tensor
    alignment: Tensor
    dec: Tensor
    s_cs: Tensor
    s_cd: Tensor
    s_p: Tensor
    total: Tensor

    def history_row(self) -> dict[str, float]:
        return {
            "L_c": self.coarse_ce.item(),
            "L_lf": self.alignment.item(),
            "L_dec": self.dec.item(),
            "S_cs": self.s_cs.item(),
            "S_cd": self.s_cd.item(),
            "S_p": self.s_p.item(),
            "total": self.total.item(),
        }


def total_loss(fine_ce: Tensor, coarse_ce: Tensor, alignment: Tensor,
               dec: Tensor, s_cs: Tensor, s_cd: Tensor, s_p: Tensor,
               coeffs: LossCoefficients, enable_fs: bool = True) -> Tensor:
    """Fine CE + coarse CE + alignment, plus the structuralization block
    (dec - lambda_cs*S_cs - lambda_cd*S_cd + lambda_sp*S_p) when enabled."""
    total = fine_ce + coarse_ce + alignment
    if enable_fs:
        total = (total + dec
                 - coeffs.lambda_cs * s_cs
                 - coeffs.lambda_cd * s_cd
                 + coeffs.lambda_sp * s_p)
    return total


def compute_losses(probs_by_level: Sequence[Tensor],
                   parts_by_level: Sequence[StructuredFeatures],
                   labels: np.ndarray, h: HierarchySpec,
                   coeffs: LossCoefficients, enable_fs: bool = True) -> LossBreakdown:
    """Evaluate every objective component on one forward pass.

    With enable_fs=False the structuralization terms are neither computed nor
    included in the total (their breakdown entries are 0).
    """
    fine_ce = batch_cross_entropy(probs_by_level[0], labels[:, 0])
    coarse_ce = coarse_ce_loss(probs_by_level[1:], [labels[:, g] for g in range(1, h.levels)])
    alignment = prediction_alignment_loss(probs_by_level[1:], probs_by_level[0],
                                          labels[:, 0], h, coeffs.eps_fuse)
    if enable_fs:
        dec = disentanglement_loss(parts_by_level)
        s_cs = common_granularity_similarity(parts_by_level)
        s_cd = common_sibling_similarity(
            class_part_prototypes(parts_by_level, labels, "common"), h)
        s_p = specific_divergence(
            class_part_prototypes(parts_by_level, labels, "specific"), h.class_counts)
    else:
        dec = s_cs = s_cd = s_p = Tensor(0.0)
    total = total_loss(fine_ce, coarse_ce, alignment, dec, s_cs, s_cd, s_p,
                       coeffs, enable_fs=enable_fs)
    return LossBreakdown(fine_ce, coarse_ce, alignment, dec, s_cs, s_cd, s_p, total)
