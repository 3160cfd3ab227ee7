"""Explainability diagnostics: concept-space similarity versus the label
hierarchy, and the neural-collapse statistics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import EPS_NORM
from .errors import DimensionError, ValidationError
from .hierarchy import HierarchySpec
from .model import PartitionSpec
from .rankstats import spearman_rho

BLOCKS = ("all", "common", "specific", "confounding")


def concept_similarity_matrix(weight: np.ndarray, block: str, p: PartitionSpec) -> np.ndarray:
    """K x K cosine similarities between class weight rows (or a block's columns)."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[1] != p.d:
        raise DimensionError(f"expected K x {p.d} weights, got {weight.shape}")
    if block not in BLOCKS:
        raise ValidationError(f"block must be one of {BLOCKS}, got {block!r}")
    rows = weight if block == "all" else weight[:, p.block(block)]
    norms = np.sqrt((rows * rows).sum(axis=1))
    if np.any(norms == 0.0):
        warnings.warn(f"zero-norm weight row in block {block!r}; cosine guarded by epsilon")
    denom = norms[:, None] * norms[None, :] + EPS_NORM
    return (rows @ rows.T) / denom


@dataclass
class SimilarityReport:
    """Cosine matrices per block, the hierarchy ground truth, and the Spearman
    correlation of each block's upper triangle against it."""

    matrices: dict[str, np.ndarray]
    ground_truth: np.ndarray
    rho: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "rho": {k: float(v) for k, v in self.rho.items()},
            "ground_truth": self.ground_truth.tolist(),
            "matrices": {k: m.tolist() for k, m in self.matrices.items()},
        }


def hierarchy_alignment(weight: np.ndarray, p: PartitionSpec, h: HierarchySpec) -> SimilarityReport:
    """Rank-correlate concept similarities with hierarchy similarities.

    Only the strict upper triangle enters the correlation: the diagonal is
    constant in both matrices and would distort the ranks.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape[0] != h.num_fine:
        raise ValidationError(
            f"weight matrix has {weight.shape[0]} rows, hierarchy has {h.num_fine} fine classes")
    gt = h.similarity_matrix()
    iu = np.triu_indices(h.num_fine, k=1)
    gt_vec = gt[iu].astype(np.float64)
    matrices = {b: concept_similarity_matrix(weight, b, p) for b in BLOCKS}
    rho = {b: spearman_rho(m[iu], gt_vec) for b, m in matrices.items()}
    return SimilarityReport(matrices=matrices, ground_truth=gt, rho=rho)


@dataclass
class NCReport:
    """Neural-collapse statistics.

    nc1: within-class / between-class scatter trace ratio (nan if the
         between-class scatter is degenerate).
    nc2: coefficient of variation of the centered class-mean norms.
    nc3: per-class cosine between classifier row and class feature mean.
    """

    nc1: float
    nc2: float
    nc3: np.ndarray

    def to_dict(self) -> dict:
        return {"nc1": float(self.nc1), "nc2": float(self.nc2),
                "nc3": [float(v) for v in self.nc3]}


def nc_diagnostics(features_by_class, weight: np.ndarray) -> NCReport:
    """Compute NC1-NC3 from per-class feature arrays and classifier rows.

    `features_by_class` is a sequence (index = class id) of (n_i, D) arrays.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in features_by_class]
    groups = [g.reshape(-1, g.shape[-1]) if g.ndim > 1 else g.reshape(1, -1) for g in groups]
    weight = np.asarray(weight, dtype=np.float64)
    if len(groups) < 2:
        raise ValidationError(f"need at least 2 classes, got {len(groups)}")
    total = sum(g.shape[0] for g in groups)
    if total < 2:
        raise ValidationError("need at least 2 samples overall")
    if weight.shape[0] != len(groups):
        raise DimensionError(
            f"weight matrix has {weight.shape[0]} rows for {len(groups)} classes")

    means = np.stack([g.mean(axis=0) for g in groups])
    global_mean = np.concatenate(groups, axis=0).mean(axis=0)

    within = sum(float(((g - mu) ** 2).sum()) for g, mu in zip(groups, means)) / total
    centered = means - global_mean
    between = float((centered ** 2).sum()) / len(groups)
    nc1 = within / between if between > 0.0 else float("nan")

    norms = np.sqrt((centered ** 2).sum(axis=1))
    mean_norm = norms.mean()
    nc2 = float(norms.std() / mean_norm) if mean_norm > 0.0 else float("nan")

    w_norms = np.sqrt((weight ** 2).sum(axis=1))
    m_norms = np.sqrt((means ** 2).sum(axis=1))
    nc3 = (weight * means).sum(axis=1) / (w_norms * m_norms + EPS_NORM)
    return NCReport(nc1=nc1, nc2=nc2, nc3=nc3)


def pairs_table(report: SimilarityReport) -> list[dict]:
    """One row per unordered class pair: ground truth and per-block cosines."""
    k = report.ground_truth.shape[0]
    rows = []
    for i in range(k):
        for j in range(i + 1, k):
            rows.append({
                "i": i, "j": j,
                "gt_sim": int(report.ground_truth[i, j]),
                "cos_all": float(report.matrices["all"][i, j]),
                "cos_c": float(report.matrices["common"][i, j]),
                "cos_p": float(report.matrices["specific"][i, j]),
                "cos_n": float(report.matrices["confounding"][i, j]),
            })
    return rows
