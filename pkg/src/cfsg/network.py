"""Full model assembly: backbone(s) -> per-level GTL -> partitioned features
-> structured per-level classifiers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import ClassifierHead, plain_logits, structured_logits
from .errors import ValidationError
from .hierarchy import HierarchySpec
from .model import (Backbone, GranularityTransitionLayer, PartitionSpec,
                    PooledParts, StructuredFeatures, disentangle_features,
                    pool_parts)


@dataclass
class ForwardState:
    """Everything one forward pass produces, per granularity level."""

    features: list[Tensor]            # B x d x L after each GTL
    parts: list[StructuredFeatures]   # channel blocks of each features entry
    pooled: list[PooledParts]         # spatial means of each block
    logits: list[Tensor]              # B x K_g
    probs: list[Tensor]               # softmax of logits


class CFSGNetwork:
    """Trainable multi-granularity model with partitioned feature/concept spaces."""

    def __init__(self, hierarchy: HierarchySpec, partition: PartitionSpec, d_in: int,
                 d_raw: int = 20, spatial_len: int = 4, hidden: int = 32,
                 dual_backbone: bool = True, learnable_lam: bool = False,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.hierarchy = hierarchy
        self.partition = partition
        self.d_in = d_in
        self.d_raw = d_raw
        self.spatial_len = spatial_len
        self.hidden = hidden
        self.dual_backbone = dual_backbone
        self.learnable_lam = learnable_lam

        # Initialization order is fixed so a given seed always produces the
        # same parameters: fine backbone, coarse backbone, GTLs, heads, lam.
        self.backbone_f = Backbone(d_in, hidden, d_raw, spatial_len, rng)
        self.backbone_c = (Backbone(d_in, hidden, d_raw, spatial_len, rng)
                           if dual_backbone else None)
        self.gtls = [GranularityTransitionLayer(d_raw, partition.d, rng)
                     for _ in range(hierarchy.levels)]
        self.heads = [ClassifierHead(k, partition, rng) for k in hierarchy.class_counts]
        self.lam_raw = Tensor(np.ones(3)) if learnable_lam else None

    def backbone_for_level(self, level: int) -> Backbone:
        if self.backbone_c is not None and level > 0:
            return self.backbone_c
        return self.backbone_f

    def train_lam(self):
        """Component weights used while training: all ones, or the learnable triple."""
        if self.lam_raw is None:
            return (1.0, 1.0, 1.0)
        return (self.lam_raw[0], self.lam_raw[1], self.lam_raw[2])

    def forward(self, x: np.ndarray, mode: str = "train", lam=None,
                enable_cs: bool = True) -> ForwardState:
        """Run the model on a batch.

        lam=None selects the training-time weights; pass an explicit triple
        for weighted inference.  With enable_cs=False the classifier ignores
        the partition and scores the concatenated feature directly.
        """
        xt = Tensor(x)
        if not np.all(np.isfinite(xt.data)):
            raise ValidationError("input batch contains non-finite values")
        if lam is None:
            lam = self.train_lam()

        features, parts, pooled, logits, probs = [], [], [], [], []
        raw_cache: dict[int, Tensor] = {}
        for g in range(self.hierarchy.levels):
            backbone = self.backbone_for_level(g)
            key = id(backbone)
            if key not in raw_cache:
                raw_cache[key] = backbone.forward(xt)
            f_g = self.gtls[g].forward(raw_cache[key], mode=mode)
            p_g = disentangle_features(f_g, self.partition)
            pool_g = pool_parts(p_g)
            if enable_cs:
                logit_g = structured_logits(pool_g, self.heads[g], lam)
            else:
                logit_g = plain_logits(f_g.mean(axis=2), self.heads[g])
            features.append(f_g)
            parts.append(p_g)
            pooled.append(pool_g)
            logits.append(logit_g)
            probs.append(ad.softmax(logit_g, axis=-1))
        return ForwardState(features, parts, pooled, logits, probs)

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.backbone_f.named_parameters("backbone_f"))
        if self.backbone_c is not None:
            params.update(self.backbone_c.named_parameters("backbone_c"))
        for g, gtl in enumerate(self.gtls):
            params.update(gtl.named_parameters(f"gtl{g}"))
        for g, head in enumerate(self.heads):
            params.update(head.named_parameters(f"classifier{g}"))
        if self.lam_raw is not None:
            params["inference_lam"] = self.lam_raw
        return params

    def named_state(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus normalization buffers (checkpoint content)."""
        state = {name: t.data for name, t in self.named_parameters().items()}
        for g, gtl in enumerate(self.gtls):
            state.update(gtl.named_buffers(f"gtl{g}"))
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, tensor in params.items():
            if name not in state:
                raise ValidationError(f"state is missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValidationError(f"tensor {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
            tensor.data = np.ascontiguousarray(arr)
        for g, gtl in enumerate(self.gtls):
            gtl.running_mean = np.asarray(state[f"gtl{g}.running_mean"], dtype=np.float64).copy()
            gtl.running_var = np.asarray(state[f"gtl{g}.running_var"], dtype=np.float64).copy()
