"""Scikit-learn style estimator wrapping the training loop, so the model
composes with pipelines, grid search, and the usual fit/predict idiom.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .classifier import normalize_inference_weights, predict as argmax_predict
from .errors import ValidationError
from .hierarchy import HierarchySpec, build_hierarchy
from .losses import LossCoefficients
from .synthdata import Dataset
from .train import TrainConfig, evaluate, rebuild_network, train, weight_sweep


class CFSGClassifier(BaseEstimator, ClassifierMixin):
    """Multi-granularity classifier with structured feature/concept spaces.

    Parameters mirror the training configuration; `hierarchy` is a
    HierarchySpec (or its dict form) describing the label levels.  With
    hierarchy=None a flat single-level hierarchy is inferred from y, which
    disables the multi-granularity losses but keeps the partitioned
    classifier.  `y` passed to fit holds fine-level integer labels in
    [0, num_fine); coarse labels are derived from the hierarchy.
    """

    def __init__(self, hierarchy=None, epochs=30, batch_size=32, learning_rate=0.05,
                 momentum=0.9, eps_fuse=0.7, lambda_cs=1.0, lambda_cd=1.0, lambda_sp=1.0,
                 partition_ratio=(5, 3, 2), enable_fs=True, enable_cs=True,
                 dual_backbone=True, learnable_lam=False, use_subcentroid=False,
                 bank_momentum=0.9, d=20, d_raw=20, spatial_len=4, hidden=32,
                 lam=(1.0, 1.0, 1.0), seed=0):
        self.hierarchy = hierarchy
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.eps_fuse = eps_fuse
        self.lambda_cs = lambda_cs
        self.lambda_cd = lambda_cd
        self.lambda_sp = lambda_sp
        self.partition_ratio = partition_ratio
        self.enable_fs = enable_fs
        self.enable_cs = enable_cs
        self.dual_backbone = dual_backbone
        self.learnable_lam = learnable_lam
        self.use_subcentroid = use_subcentroid
        self.bank_momentum = bank_momentum
        self.d = d
        self.d_raw = d_raw
        self.spatial_len = spatial_len
        self.hidden = hidden
        self.lam = lam
        self.seed = seed

    def _resolve_hierarchy(self, y: np.ndarray) -> HierarchySpec:
        if isinstance(self.hierarchy, HierarchySpec):
            return self.hierarchy
        if isinstance(self.hierarchy, dict):
            return HierarchySpec.from_dict(self.hierarchy)
        if self.hierarchy is None:
            return build_hierarchy([int(y.max()) + 1], [])
        raise ValidationError(f"unsupported hierarchy value {type(self.hierarchy).__name__}")

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, momentum=self.momentum, seed=self.seed,
            coeffs=LossCoefficients(eps_fuse=self.eps_fuse, lambda_cs=self.lambda_cs,
                                    lambda_cd=self.lambda_cd, lambda_sp=self.lambda_sp),
            partition_ratio=tuple(self.partition_ratio),
            enable_fs=self.enable_fs, enable_cs=self.enable_cs,
            dual_backbone=self.dual_backbone, learnable_lam=self.learnable_lam,
            subcentroid_bank=self.use_subcentroid,
            bank_momentum=self.bank_momentum,
            d=self.d, d_raw=self.d_raw, spatial_len=self.spatial_len, hidden=self.hidden)

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValidationError(f"y must be 1-D with len(X) entries, got shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == y.astype(np.int64)):
                raise ValidationError("y must hold integer fine-class labels")
        y = y.astype(np.int64)
        h = self._resolve_hierarchy(y)
        if y.min() < 0 or y.max() >= h.num_fine:
            raise ValidationError(
                f"fine labels must lie in [0, {h.num_fine}), got [{y.min()}, {y.max()}]")
        dataset = Dataset(x=X, labels=h.label_matrix()[y], hierarchy=h)
        ckpt, history = train(self._train_config(), dataset)
        self.hierarchy_ = h
        self.checkpoint_ = ckpt
        self.history_ = history
        self.classes_ = np.arange(h.num_fine)
        self.n_features_in_ = X.shape[1]
        self._network = rebuild_network(ckpt)
        return self

    def _forward_eval(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {X.shape[1]} features, fit saw {self.n_features_in_}")
        lam = normalize_inference_weights(self.lam)
        with ad.no_grad():
            state = self._network.forward(X, mode="eval", lam=lam)
        return state, lam

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        state, lam = self._forward_eval(X)
        if self.use_subcentroid:
            if self.checkpoint_.bank is None:
                raise ValidationError("no sub-centroid bank was built during fit")
            return self.checkpoint_.bank.predict(state.pooled[0], lam=lam, level=0)
        return argmax_predict(state.logits[0])

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        state, _ = self._forward_eval(X)
        return state.probs[0].data

    def evaluate(self, X, y_levels, lam=None):
        """Per-level accuracy report against a full (n, G) label matrix."""
        check_is_fitted(self, "checkpoint_")
        dataset = Dataset(x=np.asarray(X, dtype=np.float64),
                          labels=np.asarray(y_levels, dtype=np.int64),
                          hierarchy=self.hierarchy_)
        return evaluate(self.checkpoint_, dataset,
                        lam=self.lam if lam is None else lam,
                        use_subcentroid=self.use_subcentroid)

    def sweep(self, X, y, step=0.05):
        """Inference-weight sweep on fine labels y; returns rows and the best row."""
        check_is_fitted(self, "checkpoint_")
        y = np.asarray(y, dtype=np.int64)
        dataset = Dataset(x=np.asarray(X, dtype=np.float64),
                          labels=self.hierarchy_.label_matrix()[y],
                          hierarchy=self.hierarchy_)
        return weight_sweep(self.checkpoint_, dataset, step=step)
