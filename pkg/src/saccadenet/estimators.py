"""Scikit-learn style estimators wrapping the pipeline models.

Each estimator keeps its constructor arguments verbatim (so ``get_params``
/ ``set_params`` / ``clone`` work), validates array inputs, and delegates
fitting to the seeded training harness. Images are numpy arrays of shape
(n, 3, s, s) with float pixels in [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .data import ImageRecord, build_saccade_targets
from .rollout import attention_rollout, cls_heat, fuse_heads, topk_indices
from .selector import predict_topk, selection_metrics, selector_forward
from .student import sanvit_forward
from .training import ExperimentConfig, PreparedData, targets_by_id, train
from .vit import vit_forward


def _check_images(X, image_size: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (n, 3, s, s), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y.astype(np.int64)


def _as_records(X: np.ndarray, y: np.ndarray | None) -> list[ImageRecord]:
    labels = y if y is not None else np.zeros(len(X), dtype=np.int64)
    return [ImageRecord(pixels=X[i], label=int(labels[i]), id=i) for i in range(len(X))]


def _split_records(records, val_fraction, rng):
    n_val = max(1, int(round(len(records) * val_fraction)))
    perm = rng.permutation(len(records))
    val_idx = set(perm[:n_val].tolist())
    train_recs = [r for i, r in enumerate(records) if i not in val_idx]
    val_recs = [r for i, r in enumerate(records) if i in val_idx]
    return train_recs, val_recs


class _FittedMixin:
    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")


class ViTClassifier(_FittedMixin, ClassifierMixin, BaseEstimator):
    """Full-attention vision transformer classifier (teacher / baseline)."""

    def __init__(self, patch_size=8, dim=64, depth=2, heads=2, mlp_ratio=4,
                 pe_mode="sinusoidal", dropout=0.0, lr=3e-4, batch_size=32,
                 max_epochs=30, early_stop_patience=10, val_fraction=0.1,
                 augment=False, seed=0):
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.pe_mode = pe_mode
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.augment = augment
        self.seed = seed

    def _experiment(self, image_size: int, num_classes: int) -> ExperimentConfig:
        return ExperimentConfig(
            model="teacher_vit", image_size=image_size, patch_size=self.patch_size,
            dim=self.dim, depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio,
            num_classes=num_classes, pe_mode=self.pe_mode, dropout=self.dropout,
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience, seed=self.seed,
            augment=self.augment, val_fraction=self.val_fraction,
        )

    def fit(self, X, y):
        X = _check_images(X)
        y = _check_labels(y, len(X))
        self.classes_ = np.unique(y)
        config = self._experiment(X.shape[2], int(self.classes_.max()) + 1)
        records = _as_records(X, y)
        from .rng import Rng

        train_recs, val_recs = _split_records(records, self.val_fraction, Rng(self.seed).child("split"))
        result = train(config, PreparedData(train=train_recs, val=val_recs, test=[]))
        self.params_ = result.params
        self.config_ = config.vit_config()
        self.history_ = result.history
        return self

    def decision_function(self, X):
        self._require_fitted()
        X = _check_images(X, self.config_.image_size)
        with ad.no_grad():
            logits, _ = vit_forward(X, self.params_, self.config_)
        return logits.data

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def attention_stacks(self, X):
        """Per-image post-softmax attention probabilities, (L, H, S, S) each."""
        self._require_fitted()
        X = _check_images(X, self.config_.image_size)
        with ad.no_grad():
            _, stacks = vit_forward(X, self.params_, self.config_)
        return stacks

    def saccade_targets(self, X, k: int):
        """Rollout-derived top-k patch indices for each image."""
        self._require_fitted()
        X = _check_images(X, self.config_.image_size)
        records = _as_records(X, None)
        return build_saccade_targets(self.params_, self.config_, records, k)


class AttentionRollout(TransformerMixin, BaseEstimator):
    """Stateless transform from attention stacks to per-patch heat vectors."""

    def __init__(self, head_fusion="mean"):
        self.head_fusion = head_fusion

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        """X is a sequence of (L, H, S, S) stacks; returns (n, N) heat rows."""
        return np.stack([
            cls_heat(attention_rollout(fuse_heads(stack, self.head_fusion))).heat
            for stack in X
        ])

    def topk(self, X, k: int) -> list[list[int]]:
        return [topk_indices(row, k) for row in self.transform(X)]


class PatchSelector(_FittedMixin, BaseEstimator):
    """Residual-CNN multi-label predictor of attended patches."""

    def __init__(self, stages=((32, 2), (64, 2), (128, 2)), k=8, lr=3e-4,
                 batch_size=32, max_epochs=10, early_stop_patience=10,
                 val_fraction=0.1, seed=0):
        self.stages = stages
        self.k = k
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, Y):
        """Y is the (n, N) multi-hot matrix of target patches."""
        X = _check_images(X)
        Y = np.asarray(Y)
        if Y.ndim != 2 or len(Y) != len(X):
            raise ValueError(f"expected multi-hot targets of shape (n, N), got {Y.shape}")
        n_patches = Y.shape[1]
        config = ExperimentConfig(
            model="selector", image_size=X.shape[2],
            patch_size=X.shape[2] // int(np.sqrt(n_patches)),
            selector_stages=tuple(self.stages), k=self.k, lr=self.lr,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience, seed=self.seed,
            val_fraction=self.val_fraction,
        )
        if config.selector_config().n_outputs != n_patches:
            raise ValueError(f"target width {n_patches} is not a square patch grid")
        records = _as_records(X, None)
        from .data import SaccadeRecord
        from .rng import Rng

        targets = {
            i: SaccadeRecord(image_id=i, label=0,
                             indices=tuple(int(j) for j in np.flatnonzero(Y[i] > 0.5)),
                             n_patches=n_patches)
            for i in range(len(X))
        }
        train_recs, val_recs = _split_records(records, self.val_fraction, Rng(self.seed).child("split"))
        result = train(config, PreparedData(train=train_recs, val=val_recs, test=[]),
                       targets=targets)
        self.params_ = result.params
        self.config_ = config.selector_config()
        self.history_ = result.history
        return self

    def decision_function(self, X):
        self._require_fitted()
        X = _check_images(X, self.config_.input_size)
        with ad.no_grad():
            logits = selector_forward(X, self.params_, self.config_)
        return logits.data

    def predict(self, X):
        """Multi-hot prediction at probability threshold 0.5."""
        return (self.decision_function(X) > 0.0).astype(np.int8)

    def predict_topk(self, X, k: int | None = None) -> list[list[int]]:
        k = self.k if k is None else k
        return [predict_topk(row, k) for row in self.decision_function(X)]

    def score(self, X, Y):
        """Mean per-patch accuracy at threshold 0.5."""
        return selection_metrics(self.decision_function(X), np.asarray(Y), self.k).per_patch_accuracy


class SaccadeViTClassifier(_FittedMixin, ClassifierMixin, BaseEstimator):
    """Reduced-attention student; attends only to k selected patches.

    ``selector`` is a fitted :class:`PatchSelector` (index_source 'san');
    alternatively pass per-image ground-truth ``indices`` to fit/predict
    (index_source 'ground_truth').
    """

    def __init__(self, selector=None, k=8, patch_size=8, dim=64, depth=2,
                 heads=2, mlp_ratio=4, pe_variant="sin_full_preslice",
                 dropout=0.0, lr=3e-4, batch_size=32, max_epochs=30,
                 early_stop_patience=10, val_fraction=0.1, augment=False, seed=0):
        self.selector = selector
        self.k = k
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.pe_variant = pe_variant
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.augment = augment
        self.seed = seed

    def _experiment(self, image_size: int, num_classes: int, index_source: str) -> ExperimentConfig:
        return ExperimentConfig(
            model="sanvit", image_size=image_size, patch_size=self.patch_size,
            dim=self.dim, depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio,
            num_classes=num_classes, dropout=self.dropout, k=self.k,
            pe_variant=self.pe_variant, index_source=index_source, lr=self.lr,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience, seed=self.seed,
            augment=self.augment, val_fraction=self.val_fraction,
        )

    def fit(self, X, y, indices=None):
        X = _check_images(X)
        y = _check_labels(y, len(X))
        self.classes_ = np.unique(y)
        index_source = "ground_truth" if indices is not None else "san"
        if index_source == "san":
            if self.selector is None:
                raise ValueError("either pass a fitted selector or ground-truth indices")
            self.selector._require_fitted()
        config = self._experiment(X.shape[2], int(self.classes_.max()) + 1, index_source)
        records = _as_records(X, y)
        targets = None
        selector = None
        if index_source == "ground_truth":
            targets = self._targets_from(indices, config)
        else:
            selector = (self.selector.params_, self.selector.config_)
        from .rng import Rng

        train_recs, val_recs = _split_records(records, self.val_fraction, Rng(self.seed).child("split"))
        result = train(config, PreparedData(train=train_recs, val=val_recs, test=[]),
                       targets=targets, selector=selector)
        self.params_ = result.params
        self.config_ = config.sanvit_config()
        self.history_ = result.history
        return self

    def _targets_from(self, indices, config: ExperimentConfig):
        from .data import SaccadeRecord

        n_patches = config.vit_config().n_patches
        return {
            i: SaccadeRecord(image_id=i, label=0,
                             indices=tuple(int(j) for j in sorted(row)),
                             n_patches=n_patches)
            for i, row in enumerate(indices)
        }

    def _resolve(self, X, indices):
        if indices is not None:
            idx = np.asarray(indices, dtype=np.intp)
            if idx.shape != (len(X), self.config_.k):
                raise ValueError(f"expected indices of shape ({len(X)}, {self.config_.k}), got {idx.shape}")
            return idx
        if self.selector is None:
            raise ValueError("no selector available; pass explicit indices")
        return np.asarray(self.selector.predict_topk(X, self.config_.k), dtype=np.intp)

    def decision_function(self, X, indices=None):
        self._require_fitted()
        X = _check_images(X, self.config_.base.image_size)
        idx = self._resolve(X, indices)
        with ad.no_grad():
            logits = sanvit_forward(X, idx, self.params_, self.config_)
        return logits.data

    def predict(self, X, indices=None):
        return self.decision_function(X, indices=indices).argmax(axis=1)
