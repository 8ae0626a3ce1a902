"""scikit-learn style wrappers around the trainer.

:class:`VoxelDAReconstructor` fits the image-to-voxel network from arrays:
source images with ground-truth grids plus, for the adaptation methods,
unlabeled-in-3D target images.  :class:`PCAEmbedding` is the 2-D projection
used for the domain-overlap plots.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import metrics as M
from ._validation import check_images, check_labels, check_threshold, check_voxels
from .data import ArraySplit
from .model import NetworkConfig, load_checkpoint, save_checkpoint
from .trainer import (METHODS, TrainConfig, fit_arrays, method_weights, predict_domain_logits,
                      predict_latent, predict_voxels)


class VoxelDAReconstructor(BaseEstimator):
    """Single-view voxel reconstruction with optional unsupervised domain adaptation.

    Parameters
    ----------
    method : {"none", "dann", "coral", "mmd", "dann+class"}
        Loss preset.  ``w_*`` arguments override individual weights.
    threshold : float
        Occupancy threshold used by :meth:`predict` and :meth:`score`.
    random_state : int
        Seeds initialization and batch order.
    """

    def __init__(self, method="dann+class", epochs=30, batch_size=32, learning_rate=1e-3,
                 w_domain=None, w_class=None, w_coral=None, w_mmd=None, grl_lambda=1.0,
                 grl_schedule="ramp", latent_dim=128, latent_activation="l2", refiner=True,
                 threshold=M.DEFAULT_THRESHOLD, random_state=0):
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.w_domain = w_domain
        self.w_class = w_class
        self.w_coral = w_coral
        self.w_mmd = w_mmd
        self.grl_lambda = grl_lambda
        self.grl_schedule = grl_schedule
        self.latent_dim = latent_dim
        self.latent_activation = latent_activation
        self.refiner = refiner
        self.threshold = threshold
        self.random_state = random_state

    def _train_config(self, network: NetworkConfig) -> TrainConfig:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        weights = method_weights(self.method, self.grl_lambda, w_domain=self.w_domain, w_class=self.w_class,
                                 w_coral=self.w_coral, w_mmd=self.w_mmd)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate,
                           method=self.method, weights=weights, grl_mode=self.grl_schedule,
                           seed=self.random_state, threshold=check_threshold(self.threshold), network=network)

    def fit(self, X, y, classes=None, X_target=None, classes_target=None):
        """Fit on source images ``X`` with grids ``y``.

        ``classes`` are per-image class ids (needed by the voxel-class head).
        ``X_target``/``classes_target`` are target-domain images and class ids;
        no target grids are accepted.
        """
        X = check_images(X, "X")
        y = check_voxels(y, len(X), "y")
        labels = np.zeros(len(X), np.int64) if classes is None else check_labels(classes, len(X), "classes")
        n_classes = max(2, int(labels.max()) + 1)
        if classes_target is not None:
            n_classes = max(n_classes, int(np.max(classes_target)) + 1)

        target = None
        if X_target is not None:
            X_target = check_images(X_target, "X_target", X.shape[2])
            t_labels = (np.zeros(len(X_target), np.int64) if classes_target is None
                        else check_labels(classes_target, len(X_target), "classes_target"))
            target = ArraySplit(X_target, np.empty((0,), np.float32), t_labels,
                                np.arange(len(X_target)), np.zeros(len(X_target), np.int64), "target")

        network = NetworkConfig(image_size=X.shape[2], voxel_size=y.shape[1], num_classes=n_classes,
                                latent_dim=self.latent_dim, refiner_enabled=self.refiner,
                                latent_activation=self.latent_activation)
        cfg = self._train_config(network)
        if cfg.weights.w_class > 0 and classes is None:
            raise ValueError(f"method {self.method!r} uses the voxel-class head and needs `classes`")
        if cfg.weights.uses_target and target is None:
            raise ValueError(f"method {self.method!r} needs target-domain images (X_target)")
        source = ArraySplit(X, y, labels, np.arange(len(X)), np.zeros(len(X), np.int64), "source")
        self.params_, self.train_log_ = fit_arrays(source, target if cfg.weights.uses_target else None,
                                                   network, cfg)
        self.network_ = network
        self.n_classes_ = n_classes
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Occupancy probabilities, shape (n, V, V, V)."""
        check_is_fitted(self)
        X = check_images(X, "X", self.network_.image_size)
        return predict_voxels(self.params_, self.network_, X)

    def predict(self, X) -> np.ndarray:
        """Binary occupancy (``p > threshold``) as uint8."""
        return (self.predict_proba(X) > check_threshold(self.threshold)).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Latent features, shape (n, latent_dim)."""
        check_is_fitted(self)
        return predict_latent(self.params_, self.network_, check_images(X, "X", self.network_.image_size))

    def domain_logits(self, X) -> np.ndarray:
        """Domain-head logits (positive means target-like)."""
        check_is_fitted(self)
        return predict_domain_logits(self.params_, self.network_, check_images(X, "X", self.network_.image_size))

    def score(self, X, y) -> float:
        """Mean per-sample IoU at ``threshold``."""
        pred = self.predict_proba(X)
        y = check_voxels(y, len(pred), "y", self.network_.voxel_size)
        return float(M.batch_iou(pred, y, check_threshold(self.threshold)).mean())

    def save(self, path) -> None:
        check_is_fitted(self)
        save_checkpoint(path, self.network_, self.params_)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "VoxelDAReconstructor":
        network, model_params = load_checkpoint(path)
        est = cls(latent_dim=network.latent_dim, refiner=network.refiner_enabled,
                  latent_activation=network.latent_activation, **params)
        est.network_, est.params_ = network, model_params
        est.n_classes_ = network.num_classes
        return est


class PCAEmbedding(TransformerMixin, BaseEstimator):
    """Projection onto the top principal components (signs fixed deterministically)."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=3)
        _, comps, evals = M.pca_embed(X, self.n_components)
        self.mean_ = X.mean(axis=0)
        self.components_ = comps
        self.explained_variance_ = evals
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.mean_) @ self.components_.T
