"""scikit-learn compatible wrappers around the pipeline pieces.

``ImageClassifier`` trains one network on grayscale ``(n, H, W)`` arrays.
``SoftVotingClassifier`` averages fitted classifiers' probabilities.
``SliceExtractor`` and ``SliceResizer`` are stateless transformers usable in
a :class:`sklearn.pipeline.Pipeline`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .data import SliceSample, Z_HI, Z_LO, minmax_normalize, resize_bilinear, stratified_split
from .ensemble import fuse_average
from .errors import DimensionError
from .models import ModelConfig, build_model
from .trainer import TrainConfig, Trainer


def _as_images(X) -> np.ndarray:
    """Validate grayscale images as float64 N,H,W; a singleton channel axis is dropped."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise DimensionError(f"expected grayscale images shaped (n, H, W), got {X.shape}")
    return X


class ImageClassifier(ClassifierMixin, BaseEstimator):
    """Train a from-scratch network on grayscale image arrays.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`.  A
    stratified ``validation_fraction`` of the training data drives early
    stopping and the learning-rate schedule.  Images are replicated across
    ``channels`` input channels, as in the slice pipeline.
    """

    def __init__(self, family="custom_cnn", widths=(), dense_units=(64,), patch_size=8,
                 embed_dim=32, heads=2, depth=2, dropout=0.3, channels=3, epochs=10,
                 batch_size=32, lr=1e-4, early_stop_patience=5, augment=True,
                 validation_fraction=0.15, random_state=0):
        self.family = family
        self.widths = widths
        self.dense_units = dense_units
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.heads = heads
        self.depth = depth
        self.dropout = dropout
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _configs(self, shape, n_classes) -> tuple[ModelConfig, TrainConfig]:
        _, h, w = shape
        model_cfg = ModelConfig(
            family=self.family, input_size=(h, w, self.channels), num_classes=n_classes,
            widths=tuple(self.widths), dense_units=tuple(self.dense_units),
            patch_size=self.patch_size, embed_dim=self.embed_dim, heads=self.heads,
            depth=self.depth, dropout=self.dropout, seed=self.random_state).validate()
        train_cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            early_stop_patience=self.early_stop_patience, augment=self.augment,
            seed=self.random_state).validate()
        return model_cfg, train_cfg

    def fit(self, X, y):
        X = _as_images(X)
        _, y = check_X_y(X.reshape(len(X), -1), y)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes to fit")
        model_cfg, train_cfg = self._configs(X.shape, self.classes_.size)
        f = self.validation_fraction
        if not 0.0 < f < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {f}")
        samples = [SliceSample(img, int(lbl), "array", i)
                   for i, (img, lbl) in enumerate(zip(X, encoded))]
        # the held-out share is split in two halves only because the splitter is three-way
        split = stratified_split(samples, (1.0 - f, f / 2, f / 2), seed=self.random_state,
                                 num_classes=self.classes_.size)
        self.model_ = build_model(model_cfg)
        trainer = Trainer(self.model_, train_cfg)
        self.model_, self.history_ = trainer.fit(split.train, split.val + split.test)
        self.n_features_in_ = X[0].size
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _as_images(X)
        if X.shape[1:] != (self.model_.config.height, self.model_.config.width):
            raise DimensionError(
                f"fitted on {self.model_.config.input_size[:2]} images, got {X.shape[1:]}")
        X = np.repeat(X[:, None], self.channels, axis=1)
        out = []
        with ad.no_grad():
            for start in range(0, len(X), self.batch_size):
                out.append(self.model_.forward(X[start:start + self.batch_size], "infer").data)
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class SoftVotingClassifier(ClassifierMixin, BaseEstimator):
    """Weighted probability averaging over already fitted classifiers.

    All members must expose ``predict_proba`` and share ``classes_``.
    """

    def __init__(self, estimators, weights=None):
        self.estimators = estimators
        self.weights = weights

    def fit(self, X=None, y=None):
        if not self.estimators:
            raise ValueError("estimators must be a non-empty list of (name, classifier) pairs")
        names = [name for name, _ in self.estimators]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate estimator names: {names}")
        for name, est in self.estimators:
            check_is_fitted(est)
        classes = [np.asarray(est.classes_) for _, est in self.estimators]
        if any(not np.array_equal(c, classes[0]) for c in classes[1:]):
            raise ValueError("members disagree on classes_")
        self.classes_ = classes[0]
        # fuse in sorted-name order so member listing order does not matter
        self.order_ = sorted(range(len(names)), key=lambda i: names[i])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "classes_")
        probs = [self.estimators[i][1].predict_proba(X) for i in self.order_]
        weights = None if self.weights is None else [self.weights[i] for i in self.order_]
        return fuse_average(probs, weights)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class SliceExtractor(TransformerMixin, BaseEstimator):
    """Volumes (n, X, Y, Z) to normalized axial slices (n * (z_hi - z_lo + 1), X, Y)."""

    def __init__(self, z_lo=Z_LO, z_hi=Z_HI):
        self.z_lo = z_lo
        self.z_hi = z_hi

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise DimensionError(f"expected volumes shaped (n, X, Y, Z), got {X.shape}")
        self.n_features_in_ = X[0].size
        return self

    def transform(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise DimensionError(f"expected volumes shaped (n, X, Y, Z), got {X.shape}")
        if not 0 <= self.z_lo <= self.z_hi < X.shape[3]:
            raise DimensionError(
                f"slice range [{self.z_lo}, {self.z_hi}] outside depth {X.shape[3]}")
        zs = range(self.z_lo, self.z_hi + 1)
        return np.stack([minmax_normalize(vol[:, :, z]) for vol in X for z in zs])

    def expand_labels(self, y) -> np.ndarray:
        """Repeat per-volume labels to match :meth:`transform` output rows."""
        return np.repeat(np.asarray(y), self.z_hi - self.z_lo + 1)


class SliceResizer(TransformerMixin, BaseEstimator):
    """Bilinear resize of (n, H, W) images to ``size``."""

    def __init__(self, size=(32, 32)):
        self.size = size

    def fit(self, X, y=None):
        check_array(X, allow_nd=True, dtype=np.float64)
        return self

    def transform(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise DimensionError(f"expected images shaped (n, H, W), got {X.shape}")
        return np.stack([resize_bilinear(img, *self.size) for img in X])
