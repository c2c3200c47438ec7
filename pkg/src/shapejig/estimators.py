"""scikit-learn style wrappers around the diversifier and the jigsaw-trained classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .diversifier import DEFAULT_EPS, DiversifierConfig, DomainPool, adain_to_stats, array_stats, diversify_batch, interpolate
from .jigsaw import decompose, generate_permutation_set, recompose
from .model import predict_logits
from .synthdata import DatasetSplit, RecordSet
from .trainer import TrainConfig, train
from .validation import check_fraction, check_grid_divisible, check_images, check_labels, check_positive_int, check_seed


class AdaINTransformer(TransformerMixin, BaseEstimator):
    """Move each image's channel statistics toward those of the fitted style images.

    ``fit`` averages the per-channel mean and std of the style images;
    ``transform`` applies AdaIN to that target and blends with weight ``gamma``.
    """

    def __init__(self, gamma: float = 1.0, epsilon: float = DEFAULT_EPS):
        self.gamma = gamma
        self.epsilon = epsilon

    def fit(self, X, y=None):
        X = check_images(X)
        mu, sd = array_stats(X)
        self.style_mean_, self.style_std_ = mu.mean(axis=0), sd.mean(axis=0)
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "style_mean_")
        gamma = check_fraction(self.gamma, "gamma")
        X = check_images(X, channels=self.n_channels_)
        styled = adain_to_stats(X, self.style_mean_, self.style_std_, self.epsilon)
        return interpolate(X, styled, gamma)


class TileDiversifier(TransformerMixin, BaseEstimator):
    """Stochastic tile-wise domain shift of whole images.

    ``fit`` stores the style pool (images and optional domain ids). Each
    transformed image is split into ``grid_n`` x ``grid_n`` tiles and, with
    probability ``rho``, every tile is pushed toward a random pool exemplar
    by a factor drawn from ``[gamma_min, gamma_max]``. Tiles stay in place.
    """

    def __init__(self, rho: float = 0.5, gamma_min: float = 0.75, gamma_max: float = 1.0, grid_n: int = 3,
                 random_state: int | None = None):
        self.rho = rho
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.grid_n = grid_n
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X)
        domains = np.zeros(len(X), dtype=np.intp) if y is None else check_labels(y, len(X)).astype(np.intp)
        self.pool_ = DomainPool(X, domains)
        self.config_ = DiversifierConfig(self.rho, self.gamma_min, self.gamma_max, pool=self.pool_)
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "pool_")
        grid_n = check_positive_int(self.grid_n, "grid_n")
        X = check_images(X, channels=self.n_channels_)
        check_grid_divisible(X, grid_n)
        grids = [decompose(img, grid_n) for img in X]
        out, self.decisions_ = diversify_batch(grids, self.config_, check_seed(self.random_state))
        return np.stack([recompose(g) for g in out])


class ShapeJigsawClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained jointly with a diversified jigsaw pretext task.

    ``X`` is N x C x S x S with S divisible by ``grid_n``. ``style_pool``
    (images) supplies the texture exemplars; when omitted the training
    images themselves are used.
    """

    def __init__(self, alpha: float = 0.7, beta: float = 0.6, rho: float = 0.5, gamma_min: float = 0.75,
                 gamma_max: float = 1.0, epochs: int = 30, batch_size: int = 128, lr: float = 0.001,
                 momentum: float = 0.9, weight_decay: float = 5e-5, grid_n: int = 3, n_perms: int = 30,
                 conv_channels: tuple[int, ...] = (16, 32, 64), dtype: str = "float64", style_pool=None,
                 random_state: int | None = None):
        self.alpha = alpha
        self.beta = beta
        self.rho = rho
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grid_n = grid_n
        self.n_perms = n_perms
        self.conv_channels = conv_channels
        self.dtype = dtype
        self.style_pool = style_pool
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, beta=self.beta, rho=self.rho, gamma_min=self.gamma_min,
                           gamma_max=self.gamma_max, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, grid_n=self.grid_n,
                           n_perms=self.n_perms, conv_channels=tuple(self.conv_channels), dtype=self.dtype,
                           seed=check_seed(self.random_state))

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self._config()
        X = check_images(X, dtype=cfg.np_dtype)
        check_grid_divisible(X, cfg.grid_n)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg.n_classes = len(self.classes_)

        def records(images, labels):
            n = len(images)
            minus = np.full(n, -1, dtype=np.intp)
            return RecordSet(images, labels.astype(np.intp), minus, minus.copy(), np.arange(n, dtype=np.int64))

        val = None
        if X_val is not None:
            X_val = check_images(X_val, channels=X.shape[1], size=X.shape[2], dtype=cfg.np_dtype)
            y_val = check_labels(y_val, len(X_val), "y_val")
            unseen = np.setdiff1d(y_val, self.classes_)
            if unseen.size:
                raise ValueError(f"y_val contains classes absent from y: {unseen.tolist()}")
            val = records(X_val, np.searchsorted(self.classes_, y_val))
        pool_images = X if self.style_pool is None else check_images(self.style_pool, channels=X.shape[1])
        pool = DomainPool(pool_images, np.zeros(len(pool_images), dtype=np.intp), seed=cfg.seed)
        permset = generate_permutation_set(cfg.grid_n, cfg.n_perms, cfg.seed)
        result = train(cfg, data=DatasetSplit(records(X, y_idx), val), permset=permset, pool=pool)
        self.params_, self.spec_, self.permset_ = result.params, result.spec, result.permset
        self.metrics_ = result.metrics
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _logits(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, channels=self.spec_.in_channels, size=self.spec_.image_size)
        return predict_logits(self.params_, X, self.spec_)

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)[0]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def predict_permutation(self, X) -> np.ndarray:
        """Index into ``permset_`` of the tile arrangement the jigsaw head sees."""
        return self._logits(X)[1].argmax(axis=1)
