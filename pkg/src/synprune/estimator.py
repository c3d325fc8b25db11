"""scikit-learn style wrapper: train with the strength penalty, prune, finetune."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import AugmentPolicy, Dataset
from .layers import Network, desknet_spec
from .pruning import apply_prune, make_plan
from .training import TrainConfig, finetune, train


def check_images(X, image_shape: tuple[int, ...] | None = None, dtype=np.float64) -> np.ndarray:
    """Coerce ``X`` to an (N, C, H, W) float array.

    Accepts (N, H, W) single-channel stacks, (N, C, H, W) arrays, or flat
    (N, D) rows together with ``image_shape`` of (C, H, W) or (H, W).
    """
    X = check_array(X, allow_nd=True, dtype=dtype)
    if X.ndim == 2:
        if image_shape is None:
            side = int(round(np.sqrt(X.shape[1])))
            if side * side != X.shape[1]:
                raise ValueError(f"cannot infer a square image from {X.shape[1]} features; "
                                 "pass image_shape")
            image_shape = (side, side)
        if int(np.prod(image_shape)) != X.shape[1]:
            raise ValueError(f"image_shape {image_shape} does not match {X.shape[1]} features")
        X = X.reshape(len(X), *image_shape)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected 2-, 3- or 4-d input, got {X.ndim}-d")
    return X


class SynapticPruningClassifier(ClassifierMixin, BaseEstimator):
    """DeskNet classifier trained with an L1 penalty on per-kernel strengths
    and then globally pruned to ``sparsity`` of its kernels.

    ``sparsity=0`` skips pruning.  ``validation_fraction > 0`` holds out the
    tail of the training data to pick the best epoch.
    """

    def __init__(self, lam=1e-3, sparsity=0.0, variant="synaptic", indicator="synaptic",
                 width=16, first_stride=1, lr=0.05, epochs=10, milestones=(5, 7), batch_size=32,
                 momentum=0.9, weight_decay=1e-4, finetune_epochs=None, crop_pad=0, flip_prob=0.0,
                 validation_fraction=0.0, image_shape=None, random_state=0):
        self.lam = lam
        self.sparsity = sparsity
        self.variant = variant
        self.indicator = indicator
        self.width = width
        self.first_stride = first_stride
        self.lr = lr
        self.epochs = epochs
        self.milestones = milestones
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.finetune_epochs = finetune_epochs
        self.crop_pad = crop_pad
        self.flip_prob = flip_prob
        self.validation_fraction = validation_fraction
        self.image_shape = image_shape
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        fix_gamma = self.variant in ("synaptic", "non_kernel_norm")
        kernel_norm = self.variant in ("synaptic", "non_fix_gamma")
        return TrainConfig(lam=self.lam, lr=self.lr, milestones=tuple(self.milestones), momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.random_state, fix_gamma=fix_gamma, kernel_norm=kernel_norm,
                           finetune_epochs=self.finetune_epochs)

    def _scale(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean_[None, :, None, None]) / self.std_[None, :, None, None]).astype(np.float32)

    def fit(self, X, y):
        X = check_images(X, self.image_shape)
        _, y = check_X_y(X.reshape(len(X), -1), y)
        check_classification_targets(y)
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must lie in [0, 1)")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.mean_ = X.mean(axis=(0, 2, 3))
        self.std_ = X.std(axis=(0, 2, 3))
        self.std_[self.std_ == 0] = 1.0
        Xs = self._scale(X)
        n_val = int(round(self.validation_fraction * len(Xs)))
        keep_best = n_val > 0
        if keep_best:
            xt, yt, xv, yv = Xs[:-n_val], y_idx[:-n_val], Xs[-n_val:], y_idx[-n_val:]
        else:
            xt, yt, xv, yv = Xs, y_idx, Xs, y_idx
        data = Dataset(xt, yt, xv, yv, self.mean_, self.std_, AugmentPolicy(self.flip_prob, self.crop_pad),
                       "array", len(self.classes_))
        cfg = self._train_config()
        spec = desknet_spec(X.shape[1], len(self.classes_), self.width, self.first_stride)
        net = Network(spec, self.variant, seed=self.random_state, dtype=cfg.dtype)
        net, self.history_ = train(net, data, cfg, keep_best=keep_best)
        self.plan_ = None
        if self.sparsity > 0:
            self.plan_ = make_plan(net, self.sparsity, self.indicator)
            _, self.accounting_ = apply_prune(net, self.plan_, X.shape[2:])
            net, self.finetune_history_ = finetune(net, data, cfg)
        self.network_ = net
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_images(X, self.image_shape)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        return self.network_.predict_logits(self._scale(X))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    @property
    def kernel_sparsity_(self) -> float:
        """Fraction of kernels currently pruned."""
        check_is_fitted(self, "network_")
        masks = list(self.network_.masks().values())
        total = sum(m.size for m in masks)
        return 1.0 - sum(int(m.sum()) for m in masks) / total

