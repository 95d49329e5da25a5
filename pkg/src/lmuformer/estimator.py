"""Scikit-learn style estimator facade over the sequence classifier.

Follows the usual conventions: constructor only stores hyperparameters,
fit() learns `model_` and `classes_`, predict()/predict_proba() require a
fitted estimator, and get_params/set_params come from BaseEstimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff
from . import model as model_mod
from . import numerics, training


class LMUFormerClassifier(BaseEstimator, ClassifierMixin):
    """Sequence classifier: conv patch embedding over time, LMU memory blocks,
    mean pooling, linear head. `spiking=True` swaps activations for LIF
    neurons and runs the merged spiking memory cell.

    X is (n_samples, T) or (n_samples, T, n_channels); y is any label array.
    """

    def __init__(self, channels: int = 32, order: int = 32,
                 theta: float | None = None, num_blocks: int = 1,
                 spiking: bool = False, epochs: int = 5, batch_size: int = 32,
                 lr: float = 1e-3, weight_decay: float = 0.0,
                 validation_fraction: float = 0.0, seed: int = 0,
                 verbose: bool = False):
        self.channels = channels
        self.order = order
        self.theta = theta
        self.num_blocks = num_blocks
        self.spiking = spiking
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.verbose = verbose

    def _check_X(self, X, fitted: bool) -> np.ndarray:
        X = np.asarray(X, dtype=numerics.default_dtype())
        if X.ndim == 2:
            X = X[:, :, None]
        if X.ndim != 3:
            raise ValueError(f"X must be (n_samples, T) or (n_samples, T, C); "
                             f"got ndim={X.ndim}")
        if X.shape[0] == 0 or X.shape[1] == 0:
            raise ValueError("X must contain at least one sample and one time step")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        if fitted:
            if X.shape[2] != self.n_features_in_:
                raise ValueError(f"X has {X.shape[2]} channels, expected "
                                 f"{self.n_features_in_}")
        return X

    def fit(self, X, y) -> "LMUFormerClassifier":
        X = self._check_X(X, fitted=False)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be one label per sample")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = int(X.shape[2])

        n, T = X.shape[0], X.shape[1]
        theta = float(self.theta) if self.theta is not None else float(T)
        cfg = model_mod.psmnist_config(
            spiking=self.spiking, channels=self.channels, order=self.order,
            num_blocks=self.num_blocks, theta=theta,
            input_channels=self.n_features_in_,
            num_classes=int(self.classes_.shape[0]))
        self.model_ = model_mod.build(cfg, numerics.RngSpec(self.seed))

        val = None
        train_X, train_y = X, y_idx
        if self.validation_fraction > 0.0:
            rng = numerics.RngSpec(self.seed + 1).generator()
            order = rng.permutation(n)
            n_val = max(1, int(round(self.validation_fraction * n)))
            val = (X[order[:n_val]], y_idx[order[:n_val]])
            train_X, train_y = X[order[n_val:]], y_idx[order[n_val:]]

        optim = training.OptimConfig(lr=self.lr, weight_decay=self.weight_decay)
        log = print if self.verbose else None
        self.history_ = training.train(
            self.model_, (train_X, train_y), optim, epochs=self.epochs,
            batch_size=self.batch_size, rng=numerics.RngSpec(self.seed),
            val_data=val, log=log)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_X(X, fitted=True)
        self.model_.training = False
        with autodiff.no_grad():
            return self.model_.forward(X, mode="eval").data

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
