"""Scikit-learn style front end for the training-and-pruning pipeline.

``UsnPruningRegressor`` is a keypoint regressor: fit(X, y) trains the
default convolutional network under semantic perturbations with progressive
stability-guided channel pruning, predict(X) returns keypoint coordinates in
the caller's image pixel units. Hyperparameters follow sklearn conventions
(stored verbatim in __init__, learned state in trailing-underscore
attributes), so the estimator composes with clone/GridSearchCV/pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import spawn_rng
from .data import KeypointDataset, SceneParams
from .errors import ContractError
from .network import cnn_small
from .perturbation import PerturbationSpec
from .pruning import (LossWeights, PruningSchedule, TrainConfig, _target_scale, train)


class UsnPruningRegressor(BaseEstimator, RegressorMixin):
    """Keypoint regressor trained with stability-guided channel pruning.

    Parameters mirror the training configuration; see ``fit`` for the data
    contract. ``prune_rule`` selects importance-guided ("usn"), "random"
    (matched-count baseline), or "none" (no pruning).
    """

    def __init__(self, image_size=(32, 32), num_keypoints=8, heatmap_size=(12, 12),
                 conv_channels=(6, 12, 12, 12), conv_strides=(2, 2, 1, 1),
                 temperature=1.0, epochs=30, batch_size=64, learning_rate=0.01,
                 m_samples=4, rho=0.2, n_steps=8, t_start=4, t_interval=2,
                 lambda_u=1.0, lambda_s=1.0, lambda_w=10.0, prune_rule="usn",
                 perturb_kinds=("brightness", "contrast"),
                 perturb_epsilons=(1.0 / 255.0, 0.01), eps_usn=1e-8,
                 weight_decay=0.0, heatmap_loss_weight=2.0,
                 val_fraction=0.15, seed=0):
        self.image_size = image_size
        self.num_keypoints = num_keypoints
        self.heatmap_size = heatmap_size
        self.conv_channels = conv_channels
        self.conv_strides = conv_strides
        self.temperature = temperature
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.m_samples = m_samples
        self.rho = rho
        self.n_steps = n_steps
        self.t_start = t_start
        self.t_interval = t_interval
        self.lambda_u = lambda_u
        self.lambda_s = lambda_s
        self.lambda_w = lambda_w
        self.prune_rule = prune_rule
        self.perturb_kinds = perturb_kinds
        self.perturb_epsilons = perturb_epsilons
        self.eps_usn = eps_usn
        self.weight_decay = weight_decay
        self.heatmap_loss_weight = heatmap_loss_weight
        self.val_fraction = val_fraction
        self.seed = seed

    def _coerce_xy(self, X, y=None):
        h, w = self.image_size
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2 and X.shape[1] == h * w:
            X = X.reshape(-1, h, w)
        if X.ndim != 3 or X.shape[1:] != (h, w):
            raise ContractError(f"X must be (n, {h}, {w}) images or (n, {h * w}) flattened rows")
        if y is None:
            return X, None
        y = np.asarray(y, dtype=np.float64)
        k = self.num_keypoints
        if y.ndim == 2 and y.shape[1] == 2 * k:
            y = y.reshape(-1, k, 2)
        if y.shape != (X.shape[0], k, 2):
            raise ContractError(f"y must be (n, {k}, 2) keypoints or (n, {2 * k}) flattened rows")
        return X, y

    def build_config(self) -> TrainConfig:
        h, w = self.image_size
        layers = cnn_small(input_shape=(1, h, w), num_keypoints=self.num_keypoints,
                           heatmap_shape=tuple(self.heatmap_size),
                           conv_channels=tuple(self.conv_channels),
                           conv_strides=tuple(self.conv_strides),
                           temperature=self.temperature)
        t_end = self.t_start + self.n_steps * self.t_interval
        schedule = PruningSchedule(rho_final=self.rho, n_steps=self.n_steps,
                                   t_start=self.t_start, t_end=t_end,
                                   t_interval=self.t_interval)
        weights = LossWeights(lambda_u=self.lambda_u, lambda_s=self.lambda_s,
                              lambda_w=self.lambda_w, prune_layers=())
        perturbations = tuple(PerturbationSpec(kind=k, epsilon=e)
                              for k, e in zip(self.perturb_kinds, self.perturb_epsilons))
        return TrainConfig(layers=tuple(layers), input_shape=(1, h, w), epochs=self.epochs,
                           schedule=schedule, weights=weights, perturbations=perturbations,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           m_samples=self.m_samples, seed=self.seed, eps_usn=self.eps_usn,
                           weight_decay=self.weight_decay,
                           heatmap_loss_weight=self.heatmap_loss_weight,
                           prune_rule=self.prune_rule)

    def fit(self, X, y):
        """Train on images X of shape (n, H, W) (or flattened rows) and
        keypoints y of shape (n, K, 2) in image pixel units (row, col)."""
        X, y = self._coerce_xy(X, y)
        n = X.shape[0]
        n_val = max(1, int(round(self.val_fraction * n)))
        if n_val >= n:
            raise ContractError("not enough samples to split off a validation set")
        perm = spawn_rng(self.seed, "estimator-split").permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        dataset = KeypointDataset(
            train_images=X[train_idx], train_keypoints=y[train_idx],
            val_images=X[val_idx], val_keypoints=y[val_idx],
            test_images=X[val_idx][:1], test_keypoints=y[val_idx][:1],
            params=SceneParams(image_size=tuple(self.image_size),
                               num_keypoints=self.num_keypoints),
            seed=self.seed)
        config = self.build_config()
        result = train(config, dataset)
        self.network_ = result.network
        self.train_result_ = result
        self.best_epoch_ = result.best_epoch
        scale_r, scale_c = _target_scale(result.network)
        self.output_scale_ = (scale_r, scale_c)
        return self

    def predict(self, X):
        """Keypoints (n, 2K) in image pixel units, rows as (r0, c0, r1, c1, ...)."""
        check_is_fitted(self, "network_")
        X, _ = self._coerce_xy(X)
        out = self.network_.outputs(X).numpy()
        sr, sc = self.output_scale_
        out = out.reshape(out.shape[0], -1, 2) / np.array([sr, sc])
        return out.reshape(out.shape[0], -1)

    def score(self, X, y):
        """Negative mean squared keypoint error in image pixel units."""
        X, y = self._coerce_xy(X, y)
        pred = self.predict(X).reshape(X.shape[0], -1, 2)
        return -float(np.mean((pred - y) ** 2))
