"""scikit-learn style wrapper around the transformer force regressor."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import NUM_JOINTS
from .model import ModelConfig, predict
from .training import ModelPredictor, TrainConfig, WindowSet, build_windows, fit_windows
from .validation import check_force_targets, check_pose_targets, check_windows


class GRFRegressor(RegressorMixin, BaseEstimator):
    """Windows of 2D (or 3D) keypoints in, centre-frame 6-channel force in N/kg out.

    ``fit`` accepts optional 3D pose targets, which the ``mtl`` and
    ``pretrain_finetune`` strategies require.
    """

    def __init__(self, strategy="scratch", receptive_field=81, embed_dim=32, num_heads=8, depth=4,
                 mlp_ratio=2.0, joints=NUM_JOINTS, lr=4e-4, decay=0.99, epochs=50, batch_size=512,
                 alpha=1.0, gate_T=1, gate_mode="above", flip_prob=0.5, pretrain_lr=4e-6,
                 pretrain_epochs=100, max_steps=None, seed=0):
        self.strategy = strategy
        self.receptive_field = receptive_field
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.depth = depth
        self.mlp_ratio = mlp_ratio
        self.joints = joints
        self.lr = lr
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.gate_T = gate_T
        self.gate_mode = gate_mode
        self.flip_prob = flip_prob
        self.pretrain_lr = pretrain_lr
        self.pretrain_epochs = pretrain_epochs
        self.max_steps = max_steps
        self.seed = seed

    def model_config(self, channels=2):
        return ModelConfig(joints=self.joints, channels=channels, receptive_field=self.receptive_field,
                           embed_dim=self.embed_dim, num_heads=self.num_heads, depth=self.depth,
                           mlp_ratio=self.mlp_ratio)

    def train_config(self):
        return TrainConfig(strategy=self.strategy, lr=self.lr, decay=self.decay, epochs=self.epochs,
                           batch_size=self.batch_size, alpha=self.alpha, gate_T=self.gate_T,
                           gate_mode=self.gate_mode, seed=self.seed, flip_prob=self.flip_prob,
                           pretrain_lr=self.pretrain_lr, pretrain_epochs=self.pretrain_epochs,
                           max_steps=self.max_steps)

    def fit(self, X, y, pose3d=None, trial_ids=None):
        X = check_windows(X, self.joints, self.receptive_field)
        y = check_force_targets(y, X.shape[0])
        pose3d = check_pose_targets(pose3d, X.shape[0], self.joints)
        channels = X.shape[-1] // self.joints
        if trial_ids is None:
            trial_ids = np.full(X.shape[0], "window", dtype=object)
        data = WindowSet(X.copy(), y.copy(), None if pose3d is None else pose3d.copy(),
                         np.asarray(trial_ids, dtype=object), channels)
        return self._fit_data(data)

    def fit_trials(self, trials, channels=2):
        """Fit on every view of the given trials (aligned on the fly)."""
        return self._fit_data(build_windows(trials, self.receptive_field, channels))

    def _fit_data(self, data):
        cfg = self.model_config(data.channels)
        self.params_, self.history_ = fit_windows(data, cfg, self.train_config())
        self.model_config_ = cfg
        self.n_features_in_ = data.X.shape[-1]
        return self

    @classmethod
    def from_params(cls, params, model_cfg, **kwargs):
        """Wrap already-trained parameters (e.g. loaded from a checkpoint)."""
        est = cls(receptive_field=model_cfg.receptive_field, embed_dim=model_cfg.embed_dim,
                  num_heads=model_cfg.num_heads, depth=model_cfg.depth, mlp_ratio=model_cfg.mlp_ratio,
                  joints=model_cfg.joints, **kwargs)
        est.params_ = params
        est.model_config_ = model_cfg
        est.n_features_in_ = model_cfg.input_dim
        return est

    def predict(self, X):
        check_is_fitted(self, "params_")
        cfg = self.model_config_
        X = check_windows(X, cfg.joints, cfg.receptive_field, cfg.channels)
        return predict(self.params_, cfg, X, "force")

    def predict_pose(self, X):
        check_is_fitted(self, "params_")
        cfg = self.model_config_
        if "head.pose.weight" not in self.params_:
            raise ValueError("this model has no pose head")
        X = check_windows(X, cfg.joints, cfg.receptive_field, cfg.channels)
        return predict(self.params_, cfg, X, "pose3d")

    # predictor protocol used by training.evaluate
    def eval_views(self, trial):
        check_is_fitted(self, "params_")
        return ModelPredictor(self.params_, self.model_config_).eval_views(trial)

    def predict_trial(self, trial, view):
        check_is_fitted(self, "params_")
        return ModelPredictor(self.params_, self.model_config_).predict_trial(trial, view)
