"""Naive force predictors: per-movement exemplar curves and Newton's second law on ankle kinematics."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import LEFT_ANKLE, LEFT_HIP, RIGHT_ANKLE, RIGHT_HIP, ForceSequence, UNITS_NEWTON, align_trial
from .synth import GRAVITY

PROXIES = {"ankle_mid": (LEFT_ANKLE, RIGHT_ANKLE), "hip_mid": (LEFT_HIP, RIGHT_HIP)}


def time_normalize(curve, n):
    """Linearly resample (m, c) to (n, c) over normalized time [0, 1]."""
    curve = np.asarray(curve, dtype=float)
    m = curve.shape[0]
    if m == 1:
        return np.repeat(curve, n, axis=0)
    src = np.linspace(0.0, 1.0, m)
    dst = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(dst, src, curve[:, c]) for c in range(curve.shape[1])], axis=1)


class ExemplarBaseline(BaseEstimator):
    """Predicts the class-average force curve, stretched to the query trial's length."""

    def __init__(self, n_samples=100):
        self.n_samples = n_samples

    def fit(self, trials, y=None):
        if not trials:
            raise ValueError("exemplar baseline needs training trials")
        groups = {}
        for trial in trials:
            trial = align_trial(trial)
            groups.setdefault(trial.label, []).append(time_normalize(trial.forces.data, self.n_samples))
        self.exemplars_ = {label: np.mean(curves, axis=0) for label, curves in sorted(groups.items())}
        return self

    def exemplar(self, label):
        if label not in self.exemplars_:
            raise KeyError(f"no exemplar for movement {label!r}; seen {sorted(self.exemplars_)}")
        return self.exemplars_[label]

    def eval_views(self, trial):
        return list(trial.camera_ids)

    def predict_trial(self, trial, view=None):
        """(n, 6) N/kg; identical for every view of the trial."""
        return time_normalize(self.exemplar(trial.label), trial.n_frames)

    def predict(self, trials):
        return [self.predict_trial(align_trial(t)) for t in trials]


def moving_average(x, window):
    """Centered moving average along axis 0 with edge replication; window 1 is the identity."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd integer")
    if window == 1:
        return np.array(x, dtype=float)
    half = window // 2
    padded = np.concatenate([np.repeat(x[:1], half, axis=0), x, np.repeat(x[-1:], half, axis=0)])
    csum = np.cumsum(np.concatenate([np.zeros((1,) + x.shape[1:]), padded]), axis=0)
    return (csum[window:] - csum[:-window]) / window


def second_difference(x, fps):
    """Central second differences scaled by fps^2; end frames copy their neighbours."""
    a = np.empty_like(x)
    a[1:-1] = (x[2:] - 2.0 * x[1:-1] + x[:-2]) * fps * fps
    a[0], a[-1] = a[1], a[-2]
    return a


class NewtonBaseline(BaseEstimator):
    """Total force m (a + g) from the acceleration of a body proxy, split equally between plates."""

    def __init__(self, smoothing=5, gravity=GRAVITY, proxy="ankle_mid"):
        self.smoothing = smoothing
        self.gravity = gravity
        self.proxy = proxy

    def fit(self, trials=None, y=None):
        if self.proxy not in PROXIES:
            raise ValueError(f"unknown proxy {self.proxy!r}; expected one of {sorted(PROXIES)}")
        return self

    def estimate(self, poses_3d, mass, fps):
        """(n, 6) newtons from (n, J, 3) world positions (meters, +y up)."""
        poses_3d = np.asarray(poses_3d, dtype=float)
        n = poses_3d.shape[0]
        if n < max(5, self.smoothing):
            raise ValueError(f"Newton baseline needs at least 5 frames, got {n}")
        a_idx, b_idx = PROXIES[self.proxy]
        proxy = 0.5 * (poses_3d[:, a_idx] + poses_3d[:, b_idx])
        acc = second_difference(moving_average(proxy, self.smoothing), fps)
        total = mass * (acc + np.array([0.0, self.gravity, 0.0]))
        return np.concatenate([0.5 * total, 0.5 * total], axis=1)

    def estimate_trial(self, trial):
        if trial.poses_3d is None:
            raise ValueError(f"{trial.trial_id}: Newton baseline needs 3D poses; triangulate first")
        data = self.estimate(trial.poses_3d.data, trial.subject.mass, trial.fps_video)
        return ForceSequence(data, trial.fps_video, UNITS_NEWTON)

    def eval_views(self, trial):
        return ["3d"]

    def predict_trial(self, trial, view="3d"):
        """(n, 6) N/kg."""
        return self.estimate_trial(trial).data / trial.subject.mass

    def predict(self, trials):
        return [self.predict_trial(align_trial(t)) for t in trials]
