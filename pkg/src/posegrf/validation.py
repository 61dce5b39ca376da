"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_windows(X, joints, receptive_field=None, channels=None):
    """Return windows as a finite float64 array of shape (n, f, joints * C)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected windows of shape (n, f, J*C), got {X.shape}")
    if X.shape[-1] % joints:
        raise ValueError(f"feature width {X.shape[-1]} is not a multiple of {joints} joints")
    C = X.shape[-1] // joints
    if C not in (2, 3):
        raise ValueError(f"expected 2 or 3 channels per joint, got {C}")
    if channels is not None and C != channels:
        raise ValueError(f"model was fitted on {channels}-channel input, got {C}")
    if receptive_field is not None and X.shape[1] != receptive_field:
        raise ValueError(f"expected receptive field {receptive_field}, got windows of length {X.shape[1]}")
    return X


def check_force_targets(y, n):
    y = check_array(y, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if y.shape != (n, 6):
        raise ValueError(f"force targets must have shape ({n}, 6), got {y.shape}")
    return y


def check_pose_targets(P, n, joints):
    if P is None:
        return None
    P = check_array(P, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if P.shape != (n, joints, 3):
        raise ValueError(f"pose targets must have shape ({n}, {joints}, 3), got {P.shape}")
    return P
