"""Multi-view DLT triangulation with RANSAC over camera pairs."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .data import COCO_JOINTS, PoseSequence

DEFAULT_ITERATIONS = 100
DEFAULT_THRESHOLD_PX = 5.0
DEFAULT_MIN_CONFIDENCE = 0.3
_RANK_TOL = 1e-10


class TriangulationError(ValueError):
    pass


class InsufficientViewsError(TriangulationError):
    pass


class DegenerateGeometryError(TriangulationError):
    pass


class BehindCameraError(TriangulationError):
    pass


class TriangulationFailedError(TriangulationError):
    pass


@dataclass(frozen=True)
class Observation:
    camera_id: str
    point: tuple
    confidence: float = 1.0


@dataclass(frozen=True)
class TriangulationResult:
    point: np.ndarray
    inliers: frozenset
    mean_reprojection_error: float


def project(point, cam):
    """Pinhole projection of one 3D point (meters) to pixels."""
    pc = cam.R @ np.asarray(point, dtype=float) + cam.t
    if not pc[2] > 0:
        raise BehindCameraError(f"point is not in front of camera {cam.id}")
    uvw = cam.K @ pc
    return uvw[:2] / uvw[2]


def _dlt_rows(P, uv):
    # two rows per view: u*P3 - P1, v*P3 - P2, each scaled to unit norm
    rows = np.stack([uv[..., 0, None] * P[..., 2, :] - P[..., 0, :],
                     uv[..., 1, None] * P[..., 2, :] - P[..., 1, :]], axis=-2)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def _solve_homogeneous(A):
    """Least-squares null vectors of stacked systems A (..., 2n, 4); returns points and rank ratio."""
    _, s, vt = np.linalg.svd(A)
    X = vt[..., -1, :]
    ratio = s[..., 2] / s[..., 0]
    return X, ratio


def _dehomogenize(X):
    w = X[..., 3:4]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[..., :3] / w, np.abs(w[..., 0])


def triangulate_dlt(observations, cameras):
    """Linear triangulation of one point from >= 2 views in distinct cameras."""
    cams = _camera_map(cameras)
    ids = [o.camera_id for o in observations]
    if len(set(ids)) < 2:
        raise InsufficientViewsError("need observations from at least two distinct cameras")
    P = np.stack([cams[i].projection for i in ids])
    uv = np.array([o.point for o in observations], dtype=float)
    A = _dlt_rows(P, uv).reshape(-1, 4)
    X, ratio = _solve_homogeneous(A)
    point, w = _dehomogenize(X)
    if ratio < _RANK_TOL or not w > _RANK_TOL * np.abs(X).max() or not np.isfinite(point).all():
        raise DegenerateGeometryError("rays are (near) parallel; the DLT system is rank deficient")
    return point


def _camera_map(cameras):
    if isinstance(cameras, dict):
        return cameras
    return {c.id: c for c in cameras}


def _reprojection_errors(points, P, uv):
    """Pixel errors of points (H, 3) in views P (V, 3, 4) against uv (V, 2); inf when behind a camera."""
    Xh = np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)
    proj = np.einsum("vij,hj->hvi", P, Xh)
    depth = proj[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = proj[..., :2] / depth[..., None]
        err = np.linalg.norm(pix - uv[None], axis=-1)
    return np.where(depth > 0, err, np.inf)


def _ransac_core(P, uv, iterations, threshold, rng):
    """Best inlier mask and refit point for views P (V, 3, 4), observations uv (V, 2)."""
    V = P.shape[0]
    pairs = np.array(list(itertools.combinations(range(V), 2)))
    picks = np.unique(rng.integers(0, len(pairs), size=iterations))
    # a pair drawn twice yields the same hypothesis, so each distinct pair is solved once
    sampled = pairs[picks]
    rows = _dlt_rows(P[sampled], uv[sampled]).reshape(len(sampled), 4, 4)
    X, ratio = _solve_homogeneous(rows)
    pts, w = _dehomogenize(X)
    ok = (ratio >= _RANK_TOL) & (w > _RANK_TOL * np.abs(X).max(axis=-1)) & np.isfinite(pts).all(axis=-1)
    if not ok.any():
        raise TriangulationFailedError("every sampled pair is degenerate")
    pts = pts[ok]
    err = _reprojection_errors(pts, P, uv)
    inl = err <= threshold
    counts = inl.sum(axis=1)
    mean_err = np.where(counts > 0, np.where(inl, err, 0.0).sum(axis=1) / np.maximum(counts, 1), np.inf)
    # most inliers first, then lowest mean inlier error, then draw order
    best = np.lexsort((np.arange(len(counts)), mean_err, -counts))[0]
    if counts[best] < 2:
        raise TriangulationFailedError("no hypothesis reached two inliers")
    mask = inl[best]
    A = _dlt_rows(P[mask], uv[mask]).reshape(-1, 4)
    Xr, ratio_r = _solve_homogeneous(A)
    point, wr = _dehomogenize(Xr)
    if ratio_r < _RANK_TOL or not np.isfinite(point).all():
        point = pts[best]
    final_err = _reprojection_errors(point[None], P[mask], uv[mask])[0]
    return point, mask, float(final_err.mean())


def triangulate_ransac(observations, cameras, iterations=DEFAULT_ITERATIONS,
                       inlier_threshold=DEFAULT_THRESHOLD_PX, seed=0):
    """Sample view pairs, keep the hypothesis with the largest inlier set, refit on it."""
    cams = _camera_map(cameras)
    ids = [o.camera_id for o in observations]
    if len(observations) < 2 or len(set(ids)) < 2:
        raise InsufficientViewsError("need observations from at least two distinct cameras")
    P = np.stack([cams[i].projection for i in ids])
    uv = np.array([o.point for o in observations], dtype=float)
    rng = np.random.default_rng(seed)
    point, mask, err = _ransac_core(P, uv, iterations, inlier_threshold, rng)
    return TriangulationResult(point, frozenset(np.array(ids)[mask].tolist()), err)


def _interpolate_gaps(values, valid):
    """Linear interpolation of invalid frames from valid neighbors, holding edges."""
    idx = np.arange(len(valid))
    good = idx[valid]
    out = values.copy()
    for c in range(values.shape[1]):
        out[:, c] = np.interp(idx, good, values[valid, c])
    return out


def triangulate_sequence(trial, iterations=DEFAULT_ITERATIONS, threshold=DEFAULT_THRESHOLD_PX,
                         seed=0, min_confidence=DEFAULT_MIN_CONFIDENCE, return_stats=False):
    """Per-frame, per-joint RANSAC triangulation of a trial's 2D views into a 3D PoseSequence."""
    cam_ids = [c for c in trial.camera_ids if c in trial.poses_2d]
    if len(cam_ids) < 2:
        raise InsufficientViewsError(f"{trial.trial_id}: need at least two camera views, found {len(cam_ids)}")
    if any(p.normalized for p in trial.poses_2d.values()):
        raise ValueError("triangulation needs pixel keypoints, not normalized ones")
    P_all = np.stack([trial.camera(c).projection for c in cam_ids])
    uv_all = np.stack([trial.poses_2d[c].data for c in cam_ids], axis=2)  # (n, J, V, 2)
    conf_all = np.stack([trial.poses_2d[c].confidence for c in cam_ids], axis=2)  # (n, J, V)
    n, J = uv_all.shape[:2]
    points = np.zeros((n, J, 3))
    valid = np.zeros((n, J), dtype=bool)
    n_inliers = np.zeros((n, J), dtype=int)
    for f in range(n):
        for j in range(J):
            use = conf_all[f, j] >= min_confidence
            if use.sum() < 2:
                continue
            rng = np.random.default_rng([seed, f, j])
            try:
                pt, mask, _ = _ransac_core(P_all[use], uv_all[f, j, use], iterations, threshold, rng)
            except TriangulationError:
                continue
            points[f, j] = pt
            valid[f, j] = True
            n_inliers[f, j] = mask.sum()
    for j in range(J):
        if not valid[:, j].any():
            raise TriangulationFailedError(f"joint {COCO_JOINTS[j] if J == len(COCO_JOINTS) else j} "
                                           f"could not be triangulated in any frame")
        if not valid[:, j].all():
            points[:, j] = _interpolate_gaps(points[:, j], valid[:, j])
    seq = PoseSequence(points, trial.fps_video)
    if return_stats:
        return seq, {"valid": valid, "inliers": n_inliers}
    return seq


def fill_poses_3d(trial, **kwargs):
    return replace(trial, poses_3d=triangulate_sequence(trial, **kwargs))
