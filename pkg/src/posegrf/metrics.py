"""Losses (gated-MSE, MPJPE, multi-task) and evaluation metrics (sequence RMSE, mean k-peaks)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import VERTICAL_CHANNELS

logger = logging.getLogger(__name__)

GATE_ABOVE = "above"
GATE_LITERAL = "literal"
DEFAULT_MIN_DISTANCE = 10
REPORT_K = (1, 3, 5)


class UndefinedMetricError(ValueError):
    pass


def threshold_sequence(n):
    """First ``n`` gate thresholds in N/kg: 0, 1, 5, 10, 15, ..."""
    seq = [0.0, 1.0]
    while len(seq) < n:
        seq.append(5.0 * (len(seq) - 1))
    return seq[:n]


@dataclass(frozen=True)
class GateSchedule:
    """Thresholds and weights of the gated-MSE.

    ``mode="above"`` keeps elements whose ground-truth magnitude is at or above
    each threshold (so T=1 is plain MSE). ``mode="literal"`` keeps elements
    strictly below it, which leaves the zero-threshold term empty.
    """

    T: int = 1
    deltas: tuple = None
    mode: str = GATE_ABOVE

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("gate schedule needs T >= 1")
        deltas = tuple(threshold_sequence(self.T)) if self.deltas is None else tuple(map(float, self.deltas))
        if len(deltas) < self.T:
            raise ValueError("gate schedule has fewer thresholds than T")
        if deltas[0] != 0.0 or any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("thresholds must start at 0 and be strictly ascending")
        if self.mode not in (GATE_ABOVE, GATE_LITERAL):
            raise ValueError(f"unknown gate mode {self.mode!r}")
        object.__setattr__(self, "deltas", deltas)

    @property
    def weights(self):
        return (1.0 / self.T,) * self.T

    def mask(self, gt, delta):
        mag = np.abs(gt)
        return mag >= delta if self.mode == GATE_ABOVE else mag < delta


def gated_mse(pred, gt, schedule=None):
    """Weighted sum of MSE terms, each over the elements passing one threshold gate."""
    schedule = schedule or GateSchedule()
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"gated_mse: prediction {pred.shape} vs target {gt.shape}")
    diff2 = T.square(pred - gt)
    total = None
    for delta, w in zip(schedule.deltas[: schedule.T], schedule.weights):
        mask = schedule.mask(gt, delta)
        count = int(mask.sum())
        if count == 0:
            logger.debug("gate %.1f N/kg is empty; term skipped", delta)
            continue
        if count == mask.size:
            term = T.mean(diff2)
        else:
            term = T.tsum(diff2 * mask.astype(float)) / float(count)
        term = term * w
        total = term if total is None else total + term
    if total is None:
        total = T.tsum(diff2) * 0.0
    return total


def mse(pred, gt):
    pred = T.as_tensor(pred)
    return T.mean(T.square(pred - np.asarray(gt, dtype=float)))


def mpjpe(pred, gt):
    """Mean Euclidean joint error over (..., J, 3) poses."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise T.ShapeError(f"mpjpe: prediction {pred.shape} vs target {gt.shape}")
    dist = T.sqrt(T.tsum(T.square(pred - gt), axis=-1))
    return T.mean(dist)


def multi_task_loss(l_force, l_pose, alpha=1.0):
    return T.add(l_force, T.mul(l_pose, float(alpha)))


def sequence_rmse(pred, gt):
    """sqrt of the frame-mean squared 6-vector error, both in newtons."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"sequence_rmse: shapes differ, {pred.shape} vs {gt.shape}")
    if pred.shape[0] == 0:
        raise ValueError("sequence_rmse: empty sequence")
    d = pred - gt
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def average_sequence_loss(per_video):
    """Mean over cameras within each video, then mean over videos."""
    if not per_video:
        raise ValueError("average_sequence_loss: no videos")
    video_means = []
    for video, cams in per_video.items():
        if not cams:
            raise ValueError(f"average_sequence_loss: video {video!r} has no cameras")
        video_means.append(float(np.mean(list(cams.values()))))
    return float(np.mean(video_means))


@dataclass(frozen=True)
class PeakSet:
    peaks: tuple  # ((frame, value), ...) by descending |value|
    k: int

    def __len__(self):
        return len(self.peaks)

    @property
    def frames(self):
        return [p[0] for p in self.peaks]


def local_extrema(signal):
    """Interior strict extrema; a plateau counts once at its leftmost index."""
    s = np.asarray(signal, dtype=float)
    n = len(s)
    if n < 3:
        return []
    change = np.flatnonzero(np.diff(s) != 0) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [n - 1]])
    out = []
    for i, j in zip(starts[1:-1], ends[1:-1]):
        v, left, right = s[i], s[i - 1], s[j + 1]
        if (v > left and v > right) or (v < left and v < right):
            out.append((int(i), float(v)))
    return out


def detect_peaks(signal, k, min_distance=DEFAULT_MIN_DISTANCE):
    """Top-``k`` extrema by absolute value, greedily kept at least ``min_distance`` frames apart."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cands = sorted(local_extrema(signal), key=lambda p: (-abs(p[1]), p[0]))
    kept = []
    for idx, val in cands:
        if all(abs(idx - j) >= min_distance for j, _ in kept):
            kept.append((idx, val))
            if len(kept) == k:
                break
    return PeakSet(tuple(kept), k)


def match_peaks(pred_signal, gt_signal, k, min_distance=DEFAULT_MIN_DISTANCE):
    """Pair each ground-truth peak with its nearest-in-time unmatched predicted peak.

    Returns a list of (gt_peak, pred_peak, distance); unmatched ground-truth peaks
    are paired with the predicted signal at the same frame.
    """
    pred_signal = np.asarray(pred_signal, dtype=float)
    gt_signal = np.asarray(gt_signal, dtype=float)
    if pred_signal.shape != gt_signal.shape:
        raise ValueError("mean_k_peaks: signals must have the same length")
    gt_peaks = detect_peaks(gt_signal, k, min_distance)
    if len(gt_peaks) == 0:
        raise UndefinedMetricError("ground-truth signal has no peaks")
    available = list(detect_peaks(pred_signal, k, min_distance).peaks)
    pairs = []
    for g_idx, g_val in gt_peaks.peaks:
        if available:
            best = min(range(len(available)), key=lambda i: (abs(available[i][0] - g_idx), i))
            p_idx, p_val = available.pop(best)
        else:
            p_idx, p_val = g_idx, float(pred_signal[g_idx])
        pairs.append(((g_idx, g_val), (p_idx, p_val), math.hypot(p_idx - g_idx, p_val - g_val)))
    return pairs


def mean_k_peaks(pred_signal, gt_signal, k, min_distance=DEFAULT_MIN_DISTANCE):
    """Mean of sqrt(dt^2 + dF^2) over matched peaks (dt in frames, dF in the signal's units)."""
    pairs = match_peaks(pred_signal, gt_signal, k, min_distance)
    return float(np.mean([d for _, _, d in pairs]))


def net_vertical(forces):
    """Summed vertical force of both plates, the signal used for peak metrics."""
    forces = np.asarray(forces, dtype=float)
    return forces[:, VERTICAL_CHANNELS[0]] + forces[:, VERTICAL_CHANNELS[1]]
