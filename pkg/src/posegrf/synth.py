"""Synthetic trials with exact Newtonian force/pose consistency.

The center of mass (COM) moves vertically along a piecewise-polynomial path.
Contact segments are quintics matched in position, velocity and acceleration at
every knot, flight is an exact ballistic parabola, and the plate forces are
``m * (a + g)`` evaluated analytically at the force rate. A 17-joint skeleton
rides rigidly on the COM (only the arms and knees articulate) and is projected
into a ring of pinhole cameras.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import (
    NUM_JOINTS,
    CameraParameters,
    ForceSequence,
    PoseSequence,
    Subject,
    Trial,
    UNITS_NEWTON,
    canonical_movement,
)

GRAVITY = 9.81
STANDING_COM_HEIGHT = 1.0
SHEAR_RATIO = 0.05
IMAGE_SIZE = (1920.0, 1080.0)
FOCAL_PX = 1100.0
MIN_JUMP_DURATION = 1.5

# joint offsets from the COM in meters: x = subject's left, y = up, z = forward
_SKELETON = np.array([
    [0.00, 0.65, 0.10],   # nose
    [0.03, 0.68, 0.08],   # left_eye
    [-0.03, 0.68, 0.08],  # right_eye
    [0.07, 0.66, 0.00],   # left_ear
    [-0.07, 0.66, 0.00],  # right_ear
    [0.18, 0.45, 0.00],   # left_shoulder
    [-0.18, 0.45, 0.00],  # right_shoulder
    [0.21, 0.15, 0.00],   # left_elbow
    [-0.21, 0.15, 0.00],  # right_elbow
    [0.22, -0.10, 0.02],  # left_wrist
    [-0.22, -0.10, 0.02], # right_wrist
    [0.10, -0.05, 0.00],  # left_hip
    [-0.10, -0.05, 0.00], # right_hip
    [0.10, -0.50, 0.02],  # left_knee
    [-0.10, -0.50, 0.02], # right_knee
    [0.10, -0.92, 0.00],  # left_ankle
    [-0.10, -0.92, 0.00], # right_ankle
])
_ARM_JOINTS = (7, 8, 9, 10)
_KNEE_JOINTS = (13, 14)

_MOVEMENT_NAMES = {
    ("jump", "both"): "CMJ",
    ("jump", "left"): "SLJ_L",
    ("jump", "right"): "SLJ_R",
    ("squat", "both"): "Squat",
    ("squat", "left"): "SLS_L",
    ("squat", "right"): "SLS_R",
    ("standing", "both"): "Standing",
}


@dataclass(frozen=True)
class SynthSpec:
    movement: str = "jump"
    mass: float = 88.37
    duration: float = 2.0
    fps_video: float = 50.0
    fps_force: float = 600.0
    n_cameras: int = 8
    noise_px: float = 0.0
    seed: int = 0
    stance: str = "both"
    subject_id: Optional[str] = None
    trial_id: Optional[str] = None
    include_poses_3d: bool = True
    depth: float = 0.15

    def __post_init__(self):
        if self.movement not in ("jump", "squat", "standing"):
            raise ValueError(f"unknown synthetic movement {self.movement!r}")
        if self.stance not in ("both", "left", "right"):
            raise ValueError("stance must be 'both', 'left' or 'right'")
        if (self.movement, self.stance) not in _MOVEMENT_NAMES:
            raise ValueError(f"{self.movement} does not support stance {self.stance!r}")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.movement == "jump" and self.duration < MIN_JUMP_DURATION:
            raise ValueError(f"a jump needs duration >= {MIN_JUMP_DURATION} s")
        if not 0 < self.depth <= 0.2:
            raise ValueError("depth must be in (0, 0.2] m")
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be >= 1")
        if not self.mass > 0:
            raise ValueError("mass must be > 0")
        ratio = self.fps_force / self.fps_video
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("fps_force must be an integer multiple of fps_video")


def quintic(p0, v0, a0, p1, v1, a1, T):
    """Coefficients (highest power first, in local time) of the quintic meeting both boundary states."""
    A = np.array([
        [0, 0, 0, 0, 0, 1],
        [0, 0, 0, 0, 1, 0],
        [0, 0, 0, 2, 0, 0],
        [T**5, T**4, T**3, T**2, T, 1],
        [5 * T**4, 4 * T**3, 3 * T**2, 2 * T, 1, 0],
        [20 * T**3, 12 * T**2, 6 * T, 2, 0, 0],
    ])
    return np.linalg.solve(A, np.array([p0, v0, a0, p1, v1, a1], dtype=float))


class ComTrajectory:
    """Piecewise polynomial vertical COM path; each segment is (t0, t1, coeffs, in_flight)."""

    def __init__(self, segments):
        self.segments = segments
        self.knots = np.array([s[0] for s in segments] + [segments[-1][1]])

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return t, np.clip(idx, 0, len(self.segments) - 1)

    def _eval(self, t, order):
        t, idx = self._locate(t)
        out = np.empty_like(t)
        for i, (t0, _, coeffs, _) in enumerate(self.segments):
            m = idx == i
            if m.any():
                c = np.polyder(coeffs, order) if order else coeffs
                out[m] = np.polyval(c, t[m] - t0)
        return out

    def position(self, t):
        return self._eval(t, 0)

    def velocity(self, t):
        return self._eval(t, 1)

    def acceleration(self, t):
        return self._eval(t, 2)

    def in_flight(self, t):
        t, idx = self._locate(t)
        flags = np.array([s[3] for s in self.segments])
        return flags[idx]


def _const(y):
    return np.array([float(y)])


def com_trajectory(spec):
    D = spec.duration
    y0 = STANDING_COM_HEIGHT
    if spec.movement == "standing":
        return ComTrajectory([(0.0, D, _const(y0), False)])
    if spec.movement == "squat":
        t1, tb, t2 = 0.2 * D, 0.5 * D, 0.8 * D
        yb = y0 - spec.depth
        ab = 2.0 * spec.depth / (0.3 * D) ** 2
        return ComTrajectory([
            (0.0, t1, _const(y0), False),
            (t1, tb, quintic(y0, 0, 0, yb, 0, ab, tb - t1), False),
            (tb, t2, quintic(yb, 0, ab, y0, 0, 0, t2 - tb), False),
            (t2, D, _const(y0), False),
        ])
    # countermovement jump: dip, propulsion, ballistic flight, landing absorption, recovery
    phases = np.array([0.5, 0.3, 0.35, 0.3, 0.5])
    scale = min(1.0, (D - 0.2) / phases.sum())
    T_dip, T_prop, T_flight, T_land, T_rec = phases * scale
    t1 = 0.5 * (D - phases.sum() * scale)
    tb = t1 + T_dip
    t_off = tb + T_prop
    t_land = t_off + T_flight
    t_lb = t_land + T_land
    t_rec = t_lb + T_rec
    v_off = 0.5 * GRAVITY * T_flight
    y_off = y0 + 0.03
    yb = y0 - spec.depth
    ab = GRAVITY * (spec.depth / 0.15) / scale**2
    flight_coeffs = np.array([-0.5 * GRAVITY, v_off, y_off])
    return ComTrajectory([
        (0.0, t1, _const(y0), False),
        (t1, tb, quintic(y0, 0, 0, yb, 0, ab, T_dip), False),
        (tb, t_off, quintic(yb, 0, ab, y_off, v_off, -GRAVITY, T_prop), False),
        (t_off, t_land, flight_coeffs, True),
        (t_land, t_lb, quintic(y_off, -v_off, -GRAVITY, yb, 0, ab, T_land), False),
        (t_lb, t_rec, quintic(yb, 0, ab, y0, 0, 0, T_rec), False),
        (t_rec, D, _const(y0), False),
    ])


def plate_forces(spec, traj, t):
    """(n, 6) plate forces in newtons at times ``t``."""
    acc = traj.acceleration(t)
    total = spec.mass * (acc + GRAVITY)
    total = np.where(traj.in_flight(t), 0.0, total)
    F = np.zeros((len(t), 6))
    if spec.stance == "both":
        half = 0.5 * total
        F[:, 1] = half
        F[:, 4] = half
        F[:, 0] = SHEAR_RATIO * half
        F[:, 3] = -SHEAR_RATIO * half
    elif spec.stance == "left":
        F[:, 1] = total
    else:
        F[:, 4] = total
    return F


def skeleton(spec, traj, t):
    """(n, 17, 3) world joint positions at times ``t``."""
    com_y = traj.position(t)
    n = len(t)
    joints = np.broadcast_to(_SKELETON, (n, NUM_JOINTS, 3)).copy()
    joints[:, :, 1] += com_y[:, None]
    swing = 0.06 * np.sin(2.0 * np.pi * t / spec.duration + 0.5 * spec.seed)
    for j in _ARM_JOINTS:
        scale = 1.0 if j in (9, 10) else 0.5
        joints[:, j, 2] += scale * swing
    crouch = STANDING_COM_HEIGHT - com_y
    for j in _KNEE_JOINTS:
        joints[:, j, 2] += 0.6 * np.clip(crouch, 0.0, None)
    return joints


def look_at_camera(cam_id, position, target=(0.0, STANDING_COM_HEIGHT, 0.0), focal=FOCAL_PX,
                   image_size=IMAGE_SIZE):
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ position
    K = np.array([[focal, 0.0, image_size[0] / 2], [0.0, focal, image_size[1] / 2], [0.0, 0.0, 1.0]])
    return CameraParameters(cam_id, K, R, t)


def camera_ring(n, radius=4.5, height=1.3, phase=np.pi / 8):
    cams = []
    for k in range(n):
        ang = phase + 2.0 * np.pi * k / n
        pos = (radius * np.sin(ang), height, radius * np.cos(ang))
        cams.append(look_at_camera(f"cam{k}", pos))
    return cams


def project_points(points, cam):
    """Project (..., 3) world points to (..., 2) pixels without depth checks."""
    pc = points @ cam.R.T + cam.t
    uvw = pc @ cam.K.T
    return uvw[..., :2] / uvw[..., 2:3]


def generate_trial(spec):
    """Build a complete raw :class:`Trial` (newtons at the force rate, pixel keypoints)."""
    traj = com_trajectory(spec)
    block = int(round(spec.fps_force / spec.fps_video))
    n_video = int(round(spec.duration * spec.fps_video))
    n_force = n_video * block
    t_force = np.arange(n_force) / spec.fps_force
    # each video frame is timed at the center of its block of force samples
    t_video = (np.arange(n_video) * block + 0.5 * (block - 1)) / spec.fps_force
    forces = plate_forces(spec, traj, t_force)
    joints = skeleton(spec, traj, t_video)

    rng = np.random.default_rng(spec.seed)
    cameras = camera_ring(spec.n_cameras)
    poses_2d = {}
    for cam in cameras:
        uv = project_points(joints, cam)
        if spec.noise_px > 0:
            uv = uv + rng.normal(scale=spec.noise_px, size=uv.shape)
        conf = rng.uniform(0.8, 1.0, size=uv.shape[:2])
        poses_2d[cam.id] = PoseSequence(uv, spec.fps_video, confidence=conf)

    label = _MOVEMENT_NAMES[(spec.movement, spec.stance)]
    name, side = canonical_movement(label)
    subject_id = spec.subject_id or f"S{spec.seed}"
    return Trial(
        trial_id=spec.trial_id or f"{subject_id}_{label}_{spec.seed}",
        subject=Subject(subject_id, float(spec.mass)),
        movement=name,
        side=side,
        fps_video=float(spec.fps_video),
        cameras=tuple(cameras),
        poses_2d=poses_2d,
        poses_3d=PoseSequence(joints, spec.fps_video) if spec.include_poses_3d else None,
        forces=ForceSequence(forces, float(spec.fps_force), UNITS_NEWTON),
        image_size={c.id: IMAGE_SIZE for c in cameras},
    )


def corrupt_view(trial, camera_id, offset_px):
    """Shift every 2D observation of one view by a constant offset.

    A scalar offset is added to both x and y; a pair is taken as (dx, dy).
    """
    if camera_id not in trial.poses_2d:
        raise ValueError(f"unknown camera {camera_id!r}")
    offset = np.broadcast_to(np.asarray(offset_px, dtype=float), (2,))
    poses = dict(trial.poses_2d)
    p = poses[camera_id]
    poses[camera_id] = PoseSequence(p.data + offset, p.fps, p.confidence, p.normalized)
    return replace(trial, poses_2d=poses)


def generate_dataset(n_subjects=4, movements=("jump", "squat"), trials_per_movement=1,
                     duration=2.0, n_cameras=8, noise_px=0.0, seed=0, include_poses_3d=True):
    """Several subjects x movements with deterministic per-trial seeds and varied masses."""
    rng = np.random.default_rng(seed)
    masses = np.round(rng.normal(88.37, 12.42, size=n_subjects).clip(55.0, 130.0), 2)
    trials = []
    k = 0
    for s in range(n_subjects):
        for mv in movements:
            movement, stance = (mv.split(":") + ["both"])[:2]
            for r in range(trials_per_movement):
                spec = SynthSpec(
                    movement=movement,
                    stance=stance,
                    mass=float(masses[s]),
                    duration=duration,
                    n_cameras=n_cameras,
                    noise_px=noise_px,
                    seed=seed * 1000 + k,
                    subject_id=f"S{s + 1:02d}",
                    include_poses_3d=include_poses_3d,
                    depth=0.12 + 0.03 * ((s + r) % 3),
                )
                trials.append(generate_trial(spec))
                k += 1
    return trials
