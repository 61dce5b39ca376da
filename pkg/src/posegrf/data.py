"""Trial records, JSON I/O, rate alignment, normalization and windowing."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

COCO_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
NUM_JOINTS = len(COCO_JOINTS)
FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))
LEFT_HIP, RIGHT_HIP = 11, 12
LEFT_ANKLE, RIGHT_ANKLE = 15, 16


def _flip_index():
    idx = list(range(NUM_JOINTS))
    for a, b in FLIP_PAIRS:
        idx[a], idx[b] = b, a
    return np.array(idx)


FLIP_INDEX = _flip_index()

# channel order [Fx1, Fy1, Fz1, Fx2, Fy2, Fz2]; flip swaps plates and negates lateral shear
FORCE_FLIP_INDEX = np.array([3, 4, 5, 0, 1, 2])
FORCE_FLIP_SIGN = np.array([-1.0, 1.0, 1.0, -1.0, 1.0, 1.0])
VERTICAL_CHANNELS = (1, 4)

MOVEMENTS = ("CMJ", "SquatJump", "Squat", "SLS", "SLJ")
SIDED_MOVEMENTS = ("SLS", "SLJ")
_MOVEMENT_ALIASES = {
    "cmj": "CMJ",
    "countermovementjump": "CMJ",
    "squatjump": "SquatJump",
    "sj": "SquatJump",
    "squat": "Squat",
    "squats": "Squat",
    "sls": "SLS",
    "singlelegsquat": "SLS",
    "slj": "SLJ",
    "singlelegjump": "SLJ",
}

UNITS_NEWTON = "N"
UNITS_PER_KG = "N/kg"


class TrialSchemaError(ValueError):
    """A trial file or record violates the expected schema."""


class AlignmentError(ValueError):
    """Pose and force streams cannot be put on a common frame grid."""


def canonical_movement(label):
    """Split a movement label into (canonical name, side or None).

    Known ForcePose names are canonicalized; anything else passes through.

    >>> canonical_movement("single leg jump (R)")
    ('SLJ', 'R')
    """
    text = label.strip()
    side = None
    m = re.search(r"[\s_\-(]+(l|r|left|right)\)?$", text, flags=re.IGNORECASE)
    if m:
        side = m.group(1)[0].upper()
        text = text[: m.start()]
    key = re.sub(r"[\s_\-]", "", text).lower()
    name = _MOVEMENT_ALIASES.get(key)
    if name in SIDED_MOVEMENTS:
        return name, side
    if name is not None:
        return name, None
    return label.strip(), None


def movement_label(name, side):
    return f"{name}_{side}" if side else name


@dataclass(frozen=True)
class Subject:
    id: str
    mass: float

    def __post_init__(self):
        if not self.mass > 0:
            raise TrialSchemaError("subject.mass_kg: must be > 0")


@dataclass(frozen=True, eq=False)
class CameraParameters:
    id: str
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(-1)
        if K.shape != (3, 3) or R.shape != (3, 3) or t.shape != (3,):
            raise TrialSchemaError(f"cameras[{self.id}]: K and R must be 3x3 and t a 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise TrialSchemaError(f"cameras[{self.id}].R: not orthonormal")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or not (K[0, 0] > 0 and K[1, 1] > 0):
            raise TrialSchemaError(
                f"cameras[{self.id}].K: must be upper-triangular with positive focal lengths"
            )
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def projection(self):
        """3x4 matrix K [R | t]."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self):
        return -self.R.T @ self.t


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """Keypoints of shape (n_frames, J, C); C=2 pixels (or [-1, 1] once normalized) or C=3 meters."""

    data: np.ndarray
    fps: float
    confidence: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[2] not in (2, 3):
            raise TrialSchemaError(f"pose sequence must have shape (frames, joints, 2|3), got {data.shape}")
        if not self.fps > 0:
            raise TrialSchemaError("pose sequence fps must be > 0")
        object.__setattr__(self, "data", data)
        if self.confidence is not None:
            conf = np.asarray(self.confidence, dtype=float)
            if conf.shape != data.shape[:2]:
                raise TrialSchemaError("pose confidence shape does not match keypoints")
            object.__setattr__(self, "confidence", conf)

    @property
    def layout(self):
        return "2d" if self.data.shape[2] == 2 else "3d"

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class ForceSequence:
    """Plate forces of shape (n_frames, 6) as [Fx1, Fy1, Fz1, Fx2, Fy2, Fz2]."""

    data: np.ndarray
    fps: float
    units: str = UNITS_NEWTON

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2 or data.shape[1] != 6:
            raise TrialSchemaError("forces: expected 6 channels")
        if self.units not in (UNITS_NEWTON, UNITS_PER_KG):
            raise TrialSchemaError(f"forces: unknown units {self.units!r}")
        if not self.fps > 0:
            raise TrialSchemaError("forces: fps must be > 0")
        object.__setattr__(self, "data", data)

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class Trial:
    trial_id: str
    subject: Subject
    movement: str
    fps_video: float
    cameras: tuple
    poses_2d: dict
    forces: ForceSequence
    image_size: dict = field(default_factory=dict)
    poses_3d: Optional[PoseSequence] = None
    side: Optional[str] = None

    def __post_init__(self):
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise TrialSchemaError("cameras: duplicate camera id")
        for cam_id in self.poses_2d:
            if cam_id not in ids:
                raise TrialSchemaError(f"poses_2d: camera {cam_id!r} not in cameras")
            if cam_id not in self.image_size:
                raise TrialSchemaError(f"image_size: missing entry for camera {cam_id!r}")
        lengths = {len(p) for p in self.poses_2d.values()}
        if self.poses_3d is not None:
            lengths.add(len(self.poses_3d))
        if len(lengths) > 1:
            raise TrialSchemaError("poses_2d/poses_3d: frame counts differ between views")

    @property
    def camera_ids(self):
        return [c.id for c in self.cameras]

    def camera(self, cam_id):
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(f"unknown camera {cam_id!r}")

    @property
    def n_frames(self):
        for p in self.poses_2d.values():
            return len(p)
        return 0 if self.poses_3d is None else len(self.poses_3d)

    @property
    def label(self):
        return movement_label(self.movement, self.side)

    @property
    def is_aligned(self):
        return self.forces.units == UNITS_PER_KG and math.isclose(self.forces.fps, self.fps_video)


@dataclass(frozen=True, eq=False)
class WindowedSample:
    input: np.ndarray  # (f, J*C)
    force_target: np.ndarray  # (6,) N/kg
    pose3d_target: Optional[np.ndarray] = None  # (J, 3) meters, root-relative
    meta: dict = field(default_factory=dict)


# -- JSON --------------------------------------------------------------------

def _require(d, key, where=""):
    if key not in d:
        raise TrialSchemaError(f"missing field {where + key!r}")
    return d[key]


def trial_from_dict(d, default_id="trial"):
    subj = _require(d, "subject")
    subject = Subject(str(_require(subj, "id", "subject.")), float(_require(subj, "mass_kg", "subject.")))
    name, side = canonical_movement(str(_require(d, "movement")))
    fps_video = float(_require(d, "fps_video"))
    fps_force = float(_require(d, "fps_force"))
    cameras = []
    for i, c in enumerate(_require(d, "cameras")):
        for key in ("id", "K", "R", "t"):
            _require(c, key, f"cameras[{i}].")
        try:
            cameras.append(CameraParameters(str(c["id"]), c["K"], c["R"], c["t"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, TrialSchemaError):
                raise
            raise TrialSchemaError(f"cameras[{i}]: {exc}") from None
    image_size = {str(k): (float(v[0]), float(v[1])) for k, v in d.get("image_size", {}).items()}
    poses_2d = {}
    for cam_id, frames in _require(d, "poses_2d").items():
        arr = np.asarray(frames, dtype=float)
        if arr.ndim != 3 or arr.shape[1] != NUM_JOINTS or arr.shape[2] not in (2, 3):
            raise TrialSchemaError(
                f"poses_2d[{cam_id}]: expected (frames, {NUM_JOINTS}, 2|3), got {arr.shape}"
            )
        conf = arr[:, :, 2] if arr.shape[2] == 3 else np.ones(arr.shape[:2])
        poses_2d[str(cam_id)] = PoseSequence(arr[:, :, :2], fps_video, confidence=conf)
    poses_3d = None
    if d.get("poses_3d") is not None:
        arr = np.asarray(d["poses_3d"], dtype=float)
        if arr.ndim != 3 or arr.shape[1:] != (NUM_JOINTS, 3):
            raise TrialSchemaError(f"poses_3d: expected (frames, {NUM_JOINTS}, 3), got {arr.shape}")
        poses_3d = PoseSequence(arr, fps_video)
    forces_raw = np.asarray(_require(d, "forces_N"), dtype=float)
    if forces_raw.ndim != 2 or forces_raw.shape[1] != 6:
        raise TrialSchemaError("forces: expected 6 channels")
    forces = ForceSequence(forces_raw, fps_force, UNITS_NEWTON)
    return Trial(
        trial_id=str(d.get("id", default_id)),
        subject=subject,
        movement=name,
        side=side,
        fps_video=fps_video,
        cameras=tuple(cameras),
        poses_2d=poses_2d,
        poses_3d=poses_3d,
        forces=forces,
        image_size=image_size,
    )


def trial_to_dict(trial):
    if trial.forces.units != UNITS_NEWTON or trial.is_aligned:
        raise TrialSchemaError("only raw trials (newtons at native rate) can be serialized")
    if any(p.normalized for p in trial.poses_2d.values()):
        raise TrialSchemaError("only raw trials (pixel keypoints) can be serialized")
    d = {
        "id": trial.trial_id,
        "subject": {"id": trial.subject.id, "mass_kg": trial.subject.mass},
        "movement": trial.label,
        "fps_video": trial.fps_video,
        "fps_force": trial.forces.fps,
        "cameras": [
            {"id": c.id, "K": c.K.tolist(), "R": c.R.tolist(), "t": c.t.tolist()} for c in trial.cameras
        ],
        "image_size": {k: list(v) for k, v in trial.image_size.items()},
        "poses_2d": {
            k: np.concatenate([p.data, p.confidence[:, :, None]], axis=2).tolist()
            for k, p in trial.poses_2d.items()
        },
    }
    if trial.poses_3d is not None:
        d["poses_3d"] = trial.poses_3d.data.tolist()
    d["forces_N"] = trial.forces.data.tolist()
    return d


def load_trial(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TrialSchemaError(f"{path.name}: invalid JSON ({exc})") from None
    return trial_from_dict(d, default_id=path.stem)


def save_trial(trial, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(trial_to_dict(trial), fh)


def load_trials(directory):
    paths = sorted(Path(directory).glob("*.json"))
    return [load_trial(p) for p in paths]


# -- conversions ---------------------------------------------------------------

def resample_forces(forces, target_fps):
    """Block-mean decimation to ``target_fps``; a partial trailing block is dropped."""
    ratio = forces.fps / target_fps
    block = int(round(ratio))
    if block < 1 or not math.isclose(ratio, block, rel_tol=0, abs_tol=1e-9):
        raise AlignmentError(f"force rate {forces.fps} Hz is not an integer multiple of {target_fps} Hz")
    n_out = len(forces) // block
    data = forces.data[: n_out * block].reshape(n_out, block, 6).mean(axis=1)
    return ForceSequence(data, float(target_fps), forces.units)


def normalize_forces(forces, mass):
    if forces.units != UNITS_NEWTON:
        raise ValueError(f"normalize_forces expects units {UNITS_NEWTON!r}, got {forces.units!r}")
    if not mass > 0:
        raise ValueError("mass must be > 0")
    return ForceSequence(forces.data / mass, forces.fps, UNITS_PER_KG)


def denormalize_forces(forces, mass):
    if forces.units != UNITS_PER_KG:
        raise ValueError(f"denormalize_forces expects units {UNITS_PER_KG!r}, got {forces.units!r}")
    if not mass > 0:
        raise ValueError("mass must be > 0")
    return ForceSequence(forces.data * mass, forces.fps, UNITS_NEWTON)


def normalize_keypoints_2d(poses, width, height):
    """Map pixel coordinates to [-1, 1]: x -> 2x/width - 1, y -> 2y/height - 1."""
    if poses.layout != "2d":
        raise ValueError("normalize_keypoints_2d needs a 2D pose sequence")
    if poses.normalized:
        raise ValueError("pose sequence is already normalized")
    if not (width > 0 and height > 0):
        raise ValueError("image dimensions must be positive")
    scale = np.array([2.0 / width, 2.0 / height])
    return PoseSequence(poses.data * scale - 1.0, poses.fps, poses.confidence, normalized=True)


def mean_mass(trials):
    """Mean subject mass over distinct subjects."""
    masses = {t.subject.id: t.subject.mass for t in trials}
    if not masses:
        raise ValueError("no trials")
    return float(np.mean(list(masses.values())))


def align_trial(trial):
    """Resample forces to video rate in N/kg and normalize 2D keypoints; idempotent."""
    if trial.is_aligned:
        return trial
    forces = resample_forces(trial.forces, trial.fps_video)
    forces = normalize_forces(forces, trial.subject.mass)
    n = trial.n_frames
    if len(forces) != n:
        raise AlignmentError(
            f"{trial.trial_id}: {len(forces)} force frames at {trial.fps_video} Hz vs {n} pose frames"
        )
    poses_2d = {
        k: p if p.normalized else normalize_keypoints_2d(p, *trial.image_size[k])
        for k, p in trial.poses_2d.items()
    }
    return replace(trial, forces=forces, poses_2d=poses_2d)


# -- windows -------------------------------------------------------------------

def root_relative(poses):
    """Subtract the mid-hip point from every joint; ``poses`` is (..., J, 3)."""
    root = 0.5 * (poses[..., LEFT_HIP, :] + poses[..., RIGHT_HIP, :])
    return poses - root[..., None, :]


def pose3d_targets(trial, camera):
    """Root-relative 3D targets; in camera coordinates for a camera view, world for "3d"."""
    if trial.poses_3d is None:
        return None
    p = trial.poses_3d.data
    if camera != "3d":
        cam = trial.camera(camera)
        p = p @ cam.R.T + cam.t
    return root_relative(p)


def view_input(trial, camera):
    if camera == "3d":
        if trial.poses_3d is None:
            raise ValueError(f"{trial.trial_id}: no 3D poses for a '3d' view")
        return trial.poses_3d.data
    poses = trial.poses_2d[camera]
    if not poses.normalized:
        raise ValueError(f"{trial.trial_id}/{camera}: keypoints are not normalized")
    return poses.data


def sliding_windows(x, f):
    """Stride-1 windows of length ``f`` centered at every frame with edge replication.

    ``x`` is (n, ...); the result is (n, f, ...) and window ``t`` holds frame ``t`` at index f // 2.
    """
    n = x.shape[0]
    if n == 0:
        return np.zeros((0, f) + x.shape[1:])
    left = f // 2
    idx = np.clip(np.arange(n)[:, None] + np.arange(f)[None, :] - left, 0, n - 1)
    return x[idx]


def window_arrays(trial, f, camera):
    """Array form of :func:`make_windows`: X (n, f, J*C), forces (n, 6), poses (n, J, 3) or None."""
    if not trial.is_aligned:
        raise AlignmentError(f"{trial.trial_id}: trial must be aligned before windowing")
    x = view_input(trial, camera)
    n = x.shape[0]
    X = sliding_windows(x.reshape(n, -1), f)
    return X, trial.forces.data.copy(), pose3d_targets(trial, camera)


def make_windows(trial, f, camera):
    X, y, P = window_arrays(trial, f, camera)
    out = []
    for t in range(X.shape[0]):
        meta = {"trial_id": trial.trial_id, "camera": camera, "center": t, "flipped": False,
                "movement": trial.label}
        out.append(WindowedSample(X[t], y[t], None if P is None else P[t], meta))
    return out


def flip_arrays(X, forces, poses=None, channels=2):
    """Horizontal flip of stacked windows X (..., f, J*C), forces (..., 6), poses (..., J, 3)."""
    shape = X.shape
    J = shape[-1] // channels
    if J != NUM_JOINTS or shape[-1] % channels:
        raise ValueError(f"flip needs the COCO-{NUM_JOINTS} joint layout, got {shape[-1]} features")
    x = X.reshape(shape[:-1] + (J, channels))[..., FLIP_INDEX, :].copy()
    x[..., 0] = -x[..., 0]
    Xf = x.reshape(shape)
    Ff = forces[..., FORCE_FLIP_INDEX] * FORCE_FLIP_SIGN
    Pf = None
    if poses is not None:
        Pf = poses[..., FLIP_INDEX, :].copy()
        Pf[..., 0] = -Pf[..., 0]
    return Xf, Ff, Pf


def flip_augment(sample, channels=None):
    """Mirror a window left/right: x negated, joint pairs and force plates swapped."""
    if channels is None:
        width = sample.input.shape[-1]
        if width == NUM_JOINTS * 2:
            channels = 2
        elif width == NUM_JOINTS * 3:
            channels = 3
        else:
            raise ValueError(f"flip needs the COCO-{NUM_JOINTS} joint layout, got {width} features")
    X, F, P = flip_arrays(sample.input, sample.force_target, sample.pose3d_target, channels)
    meta = dict(sample.meta)
    meta["flipped"] = not meta.get("flipped", False)
    label = meta.get("movement")
    if label:
        name, side = canonical_movement(label)
        if side:
            meta["movement"] = movement_label(name, {"L": "R", "R": "L"}[side])
    return WindowedSample(X, F, P, meta)
