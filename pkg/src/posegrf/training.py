"""Training loops (scratch, multi-task, pretrain/finetune), splits, evaluation and zero-shot folds."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .data import align_trial, flip_arrays, mean_mass, window_arrays
from .metrics import (REPORT_K, DEFAULT_MIN_DISTANCE, GateSchedule, UndefinedMetricError,
                      average_sequence_loss, gated_mse, mean_k_peaks, mpjpe, multi_task_loss,
                      net_vertical, sequence_rmse)
from .model import (FORCE_HEAD, POSE_HEAD, forward, init_params, predict, set_input_statistics, swap_head,
                    trunk_digest)

logger = logging.getLogger(__name__)

STRATEGIES = ("scratch", "mtl", "pretrain_finetune")
SPLIT_MODES = ("subject_holdout", "leave_one_class_out", "leave_one_subject_out", "none")
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")
_PHASE_STREAM = {"train": None, "pretrain": 1}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, max_grad, detail=""):
        self.epoch, self.batch, self.max_grad = epoch, batch, max_grad
        super().__init__(f"non-finite loss or gradient at epoch {epoch}, batch {batch} "
                         f"(max |grad| so far {max_grad:.3g}){': ' + detail if detail else ''}")


class LeakageError(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "scratch"
    lr: float = 4e-4
    decay: float = 0.99
    epochs: int = 50
    batch_size: int = 512
    alpha: float = 1.0
    gate_T: int = 1
    gate_mode: str = "above"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    pretrain_lr: float = 4e-6
    pretrain_epochs: int = 100
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.lr > 0 or not self.pretrain_lr > 0:
            raise ValueError("learning rates must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        self.gate  # validates gate_T and gate_mode

    @property
    def gate(self):
        return GateSchedule(T=self.gate_T, mode=self.gate_mode)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "subject_holdout"
    held_out: tuple = ()

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.mode!r}; expected one of {SPLIT_MODES}")
        held = self.held_out
        if isinstance(held, str):
            held = tuple(h.strip() for h in held.split(",") if h.strip())
        object.__setattr__(self, "held_out", tuple(held))
        if self.mode in ("leave_one_class_out", "leave_one_subject_out") and len(self.held_out) != 1:
            raise ValueError(f"{self.mode} needs exactly one held-out identifier")


def split_trials(trials, split):
    """Partition trials into (train, validation) according to ``split``."""
    if split.mode == "none":
        return list(trials), []
    if split.mode == "leave_one_class_out":
        key = lambda t: t.movement  # noqa: E731
    else:
        key = lambda t: t.subject.id  # noqa: E731
    present = {key(t) for t in trials}
    missing = [h for h in split.held_out if h not in present]
    if missing:
        raise ValueError(f"held-out identifier(s) {missing} not found in dataset")
    held = set(split.held_out)
    train = [t for t in trials if key(t) not in held]
    val = [t for t in trials if key(t) in held]
    if not train:
        raise ValueError("training split is empty")
    return train, val


@dataclass
class WindowSet:
    """Stacked windows of one or more trials."""

    X: np.ndarray  # (N, f, J*C)
    forces: np.ndarray  # (N, 6) N/kg
    poses: Optional[np.ndarray]  # (N, J, 3) or None
    trial_ids: np.ndarray  # (N,) object
    channels: int

    def __len__(self):
        return self.X.shape[0]


def input_views(trial, channels):
    """Views fed to the model: every camera for 2D input, the triangulated pose for 3D."""
    return ["3d"] if channels == 3 else list(trial.camera_ids)


def build_windows(trials, f, channels=2):
    Xs, Fs, Ps, ids = [], [], [], []
    for trial in trials:
        trial = align_trial(trial)
        for view in input_views(trial, channels):
            X, F, P = window_arrays(trial, f, view)
            if X.shape[-1] % channels:
                raise ValueError(f"{trial.trial_id}/{view}: input width {X.shape[-1]} is not a multiple of {channels}")
            Xs.append(X)
            Fs.append(F)
            Ps.append(P)
            ids.extend([trial.trial_id] * len(X))
    if not Xs:
        raise ValueError("no windows: the trial list is empty")
    poses = None if any(p is None for p in Ps) else np.concatenate(Ps)
    return WindowSet(np.concatenate(Xs), np.concatenate(Fs), poses, np.array(ids, dtype=object), channels)


@dataclass
class History:
    records: list = field(default_factory=list)
    train_ids: set = field(default_factory=set)
    val_ids: set = field(default_factory=set)
    boundary: dict = field(default_factory=dict)
    pretrained: object = None  # phase-1 parameters of a pretrain/finetune run

    def column(self, name, phase=None):
        return [r[name] for r in self.records if phase is None or r["phase"] == phase]

    def audit(self, held_out_ids=None):
        """Raise LeakageError if any validation or held-out trial reached a training batch."""
        held = set(self.val_ids) | set(held_out_ids or ())
        overlap = self.train_ids & held
        if overlap:
            raise LeakageError(f"held-out trials used in training: {sorted(overlap)}")
        return 0

    def to_csv(self, path, phase="train"):
        """Write one phase's epochs; a missing validation loss is left empty."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                if phase is not None and r["phase"] != phase:
                    continue
                val = "" if r["val_loss"] is None else repr(r["val_loss"])
                w.writerow([r["epoch"], repr(r["train_loss"]), val, repr(r["lr"])])


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- objectives -----------------------------------------------------------------

def force_objective(model_cfg, schedule):
    def objective(params, X, F, P, **kw):
        loss = gated_mse(forward(params, model_cfg, X, "force", **kw), F, schedule)
        return loss, {"force": loss.item()}
    return objective


def pose_objective(model_cfg):
    def objective(params, X, F, P, **kw):
        loss = mpjpe(forward(params, model_cfg, X, "pose3d", **kw), P)
        return loss, {"pose": loss.item()}
    return objective


def mtl_objective(model_cfg, schedule, alpha):
    def objective(params, X, F, P, **kw):
        force, pose = forward(params, model_cfg, X, "both", **kw)
        lf = gated_mse(force, F, schedule)
        lp = mpjpe(pose, P)
        return multi_task_loss(lf, lp, alpha), {"force": lf.item(), "pose": lp.item()}
    return objective


# -- loop -------------------------------------------------------------------------

def _max_grad(params):
    grads = [np.abs(p.grad).max() for p in params.values() if p.grad is not None and p.grad.size]
    return float(max(grads)) if grads else 0.0


def _eval_loss(params, data, objective, batch_size):
    if data is None or len(data) == 0:
        return None, {}
    total, parts, n = 0.0, defaultdict(float), 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        loss, p = objective(params, data.X[sl], data.forces[sl], None if data.poses is None else data.poses[sl])
        m = data.X[sl].shape[0]
        total += loss.item() * m
        for k, v in p.items():
            parts[k] += v * m
        n += m
    return total / n, {k: v / n for k, v in parts.items()}


def optimize(params, model_cfg, data, objective, train_cfg, lr0, epochs, history, val=None, phase="train"):
    """Adam over shuffled mini-batches with stochastic flips; appends one history record per epoch."""
    stream = _PHASE_STREAM[phase]
    rng = np.random.default_rng(train_cfg.seed if stream is None else [train_cfg.seed, stream])
    drop_rng = np.random.default_rng([train_cfg.seed, 7]) if model_cfg.dropout > 0 else None
    adam = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    n = len(data)
    bs = train_cfg.batch_size
    epoch0 = len(history.records)
    steps = 0
    worst = 0.0
    for epoch in range(epochs):
        lr = lr0 * train_cfg.decay ** epoch
        perm = rng.permutation(n)
        total, parts, seen = 0.0, defaultdict(float), 0
        for b, start in enumerate(range(0, n, bs)):
            idx = perm[start:start + bs]
            X, F = data.X[idx], data.forces[idx]
            P = None if data.poses is None else data.poses[idx]
            flips = rng.random(len(idx)) < train_cfg.flip_prob
            if flips.any():
                Xf, Ff, Pf = flip_arrays(X[flips], F[flips], None if P is None else P[flips], data.channels)
                X[flips], F[flips] = Xf, Ff
                if P is not None:
                    P[flips] = Pf
            history.train_ids.update(data.trial_ids[idx].tolist())
            params.zero_grad()
            try:
                with T.Tape() as tape:
                    loss, p = objective(params, X, F, P, training=True, rng=drop_rng)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError("loss is not finite")
                tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch0 + epoch, b, worst, str(exc)) from None
            g = _max_grad(params)
            if not math.isfinite(g):
                raise TrainingDivergedError(epoch0 + epoch, b, worst, "gradient is not finite")
            worst = max(worst, g)
            adam.step(lr)
            total += loss.item() * len(idx)
            for k, v in p.items():
                parts[k] += v * len(idx)
            seen += len(idx)
            steps += 1
            if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
                break
        val_loss, val_parts = _eval_loss(params, val, objective, max(bs, 256))
        rec = {"epoch": epoch0 + epoch, "train_loss": total / seen, "val_loss": val_loss, "lr": lr,
               "phase": phase, "steps": steps}
        rec.update({f"train_{k}": v / seen for k, v in parts.items()})
        rec.update({f"val_{k}": v for k, v in val_parts.items()})
        history.records.append(rec)
        logger.info("%s epoch %d: train %.6g val %s lr %.3g", phase, rec["epoch"], rec["train_loss"],
                    "-" if val_loss is None else f"{val_loss:.6g}", lr)
        if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
            break
    return params


def _require_poses(data, what):
    if data.poses is None:
        raise ValueError(f"{what} needs 3D pose targets; triangulate the trials first")


def fit_windows(data, model_cfg, train_cfg, val=None, history=None):
    """Train on prepared windows with the strategy named in ``train_cfg``."""
    history = history or History()
    if len(data) == 0:
        raise ValueError("training split is empty")
    if train_cfg.strategy == "scratch":
        params = init_params(model_cfg, train_cfg.seed, heads=(FORCE_HEAD,))
        set_input_statistics(params, model_cfg, data.X)
        optimize(params, model_cfg, data, force_objective(model_cfg, train_cfg.gate), train_cfg,
                 train_cfg.lr, train_cfg.epochs, history, val)
        return params, history
    if train_cfg.strategy == "mtl":
        _require_poses(data, "multi-task training")
        if val is not None and val.poses is None:
            logger.warning("validation windows lack 3D poses; validation loss not computed")
            val = None
        params = init_params(model_cfg, train_cfg.seed, heads=(FORCE_HEAD, POSE_HEAD))
        set_input_statistics(params, model_cfg, data.X)
        optimize(params, model_cfg, data, mtl_objective(model_cfg, train_cfg.gate, train_cfg.alpha), train_cfg,
                 train_cfg.lr, train_cfg.epochs, history, val)
        return params, history
    pre_cfg = replace(train_cfg, lr=train_cfg.pretrain_lr, epochs=train_cfg.pretrain_epochs)
    return _pretrain_finetune_windows(data, model_cfg, pre_cfg, train_cfg, val, history)


def _pretrain_finetune_windows(data, model_cfg, pre_cfg, fine_cfg, val, history):
    _require_poses(data, "pose pre-training")
    params = init_params(model_cfg, pre_cfg.seed, heads=(POSE_HEAD,))
    set_input_statistics(params, model_cfg, data.X)
    pose_val = val if val is not None and val.poses is not None else None
    optimize(params, model_cfg, data, pose_objective(model_cfg), pre_cfg, pre_cfg.lr, pre_cfg.epochs,
             history, pose_val, phase="pretrain")
    before = trunk_digest(params)
    tuned = swap_head(params, model_cfg, FORCE_HEAD, seed=fine_cfg.seed)
    history.boundary = {"trunk_before": before, "trunk_after": trunk_digest(tuned),
                        "epoch": len(history.records)}
    history.pretrained = params
    optimize(tuned, model_cfg, data, force_objective(model_cfg, fine_cfg.gate), fine_cfg, fine_cfg.lr,
             fine_cfg.epochs, history, val, phase="train")
    return tuned, history


def _prepare(dataset, split, model_cfg):
    train_trials, val_trials = split_trials(dataset, split)
    data = build_windows(train_trials, model_cfg.receptive_field, model_cfg.channels)
    val = build_windows(val_trials, model_cfg.receptive_field, model_cfg.channels) if val_trials else None
    history = History(val_ids={t.trial_id for t in val_trials})
    return data, val, history


def train(dataset, split, model_cfg, train_cfg):
    """Train with ``train_cfg.strategy`` on the training side of ``split``; returns (params, history)."""
    data, val, history = _prepare(dataset, split, model_cfg)
    params, history = fit_windows(data, model_cfg, train_cfg, val, history)
    history.audit()
    return params, history


def train_mtl(dataset, split, model_cfg, train_cfg):
    return train(dataset, split, model_cfg, replace(train_cfg, strategy="mtl"))


def pretrain_then_finetune(dataset, split, model_cfg, pre_cfg, fine_cfg):
    data, val, history = _prepare(dataset, split, model_cfg)
    params, history = _pretrain_finetune_windows(data, model_cfg, pre_cfg, fine_cfg, val, history)
    history.audit()
    return params, history


# -- evaluation ---------------------------------------------------------------------

class ModelPredictor:
    """Adapts trained parameters to the per-trial predictor protocol used by :func:`evaluate`."""

    def __init__(self, params, model_cfg, batch_size=256):
        self.params = params
        self.model_cfg = model_cfg
        self.batch_size = batch_size

    def eval_views(self, trial):
        return input_views(trial, self.model_cfg.channels)

    def predict_trial(self, trial, view):
        X, _, _ = window_arrays(trial, self.model_cfg.receptive_field, view)
        return predict(self.params, self.model_cfg, X, "force", self.batch_size)


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(predictor, trials, mass, k_values=REPORT_K, min_distance=DEFAULT_MIN_DISTANCE, curves=None):
    """Report in newtons: two-level mean RMSE and mean k-peaks over videos and their views.

    ``predictor`` provides ``eval_views(trial)`` and ``predict_trial(trial, view)`` returning (n, 6) N/kg.
    ``mass`` is the training-mean subject mass used to convert both signals to newtons.
    If ``curves`` is a dict it receives {trial_id: {group: (gt_N, pred_N)}} with predictions
    averaged over views.
    """
    if not trials:
        raise ValueError("evaluation needs at least one trial")
    rmse = {}
    per_video = {}
    for trial in trials:
        trial = align_trial(trial)
        gt = trial.forces.data * mass
        cams = {}
        preds = []
        for view in predictor.eval_views(trial):
            pred = np.asarray(predictor.predict_trial(trial, view), dtype=float) * mass
            preds.append(pred)
            entry = {"rmse_N": sequence_rmse(pred, gt), "kpeaks_N": {}}
            for k in k_values:
                try:
                    entry["kpeaks_N"][str(k)] = mean_k_peaks(net_vertical(pred), net_vertical(gt), k, min_distance)
                except UndefinedMetricError:
                    entry["kpeaks_N"][str(k)] = None
            cams[view] = entry
        rmse[trial.trial_id] = {v: e["rmse_N"] for v, e in cams.items()}
        per_video[trial.trial_id] = {
            "movement": trial.label,
            "subject": trial.subject.id,
            "rmse_N": float(np.mean(list(rmse[trial.trial_id].values()))),
            "kpeaks_N": {str(k): _mean_or_none([e["kpeaks_N"][str(k)] for e in cams.values()]) for k in k_values},
            "cameras": cams,
        }
        if curves is not None:
            mean_pred = np.mean(preds, axis=0)
            curves[trial.trial_id] = {
                "net": (net_vertical(gt), net_vertical(mean_pred)),
                "plate1": (gt[:, 1], mean_pred[:, 1]),
                "plate2": (gt[:, 4], mean_pred[:, 4]),
            }
    return {
        "rmse_N": average_sequence_loss(rmse),
        "kpeaks_N": {str(k): _mean_or_none([v["kpeaks_N"][str(k)] for v in per_video.values()]) for k in k_values},
        "mass_kg": float(mass),
        "n_videos": len(per_video),
        "per_video": per_video,
    }


def zero_shot_eval(dataset, model_cfg, train_cfg, classes=None, **eval_kwargs):
    """Leave-one-class-out: for each movement class, train on the others and evaluate on it."""
    present = sorted({t.movement for t in dataset})
    classes = present if classes is None else list(classes)
    if len(present) < 2:
        raise ValueError("zero-shot evaluation needs at least two movement classes")
    folds = {}
    for cls in classes:
        if cls not in present:
            logger.warning("class %s has no trials; fold skipped", cls)
            continue
        split = SplitSpec("leave_one_class_out", (cls,))
        params, history = train(dataset, split, model_cfg, train_cfg)
        train_trials, held = split_trials(dataset, split)
        report = evaluate(ModelPredictor(params, model_cfg), held, mean_mass(train_trials), **eval_kwargs)
        report["audit"] = {"train_trials": len(history.train_ids), "held_out_trials": len(held),
                           "overlap": history.audit({t.trial_id for t in held})}
        folds[cls] = report
    return folds
