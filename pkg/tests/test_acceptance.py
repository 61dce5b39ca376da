"""The ten acceptance criteria, each at its stated tolerance and time budget.

Run ``pytest tests/test_acceptance.py`` to get one PASS/FAIL line per criterion in the summary.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from posegrf import tensor as T
from posegrf.baselines import NewtonBaseline
from posegrf.cli import main
from posegrf.data import align_trial
from posegrf.metrics import GateSchedule, detect_peaks, gated_mse, mean_k_peaks, mpjpe
from posegrf.model import ModelConfig, ModelParameters, forward, init_params, predict, set_input_statistics
from posegrf.synth import GRAVITY, SynthSpec, com_trajectory, corrupt_view, generate_dataset, generate_trial, \
    plate_forces
from posegrf.training import (SPLIT_MODES, SplitSpec, TrainConfig, WindowSet, build_windows, evaluate,
                              fit_windows, pretrain_then_finetune, split_trials, train, zero_shot_eval)
from posegrf.triangulation import triangulate_sequence

from oracles import brute_gated_mse, brute_peaks

# tiny encoder used by the memorization and training contracts (17 joints, otherwise criterion-1 sizes)
TINY17 = ModelConfig(receptive_field=3, embed_dim=4, num_heads=2, depth=1)


# -- 1. gradient correctness ------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_encoder_and_primitive_gradients():
    start = time.perf_counter()
    cfg = ModelConfig(joints=3, channels=2, receptive_field=3, embed_dim=4, num_heads=2, depth=1)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    # perturb every weight so no gradient is trivially zero at initialization
    for name, p in params.items():
        if p.requires_grad:
            p.data = p.data + rng.normal(0, 0.1, p.shape)
    X = rng.normal(size=(2, 3, cfg.input_dim))
    y = rng.normal(0, 5, (2, 6))
    names = sorted(k for k, v in params.items() if v.requires_grad)

    def loss(tensors):
        q = ModelParameters(params)
        q.update(zip(names, tensors))
        return gated_mse(forward(q, cfg, X), y, GateSchedule(T=2))

    assert T.finite_difference_check(loss, [params[n] for n in names]) < 1e-4

    a = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    g = T.Tensor(rng.normal(size=4), requires_grad=True)
    w = T.Tensor(rng.normal(size=3), requires_grad=True)
    pos = T.Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)), requires_grad=True)
    c = rng.normal(size=(2, 3, 4))
    primitives = {
        "add/sub/mul": (lambda _: T.square(a * b[:, :1].T - a + 0.5).sum(), [a, b]),
        "div/sqrt": (lambda _: (T.sqrt(pos) / (pos + 1.0)).sum(), [pos]),
        "matmul": (lambda _: T.square(T.matmul(a, b)).sum(), [a, b]),
        "softmax": (lambda _: (T.softmax(a, axis=-1) * c).sum(), [a]),
        "layer_norm": (lambda _: (T.layer_norm(a, g, T.Tensor(np.zeros(4))) * c).sum(), [a, g]),
        "gelu": (lambda _: T.gelu(a).sum(), [a]),
        "relu": (lambda _: T.square(T.relu(a)).sum(), [a]),
        "conv1d_reduce": (lambda _: T.square(T.conv1d_reduce(a, w)).sum(), [a, w]),
        "reshape/transpose/concat": (lambda _: T.square(T.concat([T.reshape(T.transpose(a, (0, 2, 1)), (8, 3)),
                                                                   T.reshape(a, (8, 3))], axis=0)).sum(), [a]),
        "getitem/mean": (lambda _: T.square(a[:, 1:, ::2].mean(axis=1)).sum(), [a]),
    }
    for name, (f, inputs) in primitives.items():
        assert T.finite_difference_check(f, inputs) < 1e-6, name
    assert time.perf_counter() - start < 10.0


# -- 2. gated-MSE reduction ----------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_gated_mse_t1_is_plain_mse():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        shape = (int(rng.integers(1, 65)), 6)
        pred, gt = rng.normal(0, 10, shape), rng.normal(0, 10, shape)
        got = gated_mse(T.Tensor(pred), gt, GateSchedule(T=1)).data
        assert got.tobytes() == np.mean(np.square(pred - gt)).tobytes()


@pytest.mark.criterion(2)
def test_c2_two_threshold_example():
    pred, gt = np.array([0.0, 5.0]), np.array([0.5, 6.0])
    assert gated_mse(T.Tensor(pred), gt, GateSchedule(T=2)).item() == 0.8125
    assert brute_gated_mse(pred, gt, [0.0, 1.0]) == 0.8125


# -- 3. peak metric oracle ------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_c3_detect_peaks_matches_brute_force():
    rng = np.random.default_rng(7)
    for case in range(1000):
        n = int(rng.integers(1, 101))
        if case % 2:
            s = rng.integers(-4, 5, size=n).astype(float)  # plateaus and ties
        else:
            s = rng.normal(0, 100, size=n)
        k = int(rng.integers(1, 8))
        md = int(rng.integers(1, 15))
        assert list(detect_peaks(s, k, md).peaks) == brute_peaks(s, k, md)


@pytest.mark.criterion(3)
def test_c3_mean_k_peaks_example():
    gt, pred = np.zeros(30), np.zeros(30)
    gt[10], pred[13] = 500.0, 460.0
    assert abs(mean_k_peaks(pred, gt, k=1) - math.sqrt(1609)) < 1e-9
    assert abs(mean_k_peaks(pred, gt, k=1) - 40.112) < 1e-3


# -- 4. triangulation ------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c4_triangulation():
    start = time.perf_counter()
    for seed, movement in ((0, "squat"), (1, "jump")):
        trial = generate_trial(SynthSpec(movement=movement, duration=1.5 if movement == "jump" else 0.6,
                                         n_cameras=8, seed=seed))
        truth = trial.poses_3d.data
        clean = triangulate_sequence(trial, seed=seed)
        assert np.abs(clean.data - truth).max() < 1e-6
        bad = corrupt_view(trial, "cam2", 50.0)
        seq, stats = triangulate_sequence(bad, seed=seed, return_stats=True)
        assert (stats["inliers"] == 7).all()  # the corrupted view is never an inlier
        assert np.abs(seq.data - truth).max() < 1e-4
        again = triangulate_sequence(bad, seed=seed)
        assert again.data.tobytes() == seq.data.tobytes()
    assert time.perf_counter() - start < 30.0


# -- 5. physics closure ------------------------------------------------------------------------

@pytest.mark.criterion(5)
@pytest.mark.parametrize("spec", [SynthSpec(movement="jump", duration=2.0), SynthSpec(movement="squat"),
                                  SynthSpec(movement="jump", stance="right", duration=1.8, mass=61.0),
                                  SynthSpec(movement="standing", duration=1.0)],
                         ids=lambda s: f"{s.movement}-{s.stance}")
def test_c5_generator_closure(spec):
    traj = com_trajectory(spec)
    t = np.arange(int(spec.duration * spec.fps_force)) / spec.fps_force
    F = plate_forces(spec, traj, t)
    contact = ~traj.in_flight(t)
    per_kg = (F[:, 1] + F[:, 4]) / spec.mass
    assert np.abs(per_kg[contact] - (traj.acceleration(t)[contact] + GRAVITY)).max() < 1e-6
    assert (F[~contact] == 0.0).all()


@pytest.mark.criterion(5)
def test_c5_newton_baseline():
    stand = generate_trial(SynthSpec(movement="standing", duration=1.0, n_cameras=1, mass=72.5))
    F = NewtonBaseline().estimate_trial(stand).data
    np.testing.assert_allclose(F[:, 1] + F[:, 4], 72.5 * 9.81, rtol=0.02)

    jump = generate_trial(SynthSpec(movement="jump", duration=2.0, n_cameras=1))
    base = NewtonBaseline()
    est = base.estimate_trial(jump).data
    flight = (align_trial(jump).forces.data == 0.0).all(axis=1)
    margin = base.smoothing // 2 + 1
    inner = np.array([flight[max(0, i - margin):i + margin + 1].all() for i in range(len(flight))])
    assert inner.sum() >= 5
    assert np.abs(est[inner, 1] + est[inner, 4]).max() < 5.0


# -- 6. overfit capacity ----------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_c6_memorize_four_windows():
    start = time.perf_counter()
    trial = generate_trial(SynthSpec(movement="jump", duration=2.0, n_cameras=2, seed=1))
    data = build_windows([trial], 3)
    idx = [10, 40, 55, 70]
    four = WindowSet(data.X[idx], data.forces[idx], None, data.trial_ids[idx], 2)
    cfg = TrainConfig(lr=4e-4, decay=1.0, epochs=500, batch_size=4, flip_prob=0.0, max_steps=500)
    params, history = fit_windows(four, TINY17, cfg)
    assert history.records[-1]["steps"] <= 500
    assert np.mean((predict(params, TINY17, four.X) - four.forces) ** 2) < 1e-3
    assert time.perf_counter() - start < 60.0


# -- 7. multi-task contract -------------------------------------------------------------------

@pytest.fixture(scope="module")
def mtl_trials():
    return generate_dataset(n_subjects=2, movements=("jump", "squat"), duration=2.0, n_cameras=2)


@pytest.mark.criterion(7)
def test_c7_alpha_zero_is_scratch(mtl_trials):
    base = TrainConfig(epochs=2, batch_size=64, seed=11)
    split = SplitSpec("subject_holdout", "S02")
    p_s, h_s = train(mtl_trials, split, TINY17, base)
    p_m, h_m = train(mtl_trials, split, TINY17, replace(base, strategy="mtl", alpha=0.0))
    assert h_s.column("train_loss") == h_m.column("train_loss")
    assert h_s.column("val_loss") == h_m.column("val_loss")
    for name, v in p_s.items():
        assert v.data.tobytes() == p_m[name].data.tobytes()


@pytest.mark.criterion(7)
def test_c7_both_heads_receive_gradients(mtl_trials):
    data = build_windows(mtl_trials, 3)
    params = init_params(TINY17, 0, heads=("force", "pose"))
    set_input_statistics(params, TINY17, data.X)
    with T.Tape() as tape:
        f, p = forward(params, TINY17, data.X[:32], "both")
        loss = gated_mse(f, data.forces[:32]) + 1.0 * mpjpe(p, data.poses[:32])
    tape.backward(loss)
    for head in ("head.force.weight", "head.force.bias", "head.pose.weight", "head.pose.bias"):
        assert np.abs(params[head].grad).max() > 0, head


@pytest.mark.criterion(7)
def test_c7_both_terms_decrease(mtl_trials):
    cfg = ModelConfig(receptive_field=9, embed_dim=8, num_heads=2, depth=1)
    _, h = train(mtl_trials, SplitSpec("none"), cfg, TrainConfig(strategy="mtl", lr=1e-3, epochs=10, batch_size=32))
    force, pose = h.column("train_force"), h.column("train_pose")
    assert len(force) == 10
    assert force[-1] < force[0] and pose[-1] < pose[0]
    assert np.mean(force[-3:]) < np.mean(force[:3]) and np.mean(pose[-3:]) < np.mean(pose[:3])


# -- 8. pretrain / finetune contract -----------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_pretrain_finetune():
    trial = generate_trial(SynthSpec(movement="squat", duration=2.0, n_cameras=1, seed=0))
    cfg = ModelConfig(receptive_field=3, embed_dim=8, num_heads=2, depth=1)
    pre = TrainConfig(lr=5e-3, decay=0.93, epochs=30, batch_size=4, flip_prob=0.0)
    fine = TrainConfig(lr=4e-4, epochs=1, batch_size=64)
    params, h = pretrain_then_finetune([trial], SplitSpec("none"), cfg, pre, fine)
    assert h.boundary["trunk_before"] == h.boundary["trunk_after"]
    data = build_windows([trial], 3)
    P = predict(h.pretrained, cfg, data.X, "pose3d")
    assert np.linalg.norm(P - data.poses, axis=-1).mean() < 0.005


# -- 9. protocol integrity ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def protocol_trials():
    return generate_dataset(n_subjects=3, movements=("jump", "squat", "squat:left", "standing"), duration=1.5,
                            n_cameras=1)


@pytest.mark.criterion(9)
def test_c9_zero_shot_fold_count(protocol_trials):
    folds = zero_shot_eval(protocol_trials, TINY17, TrainConfig(epochs=1, batch_size=256))
    classes = {t.movement for t in protocol_trials}
    assert len(folds) == len(classes) == 4
    for cls, rep in folds.items():
        assert rep["audit"]["overlap"] == 0
        assert all(v["movement"].startswith(cls) for v in rep["per_video"].values())


SPLITS = {"subject_holdout": SplitSpec("subject_holdout", "S02,S03"),
          "leave_one_class_out": SplitSpec("leave_one_class_out", "Squat"),
          "leave_one_subject_out": SplitSpec("leave_one_subject_out", "S01"),
          "none": SplitSpec("none")}


@pytest.mark.criterion(9)
@pytest.mark.parametrize("mode", SPLIT_MODES)
@pytest.mark.parametrize("strategy", ["scratch", "mtl", "pretrain_finetune"])
def test_c9_no_train_validation_overlap(protocol_trials, mode, strategy):
    split = SPLITS[mode]
    cfg = TrainConfig(strategy=strategy, epochs=1, pretrain_epochs=1, batch_size=256)
    _, history = train(protocol_trials, split, TINY17, cfg)
    train_t, val_t = split_trials(protocol_trials, split)
    val_ids = {t.trial_id for t in val_t}
    assert history.audit() == 0
    assert not history.train_ids & val_ids
    assert history.train_ids == {t.trial_id for t in train_t}


class _OffsetPredictor:
    def __init__(self, offsets):
        self.offsets = offsets

    def eval_views(self, trial):
        return list(self.offsets[trial.trial_id])

    def predict_trial(self, trial, view):
        out = trial.forces.data.copy()
        out[:, 2] += self.offsets[trial.trial_id][view]
        return out


@pytest.mark.criterion(9)
def test_c9_two_level_mean():
    a = generate_trial(SynthSpec(movement="squat", duration=1.0, n_cameras=2, trial_id="A"))
    b = generate_trial(SynthSpec(movement="squat", duration=1.0, n_cameras=1, trial_id="B", seed=5))
    mass = 80.0
    pred = _OffsetPredictor({"A": {"cam0": 2.0 / mass, "cam1": 4.0 / mass}, "B": {"cam0": 6.0 / mass}})
    report = evaluate(pred, [a, b], mass)
    assert report["rmse_N"] == pytest.approx(4.5, abs=1e-12)
    assert report["per_video"]["A"]["rmse_N"] == pytest.approx(3.0, abs=1e-12)
    assert report["per_video"]["B"]["rmse_N"] == pytest.approx(6.0, abs=1e-12)


# -- 10. end-to-end determinism ------------------------------------------------------------------

PIPELINE_INI = """\
[model]
receptive_field = 9
embed_dim = 8
num_heads = 2
depth = 1
[train]
strategy = mtl
epochs = 3
batch_size = 64
lr = 0.001
[split]
mode = subject_holdout
held_out = S03
[synth]
n_subjects = 3
n_cameras = 4
"""

PIPELINE = [
    ("syn", ["synth"]),
    ("tri", ["triangulate", "--data", "runs/syn/trials"]),
    ("tr", ["train", "--data", "runs/tri/trials"]),
    ("ev", ["eval", "--checkpoint", "runs/tr/checkpoints/model.ckpt", "--set", "data.trials_dir=runs/tri/trials"]),
    ("pl", ["plot", "runs/ev"]),
]


@pytest.mark.criterion(10)
def test_c10_pipeline_rerun_from_echoed_config(tmp_path, monkeypatch, capsys):
    start = time.perf_counter()
    first, second = tmp_path / "first", tmp_path / "second"
    first.mkdir()
    (second / "echo").mkdir(parents=True)
    (first / "pipeline.ini").write_text(PIPELINE_INI)

    monkeypatch.chdir(first)
    for name, argv in PIPELINE:
        capsys.readouterr()
        assert main(["--config", "pipeline.ini", "--name", name, "--jobs", "1", *argv]) == 0
        # keep exactly what the command echoed
        (second / "echo" / f"{name}.ini").write_text(capsys.readouterr().out)

    monkeypatch.chdir(second)
    for name, argv in PIPELINE:
        assert main(["--config", f"echo/{name}.ini", argv[0]]) == 0

    for rel in ("tr/report.json", "ev/report.json"):
        a, b = (first / "runs" / rel).read_bytes(), (second / "runs" / rel).read_bytes()
        assert a == b, rel
    compared = 0
    for path in sorted((first / "runs").rglob("*")):
        if path.is_file() and path.name != "config.ini":
            twin = second / path.relative_to(first)
            assert twin.read_bytes() == path.read_bytes(), path.relative_to(first)
            compared += 1
    assert compared >= 20
    assert sorted(p.name for p in (second / "runs/pl/plots").iterdir()) == ["S03_CMJ_4__net.svg",
                                                                            "S03_Squat_5__net.svg"]
    assert time.perf_counter() - start < 300.0
