import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posegrf.baselines import ExemplarBaseline, NewtonBaseline, moving_average, second_difference, time_normalize
from posegrf.data import align_trial
from posegrf.synth import GRAVITY, SynthSpec, generate_dataset, generate_trial
from posegrf.training import evaluate


def _vertical_total(F):
    return F[:, 1] + F[:, 4]


@pytest.mark.parametrize("mass", [55.0, 88.37, 120.0])
def test_newton_static_force(mass):
    trial = generate_trial(SynthSpec(movement="standing", duration=1.0, n_cameras=1, mass=mass))
    F = NewtonBaseline().estimate_trial(trial).data
    np.testing.assert_allclose(_vertical_total(F), mass * 9.81, rtol=0.02)


def test_newton_flight_force_near_zero():
    trial = generate_trial(SynthSpec(movement="jump", duration=2.0, n_cameras=1))
    base = NewtonBaseline(smoothing=5)
    F = base.estimate_trial(trial).data
    gt = _vertical_total(align_trial(trial).forces.data)
    flight = gt == 0.0
    # keep frames whose smoothing and differencing stencil stays inside the flight phase
    margin = base.smoothing // 2 + 1
    inner = np.array([flight[max(0, i - margin):i + margin + 1].all() for i in range(len(flight))])
    assert inner.sum() >= 5
    assert np.abs(_vertical_total(F)[inner]).max() < 5.0


def test_newton_is_linear_in_mass():
    trial = generate_trial(SynthSpec(movement="squat", duration=1.5, n_cameras=1))
    base = NewtonBaseline()
    P = trial.poses_3d.data
    np.testing.assert_allclose(base.estimate(P, 2.0, 50.0), 2.0 * base.estimate(P, 1.0, 50.0), rtol=1e-12)


def test_newton_quadratic_motion_exact():
    t = np.arange(40) / 50.0
    P = np.zeros((40, 17, 3))
    P[:, :, 1] = (0.5 * 2.0 * t**2)[:, None]
    F = NewtonBaseline(smoothing=1).estimate(P, 10.0, 50.0)
    np.testing.assert_allclose(_vertical_total(F), 10.0 * (2.0 + GRAVITY), rtol=1e-9)


def test_newton_errors():
    with pytest.raises(ValueError, match="5 frames"):
        NewtonBaseline().estimate(np.zeros((4, 17, 3)), 70.0, 50.0)
    with pytest.raises(ValueError):
        NewtonBaseline(proxy="nose").fit()
    trial = generate_trial(SynthSpec(movement="standing", duration=1.0, n_cameras=1, include_poses_3d=False))
    with pytest.raises(ValueError, match="triangulate"):
        NewtonBaseline().estimate_trial(trial)


def test_newton_report():
    trial = generate_trial(SynthSpec(movement="standing", duration=1.0, n_cameras=1))
    rep = evaluate(NewtonBaseline(), [trial], trial.subject.mass)
    assert list(rep["per_video"][trial.trial_id]["cameras"]) == ["3d"]
    # vertical channels match; the equal split carries no shear, so only the shear channels differ
    shear = 0.05 * trial.subject.mass * GRAVITY / 2
    assert rep["rmse_N"] == pytest.approx(np.sqrt(2 * shear**2), rel=1e-6)


@given(st.integers(1, 30), st.integers(0, 4).map(lambda k: 2 * k + 1))
@settings(max_examples=40, deadline=None)
def test_moving_average_preserves_constants(n, window):
    x = np.full((n, 3), 2.5)
    np.testing.assert_allclose(moving_average(x, window), x)


def test_moving_average_matches_convolution():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 2))
    got = moving_average(x, 5)
    padded = np.concatenate([x[:1], x[:1], x, x[-1:], x[-1:]])
    ref = np.stack([np.convolve(padded[:, c], np.ones(5) / 5, mode="valid") for c in range(2)], axis=1)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    with pytest.raises(ValueError):
        moving_average(x, 4)


def test_second_difference_of_quadratic():
    t = np.arange(10) / 10.0
    a = second_difference((3.0 * t**2)[:, None], 10.0)
    np.testing.assert_allclose(a, 6.0)


def test_time_normalize_endpoints():
    curve = np.arange(12.0).reshape(6, 2)
    out = time_normalize(curve, 11)
    np.testing.assert_allclose(out[[0, -1]], curve[[0, -1]])
    np.testing.assert_allclose(time_normalize(curve, 6), curve)


def test_exemplar_reproduces_single_training_curve():
    trial = generate_trial(SynthSpec(movement="squat", duration=1.5, n_cameras=2))
    base = ExemplarBaseline(n_samples=75).fit([trial])
    aligned = align_trial(trial)
    np.testing.assert_allclose(base.predict_trial(aligned), aligned.forces.data, atol=1e-12)
    assert base.eval_views(trial) == ["cam0", "cam1"]


def test_exemplar_averages_and_keys_by_side():
    data = generate_dataset(n_subjects=2, movements=("squat", "squat:left", "squat:right"), duration=1.5,
                            n_cameras=1)
    base = ExemplarBaseline().fit(data)
    assert sorted(base.exemplars_) == ["SLS_L", "SLS_R", "Squat"]
    left = base.exemplar("SLS_L")
    assert np.abs(left[:, 1]).max() > 0 and np.abs(left[:, 4]).max() == 0
    with pytest.raises(KeyError, match="CMJ"):
        base.exemplar("CMJ")
    with pytest.raises(ValueError):
        ExemplarBaseline().fit([])
