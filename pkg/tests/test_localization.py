import math

import numpy as np
import pytest

from magprobe.field_models import default_capsule_spec, moment_from_spec
from magprobe.geometry import Pose, euler_to_matrix
from magprobe.localization import (
    EkfConfig,
    EstimatorState,
    NoConvergenceError,
    ekf_predict,
    ekf_update,
    initial_state,
    ls_initialize,
    measurement_jacobian,
    track_step,
)
from magprobe.sensing import (
    EnvironmentField,
    ImuNoise,
    PlacedMagnet,
    SensorArrayLayout,
    SensorFrame,
    sample_array,
    sample_imu,
)

MMAG = moment_from_spec(default_capsule_spec())
LAYOUT0 = SensorArrayLayout(noise_sigma=0.0)
ENV0 = EnvironmentField.zero(36)


def _capsule_fields(pose: Pose, layout=LAYOUT0):
    caps = PlacedMagnet(pose, default_capsule_spec())
    return sample_array(caps, None, ENV0, layout, noise_seed=None)


def _small_q_cfg(q_pos=2.5e-7, q_yaw=1e-6):
    return EkfConfig(process_noise=np.diag([q_pos, q_pos, q_pos, q_yaw]))


# ---------------------------------------------------------------------------
# initial localization


def test_ls_noiseless_round_trip():
    pose = Pose.from_euler([0.0, 0.0, 0.10], math.radians(30), 0.0, math.radians(45))
    fields = _capsule_fields(pose)
    fix = ls_initialize(fields, math.radians(30), 0.0, LAYOUT0, MMAG)
    assert np.linalg.norm(fix.position - pose.position) < 1e-6
    assert abs(fix.yaw - math.radians(45)) < 1e-6
    assert fix.yaw_observable


def test_ls_noisy_accuracy_matches_reported_scale():
    rng = np.random.default_rng(50)
    layout = SensorArrayLayout(noise_sigma=1e-5)
    errs = []
    for _ in range(50):
        pose = Pose.from_euler(
            [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.05, 0.2)],
            rng.uniform(0.25, 0.8),
            rng.uniform(-0.3, 0.3),
            rng.uniform(-3, 3),
        )
        caps = PlacedMagnet(pose, default_capsule_spec())
        fields = sample_array(caps, None, ENV0, layout, noise_seed=rng)
        roll, pitch, _ = pose.euler()
        fix = ls_initialize(fields, roll, pitch, layout, MMAG)
        errs.append(np.linalg.norm(fix.position - pose.position))
    # the reference per-axis accuracy is 2.06-2.86 mm; with 1e-5 T noise the
    # error norm stays in the same few-mm regime, dominated by the weak-signal
    # top of the workspace
    assert np.mean(errs) < 0.008
    assert np.median(errs) < 0.005


def test_ls_vertical_moment_flags_yaw_unobservable():
    pose = Pose.from_euler([0.05, -0.03, 0.12], 0.0, 0.0, 0.7)
    fields = _capsule_fields(pose)
    fix = ls_initialize(fields, 0.0, 0.0, LAYOUT0, MMAG)
    assert not fix.yaw_observable
    assert fix.yaw == 0.0
    assert np.linalg.norm(fix.position - pose.position) < 1e-5


def test_ls_absent_capsule_raises():
    with pytest.raises(NoConvergenceError):
        ls_initialize(np.zeros((36, 3)), 0.3, 0.0, LAYOUT0, MMAG)


# ---------------------------------------------------------------------------
# EKF prediction


def _state(pos=(0.0, 0.0, 0.1), yaw=0.3, roll=0.2, pitch=0.1):
    return EstimatorState(
        position=np.asarray(pos, dtype=float),
        yaw=yaw,
        covariance=np.diag([1e-4, 1e-4, 1e-4, 0.01]),
        roll=roll,
        pitch=pitch,
    )


def test_predict_stationary_gravity_cancellation():
    cfg = EkfConfig()
    state = _state()
    accel, gyro, _, _ = sample_imu(state.full_pose, np.zeros(3), np.zeros(3))
    pred = ekf_predict(state, (accel, gyro), cfg)
    assert np.max(np.abs(pred.position - state.position)) < 1e-15
    assert pred.yaw == pytest.approx(state.yaw, abs=1e-12)
    assert np.allclose(pred.covariance, state.covariance + cfg.process_noise, atol=1e-15)


def test_predict_pure_yaw_rate():
    cfg = EkfConfig()
    state = _state(yaw=0.2, roll=0.0, pitch=0.0)
    accel = state.full_pose.orientation.T @ np.array([0, 0, 9.81])
    pred = ekf_predict(state, (accel, np.array([0.0, 0.0, 0.5])), cfg)
    assert pred.yaw == pytest.approx(0.2 + 0.5 * cfg.dt, abs=1e-12)


def test_predict_matches_double_integrator_oracle():
    # independent re-implementation: world accel integrates from rest
    rng = np.random.default_rng(61)
    cfg = EkfConfig()
    for _ in range(20):
        state = _state(yaw=rng.uniform(-1, 1), roll=rng.uniform(-0.5, 0.5), pitch=rng.uniform(-0.5, 0.5))
        accel = rng.normal(0, 1, 3)
        R = state.full_pose.orientation
        world_acc = R @ accel + np.array([0, 0, -9.81])
        expected = state.position + 0.5 * world_acc * cfg.dt**2
        pred = ekf_predict(state, (accel, np.zeros(3)), cfg)
        assert np.max(np.abs(pred.position - expected)) < 1e-15


# ---------------------------------------------------------------------------
# measurement jacobian and update


def test_measurement_jacobian_matches_fd():
    rng = np.random.default_rng(62)
    layout = SensorArrayLayout()
    from magprobe.kernels import measurement_model

    for _ in range(20):
        state = _state(
            pos=(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.06, 0.18)),
            yaw=rng.uniform(-2, 2),
            roll=rng.uniform(0.2, 0.8),
            pitch=rng.uniform(-0.4, 0.4),
        )
        H = measurement_jacobian(state, state.roll, state.pitch, layout, MMAG)
        x0 = state.state_vector
        eps = 1e-6
        H_fd = np.empty_like(H)
        for j in range(4):
            d = np.zeros(4)
            d[j] = eps
            hp, _ = measurement_model(x0[:3] + d[:3], x0[3] + d[3], state.roll, state.pitch, MMAG, layout.positions)
            hm, _ = measurement_model(x0[:3] - d[:3], x0[3] - d[3], state.roll, state.pitch, MMAG, layout.positions)
            H_fd[:, j] = (hp - hm) / (2 * eps)
        assert np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd)) < 1e-4


def test_measurement_jacobian_yaw_column_zero_when_vertical():
    state = _state(roll=0.0, pitch=0.0)
    H = measurement_jacobian(state, 0.0, 0.0, SensorArrayLayout(), MMAG)
    assert np.max(np.abs(H[:, 3])) == 0.0


def test_measurement_jacobian_distance_scaling():
    layout1 = SensorArrayLayout(np.array([[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.1, 0.1, 0.0],
                                          [0.2, 0.0, 0.0], [0.0, 0.2, 0.0], [0.2, 0.2, 0.0],
                                          [0.3, 0.0, 0.0], [0.0, 0.3, 0.0]]) * 1.0, 0.0)
    layout2 = SensorArrayLayout(layout1.positions * 2.0, 0.0)
    state = _state(pos=(0.0, 0.0, 0.0), roll=0.4)
    H1 = measurement_jacobian(state, 0.4, 0.0, layout1, MMAG)
    H2 = measurement_jacobian(state, 0.4, 0.0, layout2, MMAG)
    ratio = np.linalg.norm(H2[:, :3]) / np.linalg.norm(H1[:, :3])
    assert ratio == pytest.approx(2.0**-4, rel=1e-9)


def test_update_zero_innovation_keeps_state_and_shrinks_covariance():
    cfg = EkfConfig()
    layout = LAYOUT0
    state = _state(roll=0.4)
    fields = _capsule_fields(state.full_pose, layout).reshape(36, 3)
    updated = ekf_update(state, fields, state.roll, state.pitch, layout, MMAG, cfg)
    assert np.max(np.abs(updated.position - state.position)) < 1e-12
    assert abs(updated.yaw - state.yaw) < 1e-12
    assert np.trace(updated.covariance) < np.trace(state.covariance + cfg.process_noise)


def test_update_contracts_toward_truth():
    rng = np.random.default_rng(63)
    cfg = EkfConfig()
    layout = LAYOUT0
    for _ in range(100):
        true_pose = Pose.from_euler(
            [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.07, 0.16)],
            rng.uniform(0.3, 0.7),
            rng.uniform(-0.3, 0.3),
            rng.uniform(-1.5, 1.5),
        )
        roll, pitch, yaw = true_pose.euler()
        fields = _capsule_fields(true_pose, layout).reshape(36, 3)
        perturbed = EstimatorState(
            position=true_pose.position + rng.uniform(-0.005, 0.005, 3),
            yaw=yaw + rng.uniform(-math.radians(5), math.radians(5)),
            covariance=np.diag([1e-4, 1e-4, 1e-4, 0.05]),
            roll=roll,
            pitch=pitch,
        )
        updated = ekf_update(perturbed, fields, roll, pitch, layout, MMAG, cfg)
        dp0 = np.linalg.norm(perturbed.position - true_pose.position)
        dp1 = np.linalg.norm(updated.position - true_pose.position)
        dy0 = abs(perturbed.yaw - yaw)
        dy1 = abs(updated.yaw - yaw)
        assert dp1 < dp0
        # a single linearized step cannot contract a component that starts at
        # zero (second-order coupling), so yaw is checked jointly with
        # position in the perturbation-scaled norm
        scale_p, scale_y = 0.005, math.radians(5)
        e0 = math.hypot(dp0 / scale_p, dy0 / scale_y)
        e1 = math.hypot(dp1 / scale_p, dy1 / scale_y)
        assert e1 < e0


def test_update_joseph_form_keeps_covariance_psd():
    rng = np.random.default_rng(64)
    cfg = EkfConfig()
    layout = LAYOUT0
    state = _state(roll=0.5)
    for _ in range(1000):
        fields = _capsule_fields(state.full_pose, layout).reshape(36, 3)
        fields = fields + rng.normal(0, 1e-5, fields.shape)
        state = ekf_update(state, fields, state.roll, state.pitch, layout, MMAG, cfg)
        P = state.covariance
        assert np.max(np.abs(P - P.T)) < 1e-12
        assert np.min(np.linalg.eigvalsh(P)) >= -1e-10


def test_yaw_freeze_near_vertical_no_nan():
    cfg = EkfConfig()
    layout = LAYOUT0
    state = _state(roll=0.01, pitch=0.0)
    fields = _capsule_fields(state.full_pose, layout).reshape(36, 3)
    updated = ekf_update(state, fields, 0.01, 0.0, layout, MMAG, cfg)
    assert updated.yaw_frozen
    assert np.all(np.isfinite(updated.position))
    assert np.isfinite(updated.yaw)
    assert updated.yaw == pytest.approx(state.yaw, abs=1e-12)


# ---------------------------------------------------------------------------
# full tracking


def _static_frames(pose, layout, n, rng, imu_noise=ImuNoise.zero()):
    caps = PlacedMagnet(pose, default_capsule_spec())
    for i in range(n):
        raw = sample_array(caps, None, ENV0, layout, noise_seed=rng)
        accel, gyro, roll, pitch = sample_imu(pose, np.zeros(3), np.zeros(3), rng, imu_noise)
        yield SensorFrame(i * 0.01, raw, accel, gyro, roll, pitch)


def test_track_step_static_convergence_std():
    rng = np.random.default_rng(65)
    layout = SensorArrayLayout(noise_sigma=1e-5)
    pose = Pose.from_euler([0.02, -0.01, 0.10], 0.5, 0.1, 0.8)
    roll, pitch, _ = pose.euler()
    cfg = _small_q_cfg()
    fields0 = _capsule_fields(pose, layout)
    fix = ls_initialize(fields0, roll, pitch, layout, MMAG)
    state = initial_state(fix, roll, pitch)
    history = []
    for frame in _static_frames(pose, layout, 1000, rng):
        state = track_step(state, frame, None, ENV0, layout, MMAG, cfg)
        history.append(state.position)
    tail = np.array(history[300:])
    stds = tail.std(axis=0)
    assert np.all(stds < 1e-3), stds


def test_track_step_actuator_subtraction_is_exact():
    from magprobe.field_models import default_actuator_spec

    layout = SensorArrayLayout(noise_sigma=0.0)
    pose = Pose.from_euler([0.0, 0.0, 0.1], 0.4, 0.0, 0.2)
    roll, pitch, _ = pose.euler()
    caps = PlacedMagnet(pose, default_capsule_spec())
    act = PlacedMagnet(Pose(np.array([0.05, 0.0, 0.35])), default_actuator_spec())
    cfg = EkfConfig()
    fix = ls_initialize(_capsule_fields(pose, layout), roll, pitch, layout, MMAG)
    s0 = initial_state(fix, roll, pitch)

    raw_with = sample_array(caps, act, ENV0, layout)
    raw_without = sample_array(caps, None, ENV0, layout)
    accel, gyro, r, p = sample_imu(pose, np.zeros(3), np.zeros(3))
    f_with = SensorFrame(0.01, raw_with, accel, gyro, r, p)
    f_without = SensorFrame(0.01, raw_without, accel, gyro, r, p)
    s_with = track_step(s0, f_with, act, ENV0, layout, MMAG, cfg)
    s_without = track_step(s0, f_without, None, ENV0, layout, MMAG, cfg)
    assert np.max(np.abs(s_with.position - s_without.position)) < 1e-12
    assert abs(s_with.yaw - s_without.yaw) < 1e-12


def test_estimator_state_validation():
    with pytest.raises(ValueError):
        EstimatorState(np.zeros(3), 0.0, np.diag([1.0, 1.0, 1.0, -1.0]), 0.0, 0.0)
    asym = np.diag([1e-4] * 4)
    asym[0, 1] = 1e-6
    with pytest.raises(ValueError):
        EstimatorState(np.zeros(3), 0.0, asym, 0.0, 0.0)


def test_ekf_config_validation():
    with pytest.raises(ValueError):
        EkfConfig(process_noise=np.diag([0.0, 1, 1, 1]))
    with pytest.raises(ValueError):
        EkfConfig(measurement_noise_sigma=0.0)
    with pytest.raises(ValueError):
        EkfConfig(dt=-0.01)


def test_estimate_csv_row_format():
    from magprobe.localization import ESTIMATE_CSV_HEADER, estimate_csv_row

    state = _state()
    row = estimate_csv_row(1.23, state)
    assert len(row.split(",")) == len(ESTIMATE_CSV_HEADER.split(","))
