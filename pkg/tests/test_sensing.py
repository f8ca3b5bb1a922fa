import math

import numpy as np
import pytest

from magprobe.field_models import default_actuator_spec, default_capsule_spec
from magprobe.geometry import Pose, euler_to_matrix
from magprobe.kernels import dipole_field_batch
from magprobe.sensing import (
    EnvironmentField,
    ImuNoise,
    PlacedMagnet,
    SensorArrayLayout,
    SensorFrame,
    estimate_environment,
    extract_capsule_field,
    sample_array,
    sample_imu,
)


def _capsule(pos=(0.0, 0.0, 0.1), roll=0.3, pitch=0.1, yaw=0.4):
    return PlacedMagnet(
        Pose(np.asarray(pos, dtype=float), euler_to_matrix(roll, pitch, yaw)),
        default_capsule_spec(),
    )


def _actuator(pos=(0.05, -0.04, 0.32)):
    return PlacedMagnet(Pose(np.asarray(pos, dtype=float)), default_actuator_spec())


def test_default_layout():
    layout = SensorArrayLayout()
    assert layout.count == 36
    assert np.allclose(layout.positions[:, 2], 0.0)
    d = layout.positions[1] - layout.positions[0]
    assert np.linalg.norm(d) == pytest.approx(0.12)


def test_layout_validation():
    with pytest.raises(ValueError):
        SensorArrayLayout(np.zeros((4, 3)))
    pts = np.zeros((9, 3))
    pts[:, 0] = np.arange(9) * 0.1
    pts[3] = pts[2]
    with pytest.raises(ValueError):
        SensorArrayLayout(pts)


def test_environment_field_sanity_bound():
    with pytest.raises(ValueError):
        EnvironmentField(np.full((36, 3), 3e-4))


def test_sample_array_no_magnets_equals_bias():
    layout = SensorArrayLayout(noise_sigma=0.0)
    env = EnvironmentField.uniform([1e-5, -2e-5, 4e-5], 36)
    readings = sample_array(None, None, env, layout)
    assert np.array_equal(readings, env.per_sensor_bias)


def test_sample_array_capsule_only_is_dipole_field():
    layout = SensorArrayLayout(noise_sigma=0.0)
    env = EnvironmentField.zero(36)
    caps = _capsule()
    readings = sample_array(caps, None, env, layout)
    expected = dipole_field_batch(caps.moment_vector, caps.pose.position, layout.positions)
    assert np.max(np.abs(readings - expected)) < 1e-18


def test_sample_array_seeded_determinism():
    layout = SensorArrayLayout()
    env = EnvironmentField.zero(36)
    caps = _capsule()
    a = sample_array(caps, _actuator(), env, layout, noise_seed=123)
    b = sample_array(caps, _actuator(), env, layout, noise_seed=123)
    assert np.array_equal(a, b)
    c = sample_array(caps, _actuator(), env, layout, noise_seed=124)
    assert not np.array_equal(a, c)


def test_estimate_environment_constant():
    layout = SensorArrayLayout()
    bias = np.tile([1e-5, 2e-5, -3e-5], (36, 1))
    frames = [
        SensorFrame(i * 0.01, bias, np.zeros(3), np.zeros(3), 0.0, 0.0) for i in range(12)
    ]
    env = estimate_environment(frames)
    assert np.allclose(env.per_sensor_bias, bias, atol=1e-18)


def test_estimate_environment_sample_mean_statistics():
    rng = np.random.default_rng(42)
    layout = SensorArrayLayout()
    bias = EnvironmentField.uniform([2e-5, 0.0, -4e-5], 36).per_sensor_bias
    sigma = 1e-5
    frames = [
        SensorFrame(i * 0.01, bias + rng.normal(0, sigma, (36, 3)), np.zeros(3), np.zeros(3), 0.0, 0.0)
        for i in range(1000)
    ]
    env = estimate_environment(frames)
    # each per-sensor mean is within 3 sigma / sqrt(1000) almost surely
    tol = 3.0 * sigma / math.sqrt(1000)
    frac_ok = np.mean(np.abs(env.per_sensor_bias - bias) <= tol)
    assert frac_ok > 0.99


def test_estimate_environment_minimum_frames():
    frames = [SensorFrame(0.0, np.zeros((36, 3)), np.zeros(3), np.zeros(3), 0.0, 0.0)]
    with pytest.raises(ValueError):
        estimate_environment(frames)


def test_extract_round_trip_exact():
    layout = SensorArrayLayout(noise_sigma=0.0)
    env = EnvironmentField.uniform([1.5e-5, -1e-5, 3e-5], 36)
    caps = _capsule()
    act = _actuator()
    raw = sample_array(caps, act, env, layout)
    frame = SensorFrame(0.0, raw, np.zeros(3), np.zeros(3), 0.0, 0.0)
    recovered = extract_capsule_field(frame, act, env, layout)
    expected = dipole_field_batch(caps.moment_vector, caps.pose.position, layout.positions)
    assert np.max(np.abs(recovered - expected)) < 1e-15


def test_extract_round_trip_many_random_configurations():
    rng = np.random.default_rng(33)
    layout = SensorArrayLayout(noise_sigma=0.0)
    for _ in range(100):
        env = EnvironmentField(rng.normal(0, 2e-5, (36, 3)).clip(-1.9e-4, 1.9e-4))
        caps = _capsule(
            pos=(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.05, 0.2)),
            roll=rng.uniform(-1, 1),
            pitch=rng.uniform(-1, 1),
            yaw=rng.uniform(-3, 3),
        )
        act = _actuator((rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.3, 0.45)))
        raw = sample_array(caps, act, env, layout)
        frame = SensorFrame(0.0, raw, np.zeros(3), np.zeros(3), 0.0, 0.0)
        recovered = extract_capsule_field(frame, act, env, layout)
        expected = dipole_field_batch(caps.moment_vector, caps.pose.position, layout.positions)
        assert np.max(np.abs(recovered - expected)) < 1e-15


def test_extract_without_actuator():
    layout = SensorArrayLayout(noise_sigma=0.0)
    env = EnvironmentField.uniform([1e-5, 0, 0], 36)
    raw = np.full((36, 3), 5e-5)
    frame = SensorFrame(0.0, raw, np.zeros(3), np.zeros(3), 0.0, 0.0)
    out = extract_capsule_field(frame, None, env, layout)
    assert np.allclose(out, raw - env.per_sensor_bias)


def test_noise_statistics():
    layout = SensorArrayLayout(noise_sigma=1e-5)
    env = EnvironmentField.zero(36)
    rng = np.random.default_rng(77)
    samples = np.stack(
        [sample_array(None, None, env, layout, noise_seed=rng) for _ in range(10_000)]
    )
    std = samples.std()
    assert abs(std - 1e-5) / 1e-5 < 0.02


def test_sample_imu_stationary_identity():
    accel, gyro, roll, pitch = sample_imu(Pose(np.array([0, 0, 0.1])), np.zeros(3), np.zeros(3))
    assert np.allclose(accel, [0, 0, 9.81], atol=1e-15)
    assert np.array_equal(gyro, np.zeros(3))
    assert roll == 0.0 and pitch == 0.0


def test_sample_imu_gravity_consistency_any_orientation():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pose = Pose(np.zeros(3), euler_to_matrix(*rng.uniform(-1.2, 1.2, 3)))
        accel, _, _, _ = sample_imu(pose, np.zeros(3), np.zeros(3))
        world = pose.orientation @ accel + np.array([0, 0, -9.81])
        assert np.max(np.abs(world)) < 1e-12


def test_sample_imu_free_fall():
    accel, _, _, _ = sample_imu(
        Pose(np.array([0, 0, 0.1])), np.array([0, 0, -9.81]), np.zeros(3)
    )
    assert np.max(np.abs(accel)) < 1e-15


def test_sample_imu_gimbal_guard():
    pose = Pose(np.zeros(3), euler_to_matrix(0.0, math.pi / 2 - 1e-5, 0.0))
    with pytest.raises(Exception):
        sample_imu(pose, np.zeros(3), np.zeros(3))


def test_sample_imu_noise_is_seeded():
    pose = Pose(np.array([0, 0, 0.1]))
    noise = ImuNoise()
    a1 = sample_imu(pose, np.zeros(3), np.zeros(3), noise_seed=5, noise=noise)
    a2 = sample_imu(pose, np.zeros(3), np.zeros(3), noise_seed=5, noise=noise)
    assert np.array_equal(a1[0], a2[0]) and a1[2] == a2[2]


def test_frame_json_round_trip(tmp_path):
    from magprobe.sensing import read_frames, write_frames

    rng = np.random.default_rng(9)
    frames = [
        SensorFrame(
            timestamp=i * 0.01,
            raw_fields=rng.normal(0, 1e-5, (36, 3)),
            imu_accel=rng.normal(0, 1, 3),
            imu_gyro=rng.normal(0, 0.1, 3),
            imu_roll=rng.uniform(-1, 1),
            imu_pitch=rng.uniform(-1, 1),
        )
        for i in range(5)
    ]
    path = tmp_path / "frames.jsonl"
    write_frames(path, frames)
    back = read_frames(path)
    assert len(back) == 5
    for a, b in zip(frames, back):
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.raw_fields, b.raw_fields)
        assert np.array_equal(a.imu_gyro, b.imu_gyro)
        assert a.imu_roll == b.imu_roll
