import math

import numpy as np
import pytest

from magprobe.control import (
    ActuatorSetpoint,
    ClinicalCommand,
    CommandClampError,
    ControlGains,
    ControlTarget,
    DynamicsParams,
    PoseHistory,
    SafetyBox,
    TrackingErrors,
    apply_command_to_pose,
    clinical_command_to_target,
    compute_errors,
    desired_wrench,
    estimate_velocity,
    orientation_error_vector,
    solve_actuator_pose,
)
from magprobe.field_models import (
    MU0,
    Wrench,
    default_actuator_spec,
    default_capsule_spec,
    dipole_wrench,
    moment_from_spec,
)
from magprobe.geometry import Pose, euler_to_matrix

MA = moment_from_spec(default_actuator_spec())
MC = moment_from_spec(default_capsule_spec())


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# velocity estimation


def test_velocity_uniform_motion_exact():
    v = np.array([0.02, -0.01, 0.005])
    samples = [(i * 0.01, Pose(v * i * 0.01)) for i in range(30)]
    vel, _, cold = estimate_velocity(samples, window=0.2)
    assert not cold
    assert np.max(np.abs(vel - v)) < 1e-12


def test_velocity_static_zero():
    samples = [(i * 0.01, Pose(np.array([1.0, 2.0, 3.0]))) for i in range(30)]
    vel, mrate, _ = estimate_velocity(samples)
    assert np.array_equal(vel, np.zeros(3))
    assert np.array_equal(mrate, np.zeros(3))


def test_velocity_cold_start():
    vel, mrate, cold = estimate_velocity([(0.0, Pose(np.zeros(3)))])
    assert cold and np.array_equal(vel, np.zeros(3))


def test_velocity_sinusoid_matches_windowed_mean_derivative():
    # with a 0.2 s window the mean of consecutive differences equals
    # (p(t) - p(t - w)) / w; compare against that closed form at 1 Hz
    f = 1.0
    w = 0.2
    ts = np.arange(0, 1.0, 0.01)
    samples = [(t, Pose(np.array([math.sin(2 * math.pi * f * t), 0, 0]))) for t in ts]
    vel, _, _ = estimate_velocity(samples, window=w)
    t1 = ts[-1]
    expected = (math.sin(2 * math.pi * f * t1) - math.sin(2 * math.pi * f * (t1 - w))) / w
    assert abs(vel[0] - expected) / abs(expected) < 0.01


def test_pose_history_ring():
    hist = PoseHistory(window=0.2, maxlen=8)
    for i in range(20):
        hist.push(i * 0.01, Pose(np.array([i * 0.001, 0, 0])))
    vel, _, cold = hist.velocity()
    assert not cold
    assert vel[0] == pytest.approx(0.1, rel=1e-9)


# ---------------------------------------------------------------------------
# errors and desired wrench


def test_compute_errors_at_target():
    target = ControlTarget(np.array([0.1, 0, 0.1]), np.array([0, 0, 1.0]))
    e = compute_errors(target.desired_position, np.array([0, 0, 1.0]), np.zeros(3), np.zeros(3), target)
    assert np.array_equal(e.e_p, np.zeros(3))
    assert np.array_equal(e.e_o, np.zeros(3))


def test_compute_errors_cross_product():
    target = ControlTarget(np.zeros(3), np.array([0, 1.0, 0]))
    e = compute_errors(np.zeros(3), np.array([1.0, 0, 0]), np.zeros(3), np.zeros(3), target)
    assert np.allclose(e.e_o, [0, 0, 1.0])


def test_compute_errors_antipodal_blind_spot():
    target = ControlTarget(np.zeros(3), np.array([0, 0, 1.0]))
    e = compute_errors(np.zeros(3), np.array([0, 0, -1.0]), np.zeros(3), np.zeros(3), target)
    assert np.array_equal(e.e_o, np.zeros(3))  # cross product vanishes at 180 deg


def test_orientation_error_vector_antipodal_escape():
    v = orientation_error_vector(np.array([0, 0, -1.0]), np.array([0, 0, 1.0]))
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert abs(v @ np.array([0, 0, 1.0])) < 1e-12


def test_orientation_error_magnitude_is_sine():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a, b = _unit(rng), _unit(rng)
        e = compute_errors(np.zeros(3), a, np.zeros(3), np.zeros(3), ControlTarget(np.zeros(3), b))
        angle = math.acos(np.clip(a @ b, -1, 1))
        assert abs(np.linalg.norm(e.e_o) - abs(math.sin(angle))) < 1e-12


def test_desired_wrench_position_example():
    errors = TrackingErrors(np.array([0.1, 0, 0]), np.zeros(3), np.zeros(3), np.zeros(3))
    w = desired_wrench(errors, ControlGains(), DynamicsParams(), speed=0.0)
    assert np.allclose(w.force, [0.5, 0, 0.04 * 9.81], atol=1e-12)
    assert np.array_equal(w.torque, np.zeros(3))


def test_desired_wrench_levitation_hold():
    errors = TrackingErrors(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    dyn = DynamicsParams()
    w = desired_wrench(errors, ControlGains(), dyn, speed=0.0)
    assert np.allclose(w.force, -dyn.gravity_force, atol=1e-15)


def test_desired_wrench_pure_orientation():
    errors = TrackingErrors(np.zeros(3), np.zeros(3), np.array([0, 0, 0.5]), np.zeros(3))
    w = desired_wrench(errors, ControlGains(), DynamicsParams(), speed=0.0)
    assert np.allclose(w.torque, [0, 0, 0.01], atol=1e-15)


def test_desired_wrench_friction_compensation_direction():
    errors = TrackingErrors(np.zeros(3), np.array([-0.05, 0, 0]), np.zeros(3), np.zeros(3))
    dyn = DynamicsParams(friction_force=0.3)
    # de_p = -v, so the probe moves at +x 0.05 m/s; compensation pushes +x
    w = desired_wrench(errors, ControlGains(kd=0.0), dyn, speed=0.05)
    assert w.force[0] == pytest.approx(0.3)
    w0 = desired_wrench(errors, ControlGains(kd=0.0), dyn, speed=0.0)
    assert w0.force[0] == pytest.approx(0.0)


def test_desired_wrench_linearity():
    rng = np.random.default_rng(4)
    gains = ControlGains(kp=[3, 4, 5], kd=[1, 2, 3], kpo=0.02, kdo=0.005)
    dyn = DynamicsParams()
    zero = TrackingErrors(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    bias = desired_wrench(zero, gains, dyn, 0.0)  # pure compensation terms
    for _ in range(20):
        e1 = TrackingErrors(*(rng.normal(size=3) for _ in range(4)))
        e2 = TrackingErrors(*(rng.normal(size=3) for _ in range(4)))
        esum = TrackingErrors(
            e1.e_p + e2.e_p, e1.de_p + e2.de_p, e1.e_o + e2.e_o, e1.de_o + e2.de_o
        )
        w1 = desired_wrench(e1, gains, dyn, 0.0)
        w2 = desired_wrench(e2, gains, dyn, 0.0)
        ws = desired_wrench(esum, gains, dyn, 0.0)
        assert np.max(
            np.abs((ws.force - bias.force) - (w1.force - bias.force) - (w2.force - bias.force))
        ) < 1e-12
        assert np.max(np.abs(ws.torque - w1.torque - w2.torque)) < 1e-12


# ---------------------------------------------------------------------------
# actuator pose optimization


def test_solve_coaxial_closed_form():
    box = SafetyBox()
    sp = solve_actuator_pose(
        Wrench([0, 0, 0.5], [0, 0, 0]), np.zeros(3), np.array([0, 0, 1.0]), MC, MA, box
    )
    h = (3 * MU0 * MA * MC / (2 * math.pi * 0.5)) ** 0.25
    assert np.linalg.norm(sp.position - [0, 0, h]) < 1e-6
    assert abs(abs(sp.moment_dir[2]) - 1.0) < 1e-9
    assert sp.residual < 1e-8
    assert not sp.infeasible


def test_solve_self_consistency_100_random():
    box = SafetyBox()
    rng = np.random.default_rng(3)
    for _ in range(100):
        pa = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.15, 0.35)])
        md = _unit(rng)
        mcd = _unit(rng)
        w = dipole_wrench(MC * mcd, np.zeros(3), MA * md, pa)
        sp = solve_actuator_pose(Wrench(w.force, w.torque), np.zeros(3), mcd, MC, MA, box)
        assert sp.residual < 1e-8


def test_solve_zero_wrench_retreats_to_boundary():
    box = SafetyBox()
    sp = solve_actuator_pose(
        Wrench(np.zeros(3), np.zeros(3)), np.zeros(3), np.array([0, 0, 1.0]), MC, MA, box
    )
    lo, hi = box.bounds(0.0)
    # field minimized at maximal distance: expect the far face of the box
    at_face = np.isclose(sp.position[2], hi[2], atol=1e-9) or any(
        np.isclose(abs(sp.position[i]), box.xy_half, atol=1e-9) for i in (0, 1)
    )
    assert at_face
    achieved = dipole_wrench(
        MC * np.array([0, 0, 1.0]), np.zeros(3), MA * sp.moment_dir, sp.position
    )
    assert sp.residual == pytest.approx(
        math.hypot(np.linalg.norm(achieved.force), 10.0 * np.linalg.norm(achieved.torque)),
        rel=1e-6,
    )


def test_setpoint_always_inside_box():
    box = SafetyBox()
    rng = np.random.default_rng(5)
    warm = None
    for _ in range(50):
        f = rng.normal(0, 1.0, 3)
        tau = rng.normal(0, 0.01, 3)
        pc = rng.uniform(-0.1, 0.1, 3) * [1, 1, 0] + [0, 0, rng.uniform(0.05, 0.15)]
        sp = solve_actuator_pose(
            Wrench(f, tau), pc, np.array([0, 0, 1.0]), MC, MA, box, warm_start=warm
        )
        lo, hi = box.bounds(pc[2])
        assert np.all(sp.position >= lo - 1e-12) and np.all(sp.position <= hi + 1e-12)
        warm = sp


def test_warm_start_iteration_budget():
    box = SafetyBox()
    sp = solve_actuator_pose(
        Wrench([0, 0, 0.45], [0, 0, 0]), np.zeros(3), np.array([0, 0, 1.0]), MC, MA, box
    )
    for k in range(1, 20):
        f = np.array([0.001 * k, 0, 0.45])
        sp = solve_actuator_pose(
            Wrench(f, np.zeros(3)),
            np.zeros(3),
            np.array([0, 0, 1.0]),
            MC,
            MA,
            box,
            warm_start=sp,
        )
        assert sp.iterations <= 15


def test_infeasible_demand_flagged_best_effort():
    box = SafetyBox()
    sp = solve_actuator_pose(
        Wrench([0, 0, 50.0], [0, 0, 0]), np.zeros(3), np.array([0, 0, 1.0]), MC, MA, box
    )
    assert sp.infeasible
    assert np.all(np.isfinite(sp.position))


def test_coaxial_attraction_magnitude_invariant():
    w = dipole_wrench(
        np.array([0, 0, MC]), np.zeros(3), np.array([0, 0, MA]), np.array([0, 0, 0.2])
    )
    assert np.linalg.norm(w.force) == pytest.approx(0.878, abs=1e-3)


# ---------------------------------------------------------------------------
# clinical commands


def test_command_advance():
    pose = Pose(np.zeros(3))
    t = clinical_command_to_target(pose, ClinicalCommand("advance", 0.01))
    assert np.allclose(t.desired_position, [0.01, 0, 0], atol=1e-15)
    assert np.allclose(t.desired_moment_dir, [0, 0, 1.0], atol=1e-15)


def test_command_anteflex():
    pose = Pose(np.zeros(3))
    t = clinical_command_to_target(pose, ClinicalCommand("anteflex", math.radians(-15)))
    s, c = math.sin(math.radians(15)), math.cos(math.radians(15))
    assert np.allclose(t.desired_moment_dir, [-s, 0, c], atol=1e-12)


def test_command_turn():
    pose = Pose(np.zeros(3))
    t = clinical_command_to_target(pose, ClinicalCommand("turn", math.radians(15)))
    s, c = math.sin(math.radians(15)), math.cos(math.radians(15))
    assert np.allclose(t.desired_moment_dir, [0, -s, c], atol=1e-12)


def test_command_clamp():
    pose = Pose(np.zeros(3))
    with pytest.raises(CommandClampError):
        clinical_command_to_target(pose, ClinicalCommand("advance", 0.1))
    with pytest.raises(CommandClampError):
        clinical_command_to_target(pose, ClinicalCommand("turn", math.radians(45)))


def test_command_set_absolute():
    pose = Pose(np.zeros(3))
    tgt = ControlTarget(np.array([0.05, 0, 0.1]), np.array([0, 1.0, 0]))
    out = clinical_command_to_target(pose, ClinicalCommand("set_absolute", absolute_target=tgt))
    assert out is tgt
    new_pose = apply_command_to_pose(pose, ClinicalCommand("set_absolute", absolute_target=tgt))
    assert np.allclose(new_pose.moment_dir, [0, 1.0, 0], atol=1e-12)


def test_commands_compose_in_probe_frame():
    pose = Pose(np.zeros(3), euler_to_matrix(0.2, -0.1, 0.5))
    p2 = apply_command_to_pose(pose, ClinicalCommand("advance", 0.008))
    assert np.allclose(p2.position, 0.008 * pose.x_axis, atol=1e-15)
    p3 = apply_command_to_pose(p2, ClinicalCommand("flex", 0.1))
    assert np.allclose(p3.orientation, pose.orientation @ euler_to_matrix(0, 0, 0.1), atol=1e-12)


# ---------------------------------------------------------------------------
# type validation


def test_gains_validation():
    with pytest.raises(ValueError):
        ControlGains(kp=0.0)
    with pytest.raises(ValueError):
        ControlGains(kd=-1.0)
    g = ControlGains(kp=[1, 2, 3])
    assert np.array_equal(g.kp, [1, 2, 3])


def test_target_requires_unit_moment():
    with pytest.raises(ValueError):
        ControlTarget(np.zeros(3), np.array([0, 0, 1.1]))


def test_setpoint_requires_unit_moment():
    with pytest.raises(ValueError):
        ActuatorSetpoint(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.0)


def test_dynamics_validation():
    with pytest.raises(ValueError):
        DynamicsParams(mass=0.0)
    with pytest.raises(ValueError):
        DynamicsParams(friction_force=-0.1)
    dyn = DynamicsParams()
    assert np.allclose(dyn.gravity_force, [0, 0, -0.04 * 9.81])
    dyn0 = DynamicsParams(gravity_force=np.zeros(3))
    assert np.array_equal(dyn0.gravity_force, np.zeros(3))
