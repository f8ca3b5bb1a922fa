"""Ground-truth probe physics: magnetic wrench, gravity, stick-slip friction,
tether damping, a rate-limited actuator carriage, and environment constraints
(free space, a horizontal plane channel, or a tube around a centerline).

Linear and angular states integrate with semi-implicit Euler; contacts are
resolved by projection with normal-velocity cancellation (no restitution).
Angular velocity is kept in the probe body frame, matching the IMU gyro.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from . import kernels
from .control import (
    ACTUATOR_MAX_ANGULAR,
    ACTUATOR_MAX_SPEED,
    STICK_VELOCITY,
    ActuatorSetpoint,
    DynamicsParams,
)
from .geometry import Pose, axis_angle_to_matrix
from .sensing import GRAVITY

#: half of the probe's smallest cross-section; tubes must be wider than this
PROBE_HALF_HEIGHT = 0.0075  # m

#: distance beyond the tube wall at which projection gives up
TUBE_RECOVERY_DISTANCE = 0.05  # m


class SimulationFault(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# centerline and environment


class Centerline:
    """Cubic-spline curve through sampled points with an arc-length chart.

    Exposes position/tangent/desired-moment queries by arc length s, where the
    desired moment direction is the unit vector perpendicular to the tangent
    lying in the vertical plane (upward-pointing)."""

    def __init__(self, points, smooth_passes: int = 0):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 4:
            raise ValueError("centerline needs at least 4 points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg < 1e-9):
            raise ValueError("centerline contains coincident points")
        for _ in range(smooth_passes):
            inner = 0.25 * pts[:-2] + 0.5 * pts[1:-1] + 0.25 * pts[2:]
            pts = np.vstack([pts[0], inner, pts[-1]])
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        if chord[-1] <= 0.05:
            raise ValueError("centerline arc length must exceed 0.05 m")
        self._spline = CubicSpline(chord, pts, axis=0, bc_type="natural")
        self._du = self._spline.derivative()
        self._ddu = self._spline.derivative(2)
        # arc-length chart s(u) from a dense resampling
        u = np.linspace(0.0, chord[-1], max(400, 40 * pts.shape[0]))
        xyz = self._spline(u)
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xyz, axis=0), axis=1))])
        self._u_dense = u
        self._s_dense = s
        self.length = float(s[-1])

    def _u_of_s(self, s: float) -> float:
        s = min(max(float(s), 0.0), self.length)
        return float(np.interp(s, self._s_dense, self._u_dense))

    def position(self, s: float) -> np.ndarray:
        return np.asarray(self._spline(self._u_of_s(s)), dtype=float)

    def tangent(self, s: float) -> np.ndarray:
        d = np.asarray(self._du(self._u_of_s(s)), dtype=float)
        return d / np.linalg.norm(d)

    def curvature(self, s: float) -> float:
        u = self._u_of_s(s)
        d1 = np.asarray(self._du(u), dtype=float)
        d2 = np.asarray(self._ddu(u), dtype=float)
        n1 = np.linalg.norm(d1)
        return float(np.linalg.norm(np.cross(d1, d2)) / n1**3)

    def moment_dir(self, s: float) -> np.ndarray:
        t = self.tangent(s)
        up = np.array([0.0, 0.0, 1.0]) - t[2] * t
        n = np.linalg.norm(up)
        if n < 1e-9:
            raise ValueError("tangent is vertical; in-plane moment undefined")
        return up / n

    def nearest(self, point: np.ndarray, s_hint: float | None = None) -> float:
        """Arc length of the closest curve point (local search around a hint,
        global scan otherwise)."""
        p = np.asarray(point, dtype=float)
        if s_hint is None:
            ss = self._s_dense[:: max(1, self._s_dense.size // 400)]
        else:
            ss = np.linspace(
                max(0.0, s_hint - 0.03), min(self.length, s_hint + 0.03), 61
            )
        d = np.linalg.norm(self._spline(np.interp(ss, self._s_dense, self._u_dense)) - p, axis=1)
        i = int(np.argmin(d))
        lo = ss[max(0, i - 1)]
        hi = ss[min(len(ss) - 1, i + 1)]
        for _ in range(25):
            m1 = lo + (hi - lo) / 3.0
            m2 = hi - (hi - lo) / 3.0
            if np.linalg.norm(self.position(m1) - p) < np.linalg.norm(self.position(m2) - p):
                hi = m2
            else:
                lo = m1
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Environment:
    """Containment for the probe: free space, a horizontal channel between two
    planes (probe center z within z_level +- gap/2), or a tube of given radius
    around a centerline."""

    kind: str = "free"
    z_level: float = 0.0
    gap: float = 0.004
    centerline: Centerline | None = None
    tube_radius: float = 0.010

    def __post_init__(self):
        if self.kind not in ("free", "plane_channel", "tube"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.kind == "tube":
            if self.centerline is None:
                raise ValueError("tube environment requires a centerline")
            if self.tube_radius <= PROBE_HALF_HEIGHT:
                raise ValueError("tube radius must exceed the probe half-height")
        if self.gap <= 0.0:
            raise ValueError("gap must be positive")

    @classmethod
    def free(cls) -> "Environment":
        return cls("free")

    @classmethod
    def plane_channel(cls, z_level: float, gap: float = 0.004) -> "Environment":
        return cls("plane_channel", z_level=z_level, gap=gap)

    @classmethod
    def tube(cls, centerline: Centerline, radius: float = 0.010) -> "Environment":
        return cls("tube", centerline=centerline, tube_radius=radius)


def load_centerline(points, radius: float = 0.010, smooth_passes: int = 0) -> Environment:
    """Fit a centerline spline through the points and wrap it as a tube."""
    return Environment.tube(Centerline(points, smooth_passes=smooth_passes), radius=radius)


# ---------------------------------------------------------------------------
# world state and stepping


@dataclass(frozen=True)
class WorldState:
    time: float
    probe_pose: Pose
    probe_linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    probe_angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # body
    actuator_pose: Pose | None = None
    disturbance_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    disturbance_expiry: float = -math.inf
    probe_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world, m/s^2
    path_progress: float = 0.0  # arc-length hint for tube projection

    def __post_init__(self):
        for name in ("probe_linear_velocity", "probe_angular_velocity",
                     "disturbance_force", "probe_accel"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            v.setflags(write=False)
            object.__setattr__(self, name, v)


def apply_disturbance(state: WorldState, force, duration: float) -> WorldState:
    """Register an external force applied until ``state.time + duration``."""
    if duration <= 0.0:
        raise ValueError("disturbance duration must be positive")
    return replace(
        state,
        disturbance_force=np.asarray(force, dtype=float),
        disturbance_expiry=state.time + duration,
    )


def _move_actuator(current: Pose | None, setpoint: ActuatorSetpoint, dt: float) -> Pose:
    if current is None:
        e1 = np.array([1.0, 0.0, 0.0])
        z = setpoint.moment_dir
        x = e1 - (e1 @ z) * z
        if np.linalg.norm(x) < 1e-6:
            x = np.array([0.0, 1.0, 0.0]) - (np.array([0.0, 1.0, 0.0]) @ z) * z
        x /= np.linalg.norm(x)
        return Pose(setpoint.position, np.column_stack([x, np.cross(z, x), z]))
    delta = setpoint.position - current.position
    dist = float(np.linalg.norm(delta))
    max_step = ACTUATOR_MAX_SPEED * dt
    position = setpoint.position if dist <= max_step else current.position + delta * (max_step / dist)

    z_cur = current.moment_dir
    z_tgt = setpoint.moment_dir
    cross = np.cross(z_cur, z_tgt)
    sin_a = float(np.linalg.norm(cross))
    cos_a = float(z_cur @ z_tgt)
    angle = math.atan2(sin_a, cos_a)
    R = current.orientation
    if angle > 1e-12:
        axis = cross / sin_a if sin_a > 1e-12 else _fallback_axis(z_cur)
        step_angle = min(angle, ACTUATOR_MAX_ANGULAR * dt)
        R = axis_angle_to_matrix(axis * step_angle) @ R
    return Pose(position, R)


def _fallback_axis(z: np.ndarray) -> np.ndarray:
    a = np.zeros(3)
    a[int(np.argmin(np.abs(z)))] = 1.0
    a = a - (a @ z) * z
    return a / np.linalg.norm(a)


def _friction_and_stick(
    v: np.ndarray, f_drive: np.ndarray, dyn: DynamicsParams, env: Environment
) -> tuple[np.ndarray, bool]:
    """Coulomb-style constant resistance on the contact-tangential DOFs.

    Returns (friction force, stick). In the plane channel the tangential
    subspace is horizontal; in the tube the collapsed tissue grips the probe in
    every direction; free space has no contact."""
    if env.kind == "free" or dyn.friction_force == 0.0:
        return np.zeros(3), False
    if env.kind == "plane_channel":
        tangent_mask = np.array([1.0, 1.0, 0.0])
    else:
        tangent_mask = np.ones(3)
    v_t = v * tangent_mask
    f_t = f_drive * tangent_mask
    speed_t = float(np.linalg.norm(v_t))
    if speed_t < STICK_VELOCITY and float(np.linalg.norm(f_t)) <= dyn.friction_force:
        return np.zeros(3), True
    if speed_t >= STICK_VELOCITY:
        direction = v_t / speed_t
    else:
        fn = float(np.linalg.norm(f_t))
        direction = f_t / fn if fn > 0.0 else np.zeros(3)
    return -dyn.friction_force * direction, False


def step(
    state: WorldState,
    setpoint: ActuatorSetpoint,
    dyn: DynamicsParams,
    env: Environment,
    dt: float,
    capsule_moment_magnitude: float,
    actuator_moment_magnitude: float,
) -> WorldState:
    """Advance the world by one semi-implicit Euler step."""
    if not 0.0 < dt <= 0.02:
        raise ValueError("dt must be in (0, 0.02]")

    actuator_pose = _move_actuator(state.actuator_pose, setpoint, dt)
    pose = state.probe_pose
    m_c = capsule_moment_magnitude * pose.moment_dir
    m_a = actuator_moment_magnitude * actuator_pose.moment_dir
    sep = np.linalg.norm(pose.position - actuator_pose.position)
    if sep < 0.05:
        raise SimulationFault(f"actuator-probe separation {sep:.3f} m below 0.05 m")
    f_mag, tau_mag = kernels.dipole_wrench_fast(
        m_c, pose.position, m_a, actuator_pose.position
    )

    v = state.probe_linear_velocity
    f_drive = f_mag + dyn.gravity_force - dyn.tether_damping * v
    if state.time < state.disturbance_expiry:
        f_drive = f_drive + state.disturbance_force

    f_fric, stick = _friction_and_stick(v, f_drive, dyn, env)
    if stick:
        if env.kind == "plane_channel":
            v = v * np.array([0.0, 0.0, 1.0])
            f_net = (f_drive + f_fric) * np.array([0.0, 0.0, 1.0])
        else:
            v = np.zeros(3)
            f_net = np.zeros(3)
    else:
        f_net = f_drive + f_fric

    # resting contact: an active constraint face supplies a normal force, so
    # the into-wall force and velocity components are removed before
    # integration (projection alone would bleed energy every step)
    path_s = state.path_progress
    ctol = 1e-9
    if env.kind == "plane_channel":
        lo = env.z_level - 0.5 * env.gap
        hi = env.z_level + 0.5 * env.gap
        if (pose.position[2] <= lo + ctol and f_net[2] < 0.0) or (
            pose.position[2] >= hi - ctol and f_net[2] > 0.0
        ):
            f_net = f_net * np.array([1.0, 1.0, 0.0])
            v = v * np.array([1.0, 1.0, 0.0])
    elif env.kind == "tube":
        cl = env.centerline
        path_s = cl.nearest(
            pose.position, s_hint=state.path_progress if state.time > 0 else None
        )
        tangent = cl.tangent(path_s)
        offset = pose.position - cl.position(path_s)
        radial = offset - (offset @ tangent) * tangent
        dist = float(np.linalg.norm(radial))
        if dist >= env.tube_radius - ctol and dist > 0.0:
            n_hat = radial / dist
            if float(f_net @ n_hat) > 0.0:
                f_net = f_net - float(f_net @ n_hat) * n_hat
            if float(v @ n_hat) > 0.0:
                v = v - float(v @ n_hat) * n_hat

    v_new = v + (f_net / dyn.mass) * dt
    p_new = pose.position + v_new * dt

    # angular state: advance the world-frame angular momentum (exactly
    # conserved under zero torque, so no gyroscopic blow-up) and substep
    # because the magnetic alignment mode can be stiff
    # (omega ~ sqrt(|m||b| / I))
    inertia = dyn.inertia
    b_at_probe = kernels.dipole_field_batch(
        m_a, actuator_pose.position, pose.position[None, :]
    )[0]
    i_min = float(np.min(np.diag(inertia)))
    stiff = math.sqrt(
        capsule_moment_magnitude * float(np.linalg.norm(b_at_probe)) / i_min
    )
    omega_mag = float(np.linalg.norm(state.probe_angular_velocity))
    n_sub = min(200, max(1, int(math.ceil((stiff + omega_mag) * dt / 0.25))))
    dts = dt / n_sub
    R_new = pose.orientation
    L_world = R_new @ (inertia @ state.probe_angular_velocity)
    omega_new = state.probe_angular_velocity
    for _ in range(n_sub):
        m_vec = capsule_moment_magnitude * R_new[:, 2]
        tau_world = np.cross(m_vec, b_at_probe) - R_new @ (
            dyn.rotational_damping * omega_new
        )
        L_world = L_world + tau_world * dts
        omega_new = np.linalg.solve(inertia, R_new.T @ L_world)
        R_new = R_new @ axis_angle_to_matrix(omega_new * dts)

    if env.kind == "plane_channel":
        lo = env.z_level - 0.5 * env.gap
        hi = env.z_level + 0.5 * env.gap
        if p_new[2] < lo:
            p_new = np.array([p_new[0], p_new[1], lo])
            v_new = v_new * np.array([1.0, 1.0, 0.0]) if v_new[2] < 0 else v_new
        elif p_new[2] > hi:
            p_new = np.array([p_new[0], p_new[1], hi])
            v_new = v_new * np.array([1.0, 1.0, 0.0]) if v_new[2] > 0 else v_new
    elif env.kind == "tube":
        cl = env.centerline
        path_s = cl.nearest(p_new, s_hint=path_s)
        center = cl.position(path_s)
        tangent = cl.tangent(path_s)
        offset = p_new - center
        radial = offset - (offset @ tangent) * tangent
        dist = float(np.linalg.norm(radial))
        if dist > env.tube_radius + TUBE_RECOVERY_DISTANCE:
            raise SimulationFault(
                f"probe {dist * 1e3:.1f} mm from centerline exceeds recovery range"
            )
        if dist > env.tube_radius:
            n_hat = radial / dist
            p_new = p_new - (dist - env.tube_radius) * n_hat
            vn = float(v_new @ n_hat)
            if vn > 0.0:
                v_new = v_new - vn * n_hat

    accel = (v_new - state.probe_linear_velocity) / dt

    return WorldState(
        time=state.time + dt,
        probe_pose=Pose(p_new, R_new),
        probe_linear_velocity=v_new,
        probe_angular_velocity=omega_new,
        actuator_pose=actuator_pose,
        disturbance_force=state.disturbance_force,
        disturbance_expiry=state.disturbance_expiry,
        probe_accel=accel,
        path_progress=path_s,
    )


def mechanical_energy(
    state: WorldState,
    dyn: DynamicsParams,
    capsule_moment_magnitude: float,
    actuator_moment_magnitude: float,
) -> float:
    """Kinetic + gravitational + dipole interaction energy (for drift checks)."""
    v = state.probe_linear_velocity
    w = state.probe_angular_velocity
    kinetic = 0.5 * dyn.mass * float(v @ v) + 0.5 * float(w @ (dyn.inertia @ w))
    potential = dyn.mass * 9.81 * state.probe_pose.position[2]
    magnetic = 0.0
    if state.actuator_pose is not None:
        b = kernels.dipole_field_batch(
            actuator_moment_magnitude * state.actuator_pose.moment_dir,
            state.actuator_pose.position,
            state.probe_pose.position[None, :],
        )[0]
        magnetic = -float(
            (capsule_moment_magnitude * state.probe_pose.moment_dir) @ b
        )
    return kinetic + potential + magnetic
