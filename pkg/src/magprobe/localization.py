"""Capsule localization: nonlinear least-squares initial fix and an EKF that
fuses IMU motion prediction with the magnetometer-array measurements.

The magnetically observable unknowns are the capsule position and its yaw;
roll and pitch come from the IMU attitude channel, and the full 6-DOF pose is
the composition Rz(yaw) Ry(pitch) Rx(roll). Yaw observability degrades as the
dipole axis approaches vertical; below a tilt threshold the filter freezes the
yaw update instead of collapsing onto an unobservable direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .geometry import Pose, axis_angle_to_matrix, euler_to_matrix, matrix_to_euler, wrap_angle
from .sensing import GRAVITY, EnvironmentField, PlacedMagnet, SensorArrayLayout, SensorFrame

#: workspace above the array (m): x, y in +-0.25, z in (0, 0.2]
WORKSPACE_HALF_XY = 0.25
WORKSPACE_Z_MAX = 0.20

#: |sin(tilt from vertical)| below which yaw is treated as unobservable
YAW_FREEZE_SIN_TILT = 0.05


class LocalizationError(RuntimeError):
    pass


class NoConvergenceError(LocalizationError):
    """Initial localization residual too large: capsule absent or outside."""


class EstimatorNumericalError(LocalizationError):
    """Innovation covariance solve failed; carries a condition diagnostic."""


@dataclass(frozen=True)
class EkfConfig:
    process_noise: np.ndarray = field(
        default_factory=lambda: np.diag([0.01, 0.01, 0.01, 30.0])
    )
    measurement_noise_sigma: float = 1e-5  # T
    dt: float = 0.01  # s
    yaw_freeze_sin_tilt: float = YAW_FREEZE_SIN_TILT
    yaw_noise_inflation: float = 10.0

    def __post_init__(self):
        q = np.asarray(self.process_noise, dtype=float)
        if q.ndim == 1:
            q = np.diag(q)
        if q.shape != (4, 4) or np.any(np.diag(q) <= 0.0):
            raise ValueError("process noise must be a 4x4 with positive diagonal")
        if self.measurement_noise_sigma <= 0.0:
            raise ValueError("measurement noise sigma must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        q.setflags(write=False)
        object.__setattr__(self, "process_noise", q)


def _check_covariance(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float).reshape(4, 4)
    if np.max(np.abs(P - P.T)) > 1e-12:
        raise ValueError("covariance must be symmetric")
    P = 0.5 * (P + P.T)
    if float(np.min(np.linalg.eigvalsh(P))) < -1e-12:
        raise ValueError("covariance must be positive semi-definite")
    return P


@dataclass(frozen=True)
class EstimatorState:
    """EKF state (capsule position + yaw) with the attitude channel attached."""

    position: np.ndarray  # (3,) m
    yaw: float  # rad, wrapped to (-pi, pi]
    covariance: np.ndarray  # (4, 4)
    roll: float  # rad, measured
    pitch: float  # rad, measured
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m/s
    yaw_frozen: bool = False

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        v = np.asarray(self.velocity, dtype=float).reshape(3)
        P = _check_covariance(self.covariance)
        p.setflags(write=False)
        v.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)
        object.__setattr__(self, "covariance", P)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def full_pose(self) -> Pose:
        return Pose(self.position, euler_to_matrix(self.roll, self.pitch, self.yaw))

    @property
    def state_vector(self) -> np.ndarray:
        return np.array([*self.position, self.yaw])

    @property
    def sin_tilt(self) -> float:
        """|sin| of the dipole-axis tilt from vertical (yaw sensitivity scale)."""
        mz = math.cos(self.pitch) * math.cos(self.roll)
        return math.sqrt(max(0.0, 1.0 - mz * mz))


ESTIMATE_CSV_HEADER = "t,px,py,pz,roll,pitch,yaw,cov_trace"


def estimate_csv_row(t: float, state: EstimatorState) -> str:
    p = state.position
    return (
        f"{t!r},{p[0]!r},{p[1]!r},{p[2]!r},"
        f"{state.roll!r},{state.pitch!r},{state.yaw!r},"
        f"{float(np.trace(state.covariance))!r}"
    )


# ---------------------------------------------------------------------------
# initial localization


@dataclass(frozen=True)
class InitialFix:
    position: np.ndarray
    yaw: float
    residual_rms: float  # T, per field component
    yaw_observable: bool
    iterations: int


def _optimization_bounds() -> tuple[np.ndarray, np.ndarray]:
    # inflated workspace box; z floor keeps the fit off the sensor plane
    m = 0.06
    lo = np.array([-WORKSPACE_HALF_XY - m, -WORKSPACE_HALF_XY - m, 0.015, -4 * math.pi])
    hi = np.array([WORKSPACE_HALF_XY + m, WORKSPACE_HALF_XY + m, WORKSPACE_Z_MAX + m, 4 * math.pi])
    return lo, hi


def ls_initialize(
    capsule_fields: np.ndarray,
    roll: float,
    pitch: float,
    layout: SensorArrayLayout,
    moment_magnitude: float,
    residual_threshold: float | None = None,
    max_iter: int = 100,
    grid_size: int = 5,
) -> InitialFix:
    """Multi-start damped Gauss-Newton fit of (position, yaw) to the capsule
    fields at all sensors; raises NoConvergenceError when no start explains
    the measurements (capsule absent or outside the workspace)."""
    from .optim import levenberg_marquardt

    z = np.asarray(capsule_fields, dtype=float).reshape(-1)
    n3 = z.size
    if n3 != 3 * layout.count:
        raise ValueError("capsule_fields shape does not match the layout")
    if residual_threshold is None:
        residual_threshold = max(5.0 * layout.noise_sigma, 1e-9)

    mz = math.cos(pitch) * math.cos(roll)
    observable = math.sqrt(max(0.0, 1.0 - mz * mz)) >= YAW_FREEZE_SIN_TILT

    def residual_jac(x):
        h, H = kernels.measurement_model(
            x[:3], x[3], roll, pitch, moment_magnitude, layout.positions
        )
        return h - z, H

    lo, hi = _optimization_bounds()
    ticks = np.linspace(-WORKSPACE_HALF_XY * 0.8, WORKSPACE_HALF_XY * 0.8, grid_size)
    yaw_starts = [0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi] if observable else [0.0]

    starts = [
        np.array([gx, gy, 0.10, gyaw]) for gx in ticks for gy in ticks for gyaw in yaw_starts
    ]
    best = None
    total_iter = 0
    early_exit_rms = max(1.5 * layout.noise_sigma, 1e-11)
    for x0 in starts:
        res = levenberg_marquardt(
            residual_jac, x0, lower=lo, upper=hi, max_iter=max_iter, gtol=1e-12
        )
        total_iter += res.iterations
        if best is None or res.cost < best.cost:
            best = res
        if math.sqrt(2.0 * best.cost / n3) < early_exit_rms:
            break

    rms = math.sqrt(2.0 * best.cost / n3)
    if rms > residual_threshold:
        raise NoConvergenceError(
            f"initial localization residual {rms:.3e} T above threshold "
            f"{residual_threshold:.3e} T"
        )
    yaw = wrap_angle(float(best.x[3])) if observable else 0.0
    return InitialFix(
        position=best.x[:3].copy(),
        yaw=yaw,
        residual_rms=rms,
        yaw_observable=observable,
        iterations=total_iter,
    )


def initial_state(
    fix: InitialFix,
    roll: float,
    pitch: float,
    position_var: float = 1e-4,
    yaw_var: float = 0.1,
) -> EstimatorState:
    P0 = np.diag([position_var, position_var, position_var, yaw_var])
    if not fix.yaw_observable:
        P0[3, 3] = math.pi**2 / 3.0  # ~uniform yaw ignorance
    return EstimatorState(
        position=fix.position,
        yaw=fix.yaw,
        covariance=P0,
        roll=roll,
        pitch=pitch,
        yaw_frozen=not fix.yaw_observable,
    )


# ---------------------------------------------------------------------------
# EKF


def ekf_predict(
    state: EstimatorState, imu: tuple[np.ndarray, np.ndarray], cfg: EkfConfig
) -> EstimatorState:
    """IMU-driven prediction with the zero-velocity (stick-slip) assumption.

    Position advances by the 0.5 (R a + g) dt^2 term only; orientation is
    advanced by the body-rate rotation and re-expressed as Euler angles to
    update the yaw; covariance grows by the process noise (motion Jacobian
    approximated by the identity).
    """
    accel, gyro = imu
    dt = cfg.dt
    R_prev = euler_to_matrix(state.roll, state.pitch, state.yaw)
    world_acc = R_prev @ np.asarray(accel, dtype=float) + GRAVITY
    position = state.position + 0.5 * world_acc * dt * dt
    R_pred = R_prev @ axis_angle_to_matrix(np.asarray(gyro, dtype=float) * dt)
    roll, pitch, yaw = matrix_to_euler(R_pred)
    P_pred = state.covariance + cfg.process_noise
    return EstimatorState(
        position=position,
        yaw=yaw,
        covariance=P_pred,
        roll=roll,
        pitch=pitch,
        velocity=state.velocity,
        yaw_frozen=state.yaw_frozen,
    )


def measurement_jacobian(
    predicted: EstimatorState,
    roll: float,
    pitch: float,
    layout: SensorArrayLayout,
    moment_magnitude: float,
) -> np.ndarray:
    """Stacked (3N, 4) Jacobian [db_i/dp_c  db_i/dyaw] at the predicted state."""
    _, H = kernels.measurement_model(
        predicted.position, predicted.yaw, roll, pitch, moment_magnitude, layout.positions
    )
    return H


def ekf_update(
    predicted: EstimatorState,
    capsule_fields: np.ndarray,
    roll: float,
    pitch: float,
    layout: SensorArrayLayout,
    moment_magnitude: float,
    cfg: EkfConfig,
) -> EstimatorState:
    """Measurement update with Joseph-form covariance propagation."""
    z = np.asarray(capsule_fields, dtype=float).reshape(-1)
    h, H = kernels.measurement_model(
        predicted.position, predicted.yaw, roll, pitch, moment_magnitude, layout.positions
    )

    mz = math.cos(pitch) * math.cos(roll)
    sin_tilt = math.sqrt(max(0.0, 1.0 - mz * mz))
    freeze_yaw = sin_tilt < cfg.yaw_freeze_sin_tilt

    P_pred = np.array(predicted.covariance)
    if freeze_yaw:
        P_pred[3, 3] += (cfg.yaw_noise_inflation - 1.0) * cfg.process_noise[3, 3]

    sigma2 = cfg.measurement_noise_sigma**2
    S = H @ P_pred @ H.T
    S[np.diag_indices_from(S)] += sigma2
    try:
        factor = cho_factor(S, check_finite=False)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(S))
        raise EstimatorNumericalError(
            f"innovation covariance not positive definite (cond ~ {cond:.2e})"
        ) from exc
    K = cho_solve(factor, H @ P_pred, check_finite=False).T  # (4, 3N)
    if freeze_yaw:
        K[3, :] = 0.0

    innovation = z - h
    dx = K @ innovation
    position = predicted.position + dx[:3]
    yaw = predicted.yaw + float(dx[3])

    IKH = np.eye(4) - K @ H
    P = IKH @ P_pred @ IKH.T + sigma2 * (K @ K.T)
    P = 0.5 * (P + P.T)

    return EstimatorState(
        position=position,
        yaw=yaw,
        covariance=P,
        roll=roll,
        pitch=pitch,
        velocity=predicted.velocity,
        yaw_frozen=freeze_yaw,
    )


def track_step(
    state: EstimatorState,
    frame: SensorFrame,
    actuator: PlacedMagnet | None,
    env: EnvironmentField,
    layout: SensorArrayLayout,
    capsule_moment_magnitude: float,
    cfg: EkfConfig,
) -> EstimatorState:
    """One fused localization step: subtract known fields, predict, update."""
    from .sensing import extract_capsule_field

    z = extract_capsule_field(frame, actuator, env, layout)
    predicted = ekf_predict(state, (frame.imu_accel, frame.imu_gyro), cfg)
    return ekf_update(
        predicted, z, frame.imu_roll, frame.imu_pitch, layout, capsule_moment_magnitude, cfg
    )
