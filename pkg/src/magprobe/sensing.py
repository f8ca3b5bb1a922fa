"""Simulated external magnetometer array and capsule IMU, plus the
measurement pre-processing (environment and actuator field subtraction) that
turns raw array readings into capsule-only fields for the estimator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .field_models import MU0, MagnetSpec
from .geometry import Pose, matrix_to_euler

GRAVITY = np.array([0.0, 0.0, -9.81])  # m/s^2, in {W}

#: sanity bound on any stored environmental bias component (Earth-field scale)
ENV_BIAS_LIMIT = 2e-4  # T

MIN_CALIBRATION_FRAMES = 10


@dataclass(frozen=True)
class PlacedMagnet:
    """A magnet spec bound to a pose; the dipole axis is the pose's body z."""

    pose: Pose
    spec: MagnetSpec

    @property
    def moment_vector(self) -> np.ndarray:
        return self.spec.dipole_moment_magnitude * self.pose.moment_dir


def default_array_positions(nx: int = 6, ny: int = 6, spacing: float = 0.12) -> np.ndarray:
    """Centered nx x ny grid on the z = 0 plane."""
    xs = (np.arange(nx) - (nx - 1) / 2.0) * spacing
    ys = (np.arange(ny) - (ny - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.zeros((nx * ny, 3))
    pts[:, 0] = gx.ravel()
    pts[:, 1] = gy.ravel()
    return pts


@dataclass(frozen=True)
class SensorArrayLayout:
    positions: np.ndarray = field(default_factory=default_array_positions)
    noise_sigma: float = 1e-5  # T, per axis

    def __post_init__(self):
        pts = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 8:
            raise ValueError("need at least 8 sensors for the 4 unknowns")
        d = pts[:, None, :] - pts[None, :, :]
        dist = np.linalg.norm(d, axis=2) + np.eye(pts.shape[0])
        if np.min(dist) < 1e-9:
            raise ValueError("sensor positions must be distinct")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "positions", pts)

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class EnvironmentField:
    """Per-sensor environmental bias, estimated with no magnets present."""

    per_sensor_bias: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.per_sensor_bias, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(b)):
            raise ValueError("environment biases must be finite")
        if np.max(np.abs(b), initial=0.0) >= ENV_BIAS_LIMIT:
            raise ValueError(
                f"environment bias exceeds {ENV_BIAS_LIMIT} T; not an ambient field"
            )
        b.setflags(write=False)
        object.__setattr__(self, "per_sensor_bias", b)

    @classmethod
    def zero(cls, n_sensors: int) -> "EnvironmentField":
        return cls(np.zeros((n_sensors, 3)))

    @classmethod
    def uniform(cls, vector, n_sensors: int) -> "EnvironmentField":
        return cls(np.tile(np.asarray(vector, dtype=float), (n_sensors, 1)))


@dataclass(frozen=True)
class ImuNoise:
    gyro_std: float = 0.01  # rad/s
    accel_std: float = 0.05  # m/s^2
    attitude_std: float = np.deg2rad(0.2)  # rad, on roll/pitch

    @classmethod
    def zero(cls) -> "ImuNoise":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SensorFrame:
    """One synchronized snapshot of all magnetometers plus the IMU channels."""

    timestamp: float
    raw_fields: np.ndarray  # (N, 3) T
    imu_accel: np.ndarray  # (3,) m/s^2, body frame specific force
    imu_gyro: np.ndarray  # (3,) rad/s, body frame
    imu_roll: float  # rad
    imu_pitch: float  # rad

    def __post_init__(self):
        f = np.asarray(self.raw_fields, dtype=float).reshape(-1, 3)
        a = np.asarray(self.imu_accel, dtype=float).reshape(3)
        w = np.asarray(self.imu_gyro, dtype=float).reshape(3)
        f.setflags(write=False)
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "raw_fields", f)
        object.__setattr__(self, "imu_accel", a)
        object.__setattr__(self, "imu_gyro", w)

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.timestamp,
                "fields": self.raw_fields.tolist(),
                "accel": self.imu_accel.tolist(),
                "gyro": self.imu_gyro.tolist(),
                "roll": self.imu_roll,
                "pitch": self.imu_pitch,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "SensorFrame":
        d = json.loads(line)
        return cls(
            timestamp=float(d["t"]),
            raw_fields=np.array(d["fields"], dtype=float),
            imu_accel=np.array(d["accel"], dtype=float),
            imu_gyro=np.array(d["gyro"], dtype=float),
            imu_roll=float(d["roll"]),
            imu_pitch=float(d["pitch"]),
        )


def write_frames(path, frames) -> None:
    with open(path, "w") as fh:
        for fr in frames:
            fh.write(fr.to_json() + "\n")


def read_frames(path) -> list[SensorFrame]:
    with open(path) as fh:
        return [SensorFrame.from_json(line) for line in fh if line.strip()]


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _actuator_field_at(actuator: PlacedMagnet | None, points: np.ndarray) -> np.ndarray:
    if actuator is None:
        return np.zeros((points.shape[0], 3))
    if actuator.spec.kind == "cylinder":
        radius, half_len = actuator.spec.dimensions
        return kernels.cylinder_field_batch(
            radius,
            half_len,
            actuator.spec.remanence / MU0,
            actuator.pose.orientation,
            actuator.pose.position,
            points,
        )
    return kernels.dipole_field_batch(
        actuator.moment_vector, actuator.pose.position, points
    )


def sample_array(
    capsule: PlacedMagnet | None,
    actuator: PlacedMagnet | None,
    env: EnvironmentField,
    layout: SensorArrayLayout,
    noise_seed=None,
) -> np.ndarray:
    """Raw array readings: capsule dipole + actuator cylinder + bias + noise."""
    readings = env.per_sensor_bias.copy()
    if capsule is not None:
        readings += kernels.dipole_field_batch(
            capsule.moment_vector, capsule.pose.position, layout.positions
        )
    readings += _actuator_field_at(actuator, layout.positions)
    if layout.noise_sigma > 0.0:
        rng = _as_rng(noise_seed)
        readings = readings + rng.normal(0.0, layout.noise_sigma, readings.shape)
    return readings


def estimate_environment(frames) -> EnvironmentField:
    """Per-sensor mean of readings taken with no magnets in the workspace."""
    frames = list(frames)
    if len(frames) < MIN_CALIBRATION_FRAMES:
        raise ValueError(
            f"environment calibration needs >= {MIN_CALIBRATION_FRAMES} frames, "
            f"got {len(frames)}"
        )
    stack = np.stack([f.raw_fields for f in frames])
    return EnvironmentField(stack.mean(axis=0))


def extract_capsule_field(
    frame: SensorFrame,
    actuator: PlacedMagnet | None,
    env: EnvironmentField,
    layout: SensorArrayLayout,
) -> np.ndarray:
    """Capsule-only fields: raw minus modeled actuator field minus env bias.

    The actuator pose must be the commanded pose at the frame's timestamp; the
    subtraction uses the exact cylinder model, not the dipole approximation.
    """
    return frame.raw_fields - env.per_sensor_bias - _actuator_field_at(
        actuator, layout.positions
    )


def sample_imu(
    true_pose: Pose,
    true_world_accel: np.ndarray,
    true_body_gyro: np.ndarray,
    noise_seed=None,
    noise: ImuNoise = ImuNoise.zero(),
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """IMU channels (a, omega, roll, pitch) for a probe with known true state.

    The accelerometer reports specific force a = R^T (p_ddot - g); for a
    stationary probe R a + g = 0 exactly. Roll/pitch come from the simulated
    attitude channel. Raises GimbalLockError within the pitch guard.
    """
    roll, pitch, _ = matrix_to_euler(true_pose.orientation)
    accel_body = true_pose.orientation.T @ (
        np.asarray(true_world_accel, dtype=float) - GRAVITY
    )
    gyro = np.asarray(true_body_gyro, dtype=float).copy()
    if noise.gyro_std > 0.0 or noise.accel_std > 0.0 or noise.attitude_std > 0.0:
        rng = _as_rng(noise_seed)
        accel_body = accel_body + rng.normal(0.0, noise.accel_std, 3)
        gyro = gyro + rng.normal(0.0, noise.gyro_std, 3)
        roll += rng.normal(0.0, noise.attitude_std)
        pitch += rng.normal(0.0, noise.attitude_std)
    return accel_body, gyro, roll, pitch
