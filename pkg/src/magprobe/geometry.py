"""Rigid-body pose and rotation helpers.

Conventions used everywhere in this package:

* world frame {W} is attached to the sensor array, z up,
* orientation matrices map body-frame vectors into {W},
* Euler angles are roll/pitch/yaw with composition
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``,
* the magnet's dipole axis is the body z-axis, so the moment direction of a
  pose is its third column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9
GIMBAL_GUARD = 1e-3  # rad margin on |pitch| = pi/2


class GimbalLockError(ValueError):
    """Pitch too close to +-90 deg for a well-defined roll/yaw split."""


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Compose Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Invert :func:`euler_to_matrix`. Raises near pitch = +-90 deg."""
    sp = -float(R[2, 0])
    sp = min(1.0, max(-1.0, sp))
    pitch = float(np.arcsin(sp))
    if abs(pitch) > np.pi / 2 - GIMBAL_GUARD:
        raise GimbalLockError(f"pitch {pitch:.6f} rad within gimbal guard")
    roll = float(np.arctan2(R[2, 1], R[2, 2]))
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    return roll, pitch, yaw


def moment_direction(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Unit dipole axis (body z) in {W} for the given Euler angles."""
    sa, ca = np.sin(roll), np.cos(roll)
    sb, cb = np.sin(pitch), np.cos(pitch)
    sg, cg = np.sin(yaw), np.cos(yaw)
    return np.array([cg * sb * ca + sg * sa, sg * sb * ca - cg * sa, cb * ca])


def moment_direction_yaw_derivative(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """d(moment_direction)/d(yaw) at fixed roll and pitch."""
    sa, ca = np.sin(roll), np.cos(roll)
    sb = np.sin(pitch)
    sg, cg = np.sin(yaw), np.cos(yaw)
    return np.array([sa * cg - ca * sb * sg, sa * sg + ca * sb * cg, 0.0])


def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula; rotvec = axis * angle."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-12:
        return np.eye(3)
    k = rotvec / angle
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of R in [0, pi]; arccos argument clamped to [-1, 1]."""
    c = (float(np.trace(R)) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def is_rotation(R: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        return False
    return np.linalg.det(R) > 0.0


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    a = (-angle + np.pi) % (2.0 * np.pi)
    return float(np.pi - a) if a != 0.0 else float(np.pi)


@dataclass(frozen=True)
class Pose:
    """Position (m) and orientation (3x3, body-to-world) in {W}."""

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        R = np.asarray(self.orientation, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(R)):
            raise ValueError("pose entries must be finite")
        if not is_rotation(R):
            raise ValueError("orientation must be orthonormal with det +1")
        p.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", R)

    @classmethod
    def from_euler(cls, position, roll: float, pitch: float, yaw: float) -> "Pose":
        return cls(np.asarray(position, dtype=float), euler_to_matrix(roll, pitch, yaw))

    def euler(self) -> tuple[float, float, float]:
        return matrix_to_euler(self.orientation)

    @property
    def moment_dir(self) -> np.ndarray:
        """Unit dipole axis in {W} (third column of the orientation)."""
        return self.orientation[:, 2].copy()

    @property
    def x_axis(self) -> np.ndarray:
        return self.orientation[:, 0].copy()

    def rotated_body(self, rotvec_body: np.ndarray) -> "Pose":
        """Compose a body-frame rotation: R <- R @ exp(rotvec)."""
        return Pose(self.position, self.orientation @ axis_angle_to_matrix(rotvec_body))

    def translated(self, delta_world: np.ndarray) -> "Pose":
        return Pose(self.position + np.asarray(delta_world, dtype=float), self.orientation)
