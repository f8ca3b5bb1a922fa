"""Analytic magnet models: point dipole, exact axially-magnetized cylinder,
their derivatives, and the dipole-dipole wrench.

All positions are meters in {W}, fields Tesla, moments A*m^2. The capsule's
cuboid magnet is always treated as a point dipole (its working distances are
several times its bounding radius); the actuator cylinder additionally has an
exact model built on the generalized complete elliptic integral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, moment_direction, moment_direction_yaw_derivative

MU0 = 4.0e-7 * math.pi  # vacuum permeability, T*m/A

#: shorthand remanence values (T) for common NdFeB grades, mid-range
GRADE_REMANENCE = {"N45": 1.35, "N52": 1.45}

#: dipole evaluations closer than this to the source are rejected (m)
DIPOLE_GUARD_RADIUS = 1e-4

#: minimum capsule-actuator separation for the dipole wrench (m)
WRENCH_MIN_SEPARATION = 0.05


class FieldModelError(ValueError):
    pass


class SingularityError(FieldModelError):
    """Evaluation point is on (or numerically at) a model singularity."""


class DomainError(FieldModelError):
    """Arguments outside the model's domain of validity."""


class ProximityError(FieldModelError):
    """Magnets too close for the point-dipole interaction model."""


# ---------------------------------------------------------------------------
# magnet specification


@dataclass(frozen=True)
class MagnetSpec:
    """Geometry and remanence of a permanent magnet.

    ``kind`` is "cylinder" (dimensions = (radius, half_length)) or "cuboid"
    (dimensions = three side lengths). The dipole moment magnitude is the
    derived quantity remanence * volume / mu0.
    """

    kind: str
    dimensions: tuple[float, ...]
    remanence: float

    def __post_init__(self):
        if self.kind not in ("cylinder", "cuboid"):
            raise ValueError(f"unknown magnet kind {self.kind!r}")
        n = 2 if self.kind == "cylinder" else 3
        if len(self.dimensions) != n:
            raise ValueError(f"{self.kind} needs {n} dimensions")
        if any(d <= 0.0 for d in self.dimensions):
            raise ValueError("magnet dimensions must be strictly positive")
        if self.remanence < 0.0:
            raise ValueError("remanence must be non-negative")

    @classmethod
    def cylinder(cls, radius: float, half_length: float, remanence: float) -> "MagnetSpec":
        return cls("cylinder", (float(radius), float(half_length)), float(remanence))

    @classmethod
    def cuboid(cls, a: float, b: float, c: float, remanence: float) -> "MagnetSpec":
        return cls("cuboid", (float(a), float(b), float(c)), float(remanence))

    @property
    def volume(self) -> float:
        if self.kind == "cylinder":
            r, hl = self.dimensions
            return math.pi * r * r * 2.0 * hl
        a, b, c = self.dimensions
        return a * b * c

    @property
    def dipole_moment_magnitude(self) -> float:
        return self.remanence * self.volume / MU0

    @property
    def bounding_radius(self) -> float:
        if self.kind == "cylinder":
            r, hl = self.dimensions
            return math.hypot(r, hl)
        return 0.5 * math.sqrt(sum(d * d for d in self.dimensions))


def default_actuator_spec() -> MagnetSpec:
    """90 mm diameter x 90 mm N45 cylinder (the external actuator magnet)."""
    return MagnetSpec.cylinder(0.045, 0.045, GRADE_REMANENCE["N45"])


def default_capsule_spec() -> MagnetSpec:
    """20 x 15 x 11 mm N52 cuboid (the magnet embedded in the probe tip)."""
    return MagnetSpec.cuboid(0.020, 0.015, 0.011, GRADE_REMANENCE["N52"])


def moment_from_spec(spec: MagnetSpec) -> float:
    """Dipole moment magnitude (A*m^2) = remanence * volume / mu0."""
    return spec.dipole_moment_magnitude


# ---------------------------------------------------------------------------
# point dipole


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray  # N
    torque: np.ndarray  # N*m

    def __post_init__(self):
        f = np.asarray(self.force, dtype=float).reshape(3)
        t = np.asarray(self.torque, dtype=float).reshape(3)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t))):
            raise ValueError("wrench components must be finite")
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "torque", t)


def _separation(source_pos, target_pos) -> np.ndarray:
    r = np.asarray(target_pos, dtype=float) - np.asarray(source_pos, dtype=float)
    if np.linalg.norm(r) <= DIPOLE_GUARD_RADIUS:
        raise SingularityError("target within the dipole guard radius of the source")
    return r


def dipole_field(moment: np.ndarray, source_pos: np.ndarray, target_pos: np.ndarray) -> np.ndarray:
    """Point-dipole flux density b(r) = mu0|m|/(4 pi |r|^5) (3 r r^T - |r|^2 I) m_hat."""
    m = np.asarray(moment, dtype=float)
    r = _separation(source_pos, target_pos)
    rn = np.linalg.norm(r)
    return (MU0 / (4.0 * math.pi * rn**5)) * (3.0 * np.dot(m, r) * r - rn * rn * m)


def dipole_field_gradient(moment: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Spatial derivative d b / d r of the dipole field, a symmetric 3x3 (T/m).

    r points from the dipole to the evaluation point.
    """
    m = np.asarray(moment, dtype=float)
    r = np.asarray(r, dtype=float)
    rn = np.linalg.norm(r)
    if rn <= DIPOLE_GUARD_RADIUS:
        raise SingularityError("evaluation within the dipole guard radius")
    mm = np.linalg.norm(m)
    if mm == 0.0:
        return np.zeros((3, 3))
    mh = m / mm
    rr = np.outer(r, r)
    c = 3.0 * MU0 * mm / (4.0 * math.pi * rn**5)
    return c * (
        np.outer(r, mh) + np.outer(mh, r) + np.dot(mh, r) * (np.eye(3) - 5.0 * rr / (rn * rn))
    )


def dipole_position_jacobian(
    moment: np.ndarray, source_pos: np.ndarray, target_pos: np.ndarray
) -> np.ndarray:
    """Derivative of the field at a fixed target w.r.t. the source position (T/m)."""
    r = _separation(source_pos, target_pos)
    return -dipole_field_gradient(moment, r)


def dipole_yaw_jacobian(
    roll: float,
    pitch: float,
    yaw: float,
    moment_magnitude: float,
    source_pos: np.ndarray,
    target_pos: np.ndarray,
) -> np.ndarray:
    """Derivative of the dipole field w.r.t. the source yaw angle (T/rad).

    The moment axis is the body z of the Rz(yaw)Ry(pitch)Rx(roll) attitude; its
    yaw derivative vanishes when the axis is vertical (roll = pitch = 0).
    """
    r = _separation(source_pos, target_pos)
    rn = np.linalg.norm(r)
    dm = moment_direction_yaw_derivative(roll, pitch, yaw)
    c = MU0 * moment_magnitude / (4.0 * math.pi * rn**5)
    return c * (3.0 * np.dot(r, dm) * r - rn * rn * dm)


def dipole_wrench(
    capsule_moment: np.ndarray,
    capsule_pos: np.ndarray,
    actuator_moment: np.ndarray,
    actuator_pos: np.ndarray,
) -> Wrench:
    """Force f = grad(m_c . b) and torque tau = m_c x b on the capsule dipole,
    with b the actuator's dipole field at the capsule position."""
    mc = np.asarray(capsule_moment, dtype=float)
    r = np.asarray(capsule_pos, dtype=float) - np.asarray(actuator_pos, dtype=float)
    if np.linalg.norm(r) < WRENCH_MIN_SEPARATION:
        raise ProximityError(
            f"capsule-actuator separation {np.linalg.norm(r):.4f} m below "
            f"{WRENCH_MIN_SEPARATION} m"
        )
    b = dipole_field(actuator_moment, actuator_pos, capsule_pos)
    grad = dipole_field_gradient(actuator_moment, r)
    return Wrench(force=grad @ mc, torque=np.cross(mc, b))


# ---------------------------------------------------------------------------
# exact cylinder model


def generalized_elliptic_integral(k_c: float, p: float, c: float, s: float) -> float:
    """Bulirsch's generalized complete elliptic integral

        C(k_c, p, c, s) = int_0^{pi/2} (c cos^2 f + s sin^2 f)
                          / ((cos^2 f + p sin^2 f) sqrt(cos^2 f + k_c^2 sin^2 f)) df

    evaluated with the arithmetic-geometric-mean (Bartky) iteration; relative
    accuracy is well below 1e-10 for admissible arguments.
    """
    if not (k_c > 0.0):
        raise DomainError("k_c must be strictly positive")
    if not (p > 0.0):
        raise DomainError("p must be strictly positive")

    k = kc = abs(float(k_c))
    em = 1.0
    pp = math.sqrt(float(p))
    aa = float(c)
    bb = float(s) / pp
    for _ in range(50):
        f = aa
        aa += bb / pp
        g = k / pp
        bb = 2.0 * (bb + f * g)
        pp += g
        g = em
        em += kc
        if abs(g - kc) <= g * 1e-12:
            break
        kc = 2.0 * math.sqrt(k)
        k = kc * em
    return 0.5 * math.pi * (aa * em + bb) / (em * (em + pp))


def cylinder_field(spec: MagnetSpec, magnet_pose: Pose, target_pos: np.ndarray) -> np.ndarray:
    """Exact flux density of an axially magnetized cylinder, in {W}.

    The magnetization axis is the pose's body z. Raises DomainError for points
    inside the magnet and SingularityError on the edge ring, where the field
    diverges logarithmically.
    """
    if spec.kind != "cylinder":
        raise DomainError("cylinder_field requires a cylindrical MagnetSpec")
    radius, half_len = spec.dimensions
    R = magnet_pose.orientation
    q = R.T @ (np.asarray(target_pos, dtype=float) - magnet_pose.position)
    rho = math.hypot(q[0], q[1])
    z = q[2]

    edge_tol = 1e-9 * max(radius, half_len)
    if abs(rho - radius) < edge_tol and abs(abs(z) - half_len) < edge_tol:
        raise SingularityError("evaluation point on the magnet edge ring")
    if rho < radius - edge_tol and abs(z) < half_len - edge_tol:
        raise DomainError("evaluation point inside the magnet body")

    magnetization = spec.remanence / MU0  # A/m
    b_rho, b_z = _cylinder_field_rz(radius, half_len, magnetization, rho, z)

    if rho > 0.0:
        cphi, sphi = q[0] / rho, q[1] / rho
    else:
        cphi, sphi = 1.0, 0.0
    b_local = np.array([b_rho * cphi, b_rho * sphi, b_z])
    return R @ b_local


def _cylinder_field_rz(
    radius: float, half_len: float, magnetization: float, rho: float, z: float
) -> tuple[float, float]:
    """Field components (b_rho, b_z) in the magnet frame's cylindrical coords."""
    # rho exactly on the extended shell rho = R makes the radial parameter
    # vanish (p = 0 in the elliptic integral); the field is smooth there, so
    # nudge outward by a relative epsilon instead
    if abs(rho - radius) < 1e-12 * radius:
        rho = radius * (1.0 + 1e-12)
    xi_p = z + half_len
    xi_m = z - half_len
    rp = rho + radius
    alpha_p = 1.0 / math.sqrt(xi_p * xi_p + rp * rp)
    alpha_m = 1.0 / math.sqrt(xi_m * xi_m + rp * rp)
    beta_p = xi_p * alpha_p
    beta_m = xi_m * alpha_m
    rm = rho - radius
    k_p = math.sqrt((xi_p * xi_p + rm * rm) / (xi_p * xi_p + rp * rp))
    k_m = math.sqrt((xi_m * xi_m + rm * rm) / (xi_m * xi_m + rp * rp))
    # radial profile parameter; sign convention fixed by the on-axis limit
    # (gamma -> +1 at rho = 0 so b_z reduces to the textbook bar-magnet result)
    gamma = (radius - rho) / (radius + rho)

    cel = generalized_elliptic_integral
    p1_p = cel(k_p, 1.0, 1.0, -1.0)
    p1_m = cel(k_m, 1.0, 1.0, -1.0)
    p2_p = cel(k_p, gamma * gamma, 1.0, gamma)
    p2_m = cel(k_m, gamma * gamma, 1.0, gamma)

    front = MU0 * magnetization * radius / math.pi
    b_rho = front * (alpha_p * p1_p - alpha_m * p1_m)
    b_z = front / rp * (beta_p * p2_p - beta_m * p2_m)
    return b_rho, b_z


def cylinder_axial_field(spec: MagnetSpec, z: float) -> float:
    """Closed-form on-axis field (T) at signed distance z from the center."""
    if spec.kind != "cylinder":
        raise DomainError("axial closed form requires a cylinder")
    radius, half_len = spec.dimensions
    zp, zm = z + half_len, z - half_len
    return (spec.remanence / 2.0) * (
        zp / math.hypot(zp, radius) - zm / math.hypot(zm, radius)
    )
