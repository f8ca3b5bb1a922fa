"""Pure-numpy implementations of the hot evaluation kernels.

Drop-in replacements for the compiled extension in ``_core``; everything here
is vectorized over the sensor axis. Scalar-domain errors are left to the
callers in field_models; these routines assume admissible inputs (the inner
loops of the estimator and the actuator solver guarantee that).
"""

from __future__ import annotations

import math

import numpy as np

MU0 = 4.0e-7 * math.pi
_FOUR_PI = 4.0 * math.pi


def cel_batch(kc: np.ndarray, p: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorized Bulirsch cel; all arguments broadcast, kc > 0, p > 0."""
    kc = np.abs(np.asarray(kc, dtype=float))
    k = kc.copy()
    em = np.ones_like(kc)
    pp = np.sqrt(np.asarray(p, dtype=float) * np.ones_like(kc))
    aa = np.asarray(c, dtype=float) * np.ones_like(kc)
    bb = np.asarray(s, dtype=float) * np.ones_like(kc) / pp
    active = np.ones(kc.shape, dtype=bool)
    for _ in range(40):
        f = aa.copy()
        aa = np.where(active, aa + bb / pp, aa)
        g = np.where(active, k / pp, 0.0)
        bb = np.where(active, 2.0 * (bb + f * g), bb)
        pp = np.where(active, pp + g, pp)
        g_em = em.copy()
        em = np.where(active, em + kc, em)
        active = active & (np.abs(g_em - kc) > g_em * 1e-12)
        if not active.any():
            break
        kc = np.where(active, 2.0 * np.sqrt(k), kc)
        k = np.where(active, kc * em, k)
    return 0.5 * math.pi * (aa * em + bb) / (em * (em + pp))


def dipole_field_batch(
    moment: np.ndarray, source_pos: np.ndarray, targets: np.ndarray
) -> np.ndarray:
    """Dipole flux density at each target; targets (N, 3) -> (N, 3)."""
    m = np.asarray(moment, dtype=float)
    r = np.asarray(targets, dtype=float) - np.asarray(source_pos, dtype=float)
    rn2 = np.einsum("ij,ij->i", r, r)
    rn5 = rn2**2.5
    mr = r @ m
    return (MU0 / _FOUR_PI) * (3.0 * mr[:, None] * r - rn2[:, None] * m[None, :]) / rn5[:, None]


def measurement_model(
    capsule_pos: np.ndarray,
    yaw: float,
    roll: float,
    pitch: float,
    moment_magnitude: float,
    sensors: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked dipole fields h (3N,) and Jacobian H (3N, 4) w.r.t. (p_c, yaw)."""
    sa, ca = math.sin(roll), math.cos(roll)
    sb, cb = math.sin(pitch), math.cos(pitch)
    sg, cg = math.sin(yaw), math.cos(yaw)
    mh = np.array([cg * sb * ca + sg * sa, sg * sb * ca - cg * sa, cb * ca])
    dmh = np.array([sa * cg - ca * sb * sg, sa * sg + ca * sb * cg, 0.0])

    sensors = np.asarray(sensors, dtype=float)
    n = sensors.shape[0]
    r = sensors - np.asarray(capsule_pos, dtype=float)
    rn2 = np.einsum("ij,ij->i", r, r)
    rn5 = rn2**2.5
    c1 = MU0 * moment_magnitude / _FOUR_PI

    mr = r @ mh
    h = c1 * (3.0 * mr[:, None] * r - rn2[:, None] * mh[None, :]) / rn5[:, None]

    # d b / d p_c = -3 c1/rn^5 [ (r.mh)(I - 5 r r^T/rn^2) + mh r^T + r mh^T ]
    eye = np.eye(3)
    rrT = np.einsum("ni,nj->nij", r, r)
    term = (
        mr[:, None, None] * (eye[None, :, :] - 5.0 * rrT / rn2[:, None, None])
        + np.einsum("i,nj->nij", mh, r)
        + np.einsum("ni,j->nij", r, mh)
    )
    dpos = (-3.0 * c1 / rn5)[:, None, None] * term

    dmr = r @ dmh
    dyaw = c1 * (3.0 * dmr[:, None] * r - rn2[:, None] * dmh[None, :]) / rn5[:, None]

    H = np.empty((3 * n, 4))
    H[:, :3] = dpos.reshape(3 * n, 3)
    H[:, 3] = dyaw.reshape(3 * n)
    return h.reshape(3 * n), H


def cylinder_field_batch(
    radius: float,
    half_length: float,
    magnetization: float,
    rotation: np.ndarray,
    position: np.ndarray,
    targets: np.ndarray,
) -> np.ndarray:
    """Exact cylinder-magnet field at each target, in {W}; targets (N, 3)."""
    Rm = np.asarray(rotation, dtype=float)
    q = (np.asarray(targets, dtype=float) - np.asarray(position, dtype=float)) @ Rm
    rho = np.hypot(q[:, 0], q[:, 1])
    z = q[:, 2]
    # nudge off the extended rho = R shell (parametrization singularity)
    on_shell = np.abs(rho - radius) < 1e-12 * radius
    rho = np.where(on_shell, radius * (1.0 + 1e-12), rho)

    xi_p = z + half_length
    xi_m = z - half_length
    rp = rho + radius
    rm = rho - radius
    alpha_p = 1.0 / np.sqrt(xi_p**2 + rp**2)
    alpha_m = 1.0 / np.sqrt(xi_m**2 + rp**2)
    beta_p = xi_p * alpha_p
    beta_m = xi_m * alpha_m
    k_p = np.sqrt((xi_p**2 + rm**2) / (xi_p**2 + rp**2))
    k_m = np.sqrt((xi_m**2 + rm**2) / (xi_m**2 + rp**2))
    gamma = (radius - rho) / (radius + rho)

    p1 = cel_batch(np.concatenate([k_p, k_m]), 1.0, 1.0, -1.0)
    p2 = cel_batch(
        np.concatenate([k_p, k_m]),
        np.concatenate([gamma, gamma]) ** 2,
        1.0,
        np.concatenate([gamma, gamma]),
    )
    n = rho.shape[0]
    front = MU0 * magnetization * radius / math.pi
    b_rho = front * (alpha_p * p1[:n] - alpha_m * p1[n:])
    b_z = front / rp * (beta_p * p2[:n] - beta_m * p2[n:])

    safe = rho > 0.0
    cphi = np.where(safe, q[:, 0] / np.where(safe, rho, 1.0), 1.0)
    sphi = np.where(safe, q[:, 1] / np.where(safe, rho, 1.0), 0.0)
    b_local = np.stack([b_rho * cphi, b_rho * sphi, b_z], axis=1)
    return b_local @ Rm.T


def dipole_wrench_fast(
    capsule_moment: np.ndarray,
    capsule_pos: np.ndarray,
    actuator_moment: np.ndarray,
    actuator_pos: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Force and torque on the capsule dipole from the actuator dipole."""
    mc = np.asarray(capsule_moment, dtype=float)
    ma = np.asarray(actuator_moment, dtype=float)
    r = np.asarray(capsule_pos, dtype=float) - np.asarray(actuator_pos, dtype=float)
    rn2 = float(r @ r)
    rn = math.sqrt(rn2)
    rn5 = rn2 * rn2 * rn
    c1 = MU0 / _FOUR_PI
    mar = float(ma @ r)
    b = c1 * (3.0 * mar * r - rn2 * ma) / rn5
    # grad(m_c . b): symmetric field gradient contracted with m_c
    mcr = float(mc @ r)
    mamc = float(ma @ mc)
    f = (3.0 * c1 / rn5) * (
        mar * mc + mcr * ma + mamc * r - 5.0 * mar * mcr * r / rn2
    )
    tau = np.cross(mc, b)
    return f, tau
