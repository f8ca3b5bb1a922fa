# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core; signature-compatible with ``_core_py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, hypot, sin, sqrt

cnp.import_array()

cdef double MU0 = 4.0e-7 * 3.141592653589793
cdef double PI = 3.141592653589793
cdef double FOUR_PI = 4.0 * PI


cdef double _cel(double kc, double p, double c, double s) nogil:
    cdef double k, em, pp, aa, bb, f, g
    cdef int i
    kc = fabs(kc)
    k = kc
    em = 1.0
    pp = sqrt(p)
    aa = c
    bb = s / pp
    for i in range(40):
        f = aa
        aa = aa + bb / pp
        g = k / pp
        bb = 2.0 * (bb + f * g)
        pp = pp + g
        g = em
        em = em + kc
        if fabs(g - kc) <= g * 1e-12:
            break
        kc = 2.0 * sqrt(k)
        k = kc * em
    return 0.5 * PI * (aa * em + bb) / (em * (em + pp))


def cel_batch(kc, p, c, s):
    """Vectorized Bulirsch cel; arguments broadcast, kc > 0, p > 0."""
    kc_a, p_a, c_a, s_a = np.broadcast_arrays(
        np.asarray(kc, dtype=np.float64),
        np.asarray(p, dtype=np.float64),
        np.asarray(c, dtype=np.float64),
        np.asarray(s, dtype=np.float64),
    )
    cdef cnp.ndarray[cnp.float64_t, ndim=1] kcf = np.ascontiguousarray(kc_a.ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pf = np.ascontiguousarray(p_a.ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cf = np.ascontiguousarray(c_a.ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sf = np.ascontiguousarray(s_a.ravel())
    cdef Py_ssize_t n = kcf.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = _cel(kcf[i], pf[i], cf[i], sf[i])
    return out.reshape(kc_a.shape)


def dipole_field_batch(moment, source_pos, targets):
    """Dipole flux density at each target; targets (N, 3) -> (N, 3)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] m = np.ascontiguousarray(moment, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] src = np.ascontiguousarray(source_pos, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] t = np.ascontiguousarray(targets, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, 3), dtype=np.float64)
    cdef double rx, ry, rz, rn2, rn5, mr, c1
    c1 = MU0 / FOUR_PI
    for i in range(n):
        rx = t[i, 0] - src[0]
        ry = t[i, 1] - src[1]
        rz = t[i, 2] - src[2]
        rn2 = rx * rx + ry * ry + rz * rz
        rn5 = rn2 * rn2 * sqrt(rn2)
        mr = m[0] * rx + m[1] * ry + m[2] * rz
        out[i, 0] = c1 * (3.0 * mr * rx - rn2 * m[0]) / rn5
        out[i, 1] = c1 * (3.0 * mr * ry - rn2 * m[1]) / rn5
        out[i, 2] = c1 * (3.0 * mr * rz - rn2 * m[2]) / rn5
    return out


def measurement_model(capsule_pos, double yaw, double roll, double pitch,
                      double moment_magnitude, sensors):
    """Stacked dipole fields h (3N,) and Jacobian H (3N, 4) w.r.t. (p_c, yaw)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pc = np.ascontiguousarray(capsule_pos, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sens = np.ascontiguousarray(sensors, dtype=np.float64)
    cdef Py_ssize_t n = sens.shape[0], i, j, k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] h = np.empty(3 * n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] H = np.empty((3 * n, 4), dtype=np.float64)

    cdef double sa = sin(roll), ca = cos(roll)
    cdef double sb = sin(pitch), cb = cos(pitch)
    cdef double sg = sin(yaw), cg = cos(yaw)
    cdef double mh0 = cg * sb * ca + sg * sa
    cdef double mh1 = sg * sb * ca - cg * sa
    cdef double mh2 = cb * ca
    cdef double dm0 = sa * cg - ca * sb * sg
    cdef double dm1 = sa * sg + ca * sb * cg

    cdef double c1 = MU0 * moment_magnitude / FOUR_PI
    cdef double r0, r1, r2, rn2, rn5, mr, dmr, c3, rr_im
    cdef double[3] r
    cdef double[3] mh
    mh[0] = mh0; mh[1] = mh1; mh[2] = mh2
    for i in range(n):
        r[0] = sens[i, 0] - pc[0]
        r[1] = sens[i, 1] - pc[1]
        r[2] = sens[i, 2] - pc[2]
        rn2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
        rn5 = rn2 * rn2 * sqrt(rn2)
        mr = mh[0] * r[0] + mh[1] * r[1] + mh[2] * r[2]
        dmr = dm0 * r[0] + dm1 * r[1]
        c3 = -3.0 * c1 / rn5
        for j in range(3):
            h[3 * i + j] = c1 * (3.0 * mr * r[j] - rn2 * mh[j]) / rn5
            for k in range(3):
                rr_im = -5.0 * r[j] * r[k] / rn2
                if j == k:
                    rr_im += 1.0
                H[3 * i + j, k] = c3 * (mr * rr_im + mh[j] * r[k] + r[j] * mh[k])
        H[3 * i + 0, 3] = c1 * (3.0 * dmr * r[0] - rn2 * dm0) / rn5
        H[3 * i + 1, 3] = c1 * (3.0 * dmr * r[1] - rn2 * dm1) / rn5
        H[3 * i + 2, 3] = c1 * (3.0 * dmr * r[2]) / rn5
    return h, H


def cylinder_field_batch(double radius, double half_length, double magnetization,
                         rotation, position, targets):
    """Exact cylinder-magnet field at each target, in {W}; targets (N, 3)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Rm = np.ascontiguousarray(rotation, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pos = np.ascontiguousarray(position, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] t = np.ascontiguousarray(targets, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, 3), dtype=np.float64)
    cdef double dx, dy, dz, qx, qy, qz, rho, z
    cdef double xi_p, xi_m, rp, rm, alpha_p, alpha_m, beta_p, beta_m, k_p, k_m, gam
    cdef double p1p, p1m, p2p, p2m, b_rho, b_z, front, cphi, sphi, blx, bly, blz
    front = MU0 * magnetization * radius / PI
    for i in range(n):
        dx = t[i, 0] - pos[0]
        dy = t[i, 1] - pos[1]
        dz = t[i, 2] - pos[2]
        qx = Rm[0, 0] * dx + Rm[1, 0] * dy + Rm[2, 0] * dz
        qy = Rm[0, 1] * dx + Rm[1, 1] * dy + Rm[2, 1] * dz
        qz = Rm[0, 2] * dx + Rm[1, 2] * dy + Rm[2, 2] * dz
        rho = hypot(qx, qy)
        z = qz
        if fabs(rho - radius) < 1e-12 * radius:
            rho = radius * (1.0 + 1e-12)

        xi_p = z + half_length
        xi_m = z - half_length
        rp = rho + radius
        rm = rho - radius
        alpha_p = 1.0 / sqrt(xi_p * xi_p + rp * rp)
        alpha_m = 1.0 / sqrt(xi_m * xi_m + rp * rp)
        beta_p = xi_p * alpha_p
        beta_m = xi_m * alpha_m
        k_p = sqrt((xi_p * xi_p + rm * rm) / (xi_p * xi_p + rp * rp))
        k_m = sqrt((xi_m * xi_m + rm * rm) / (xi_m * xi_m + rp * rp))
        gam = (radius - rho) / (radius + rho)

        p1p = _cel(k_p, 1.0, 1.0, -1.0)
        p1m = _cel(k_m, 1.0, 1.0, -1.0)
        p2p = _cel(k_p, gam * gam, 1.0, gam)
        p2m = _cel(k_m, gam * gam, 1.0, gam)

        b_rho = front * (alpha_p * p1p - alpha_m * p1m)
        b_z = front / rp * (beta_p * p2p - beta_m * p2m)

        if rho > 0.0:
            cphi = qx / rho
            sphi = qy / rho
        else:
            cphi = 1.0
            sphi = 0.0
        blx = b_rho * cphi
        bly = b_rho * sphi
        blz = b_z
        for j in range(3):
            out[i, j] = Rm[j, 0] * blx + Rm[j, 1] * bly + Rm[j, 2] * blz
    return out


def dipole_wrench_fast(capsule_moment, capsule_pos, actuator_moment, actuator_pos):
    """Force and torque on the capsule dipole from the actuator dipole."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mc = np.ascontiguousarray(capsule_moment, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ma = np.ascontiguousarray(actuator_moment, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pc = np.ascontiguousarray(capsule_pos, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pa = np.ascontiguousarray(actuator_pos, dtype=np.float64)
    cdef double rx = pc[0] - pa[0]
    cdef double ry = pc[1] - pa[1]
    cdef double rz = pc[2] - pa[2]
    cdef double rn2 = rx * rx + ry * ry + rz * rz
    cdef double rn5 = rn2 * rn2 * sqrt(rn2)
    cdef double c1 = MU0 / FOUR_PI
    cdef double mar = ma[0] * rx + ma[1] * ry + ma[2] * rz
    cdef double mcr = mc[0] * rx + mc[1] * ry + mc[2] * rz
    cdef double mamc = ma[0] * mc[0] + ma[1] * mc[1] + ma[2] * mc[2]
    cdef double bx = c1 * (3.0 * mar * rx - rn2 * ma[0]) / rn5
    cdef double by = c1 * (3.0 * mar * ry - rn2 * ma[1]) / rn5
    cdef double bz = c1 * (3.0 * mar * rz - rn2 * ma[2]) / rn5
    cdef double cf = 3.0 * c1 / rn5
    cdef double s5 = 5.0 * mar * mcr / rn2
    cdef cnp.ndarray[cnp.float64_t, ndim=1] f = np.empty(3, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tau = np.empty(3, dtype=np.float64)
    f[0] = cf * (mar * mc[0] + mcr * ma[0] + mamc * rx - s5 * rx)
    f[1] = cf * (mar * mc[1] + mcr * ma[1] + mamc * ry - s5 * ry)
    f[2] = cf * (mar * mc[2] + mcr * ma[2] + mamc * rz - s5 * rz)
    tau[0] = mc[1] * bz - mc[2] * by
    tau[1] = mc[2] * bx - mc[0] * bz
    tau[2] = mc[0] * by - mc[1] * bx
    return f, tau
