"""Backend equivalence: the compiled core and the numpy fallback must agree
with each other and with the scalar reference implementations."""

import numpy as np
import pytest

from magprobe import kernels
from magprobe.field_models import (
    MU0,
    cylinder_field,
    default_actuator_spec,
    dipole_field,
    dipole_wrench,
    generalized_elliptic_integral,
    moment_from_spec,
)
from magprobe.geometry import Pose, euler_to_matrix, moment_direction

BACKENDS = kernels.available_backends()


def test_preferred_backend_is_compiled_when_built():
    if "compiled" in BACKENDS:
        assert kernels.BACKEND == "compiled"
    else:
        assert kernels.BACKEND == "python"


@pytest.mark.parametrize("name", list(BACKENDS))
def test_cel_batch_matches_scalar(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(5)
    kc = rng.uniform(0.05, 1.5, 64)
    p = rng.uniform(0.05, 3.0, 64)
    c = rng.uniform(-2.0, 2.0, 64)
    s = rng.uniform(-2.0, 2.0, 64)
    got = mod.cel_batch(kc, p, c, s)
    ref = np.array([generalized_elliptic_integral(*args) for args in zip(kc, p, c, s)])
    assert np.max(np.abs(got - ref)) < 1e-12 * np.max(np.abs(ref))


@pytest.mark.parametrize("name", list(BACKENDS))
def test_dipole_field_batch_matches_scalar(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(6)
    m = rng.normal(size=3) * 5
    src = rng.uniform(-0.1, 0.1, 3)
    targets = src + rng.uniform(0.05, 0.4, (40, 1)) * _units(rng, 40)
    got = mod.dipole_field_batch(m, src, targets)
    ref = np.array([dipole_field(m, src, t) for t in targets])
    assert np.max(np.abs(got - ref)) < 1e-15


@pytest.mark.parametrize("name", list(BACKENDS))
def test_measurement_model_matches_reference(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(7)
    sensors = rng.uniform(-0.3, 0.3, (36, 3))
    sensors[:, 2] = 0.0
    pc = np.array([0.03, -0.04, 0.12])
    roll, pitch, yaw = 0.4, -0.2, 0.9
    mmag = 3.8
    h, H = mod.measurement_model(pc, yaw, roll, pitch, mmag, sensors)
    mdir = moment_direction(roll, pitch, yaw)
    ref = np.concatenate([dipole_field(mmag * mdir, pc, s) for s in sensors])
    assert np.max(np.abs(h - ref)) < 1e-16

    # H against central finite differences of the stacked field
    def stacked(x):
        md = moment_direction(roll, pitch, x[3])
        return np.concatenate([dipole_field(mmag * md, x[:3], s) for s in sensors])

    x0 = np.array([*pc, yaw])
    eps = 1e-6
    H_fd = np.empty_like(H)
    for j in range(4):
        d = np.zeros(4)
        d[j] = eps
        H_fd[:, j] = (stacked(x0 + d) - stacked(x0 - d)) / (2 * eps)
    assert np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd)) < 1e-6


@pytest.mark.parametrize("name", list(BACKENDS))
def test_cylinder_field_batch_matches_scalar(name):
    mod = BACKENDS[name]
    spec = default_actuator_spec()
    pose = Pose(np.array([0.05, -0.1, 0.3]), euler_to_matrix(0.2, -0.4, 1.0))
    rng = np.random.default_rng(8)
    targets = rng.uniform(-0.3, 0.3, (30, 3))
    got = mod.cylinder_field_batch(
        spec.dimensions[0],
        spec.dimensions[1],
        spec.remanence / MU0,
        pose.orientation,
        pose.position,
        targets,
    )
    ref = np.array([cylinder_field(spec, pose, t) for t in targets])
    assert np.max(np.abs(got - ref)) < 1e-15


@pytest.mark.parametrize("name", list(BACKENDS))
def test_dipole_wrench_fast_matches_reference(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(9)
    for _ in range(30):
        mc = rng.normal(size=3) * 3
        ma = rng.normal(size=3) * 500
        pc = rng.uniform(-0.1, 0.1, 3)
        pa = pc + rng.uniform(0.1, 0.4) * _units(rng, 1)[0]
        f, tau = mod.dipole_wrench_fast(mc, pc, ma, pa)
        w = dipole_wrench(mc, pc, ma, pa)
        assert np.max(np.abs(f - w.force)) < 1e-12
        assert np.max(np.abs(tau - w.torque)) < 1e-12


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    py, cy = BACKENDS["python"], BACKENDS["compiled"]
    rng = np.random.default_rng(10)
    sensors = rng.uniform(-0.3, 0.3, (36, 3))
    pc = np.array([0.01, 0.02, 0.1])
    h1, H1 = py.measurement_model(pc, 0.3, 0.1, -0.2, moment_from_spec(default_actuator_spec()), sensors)
    h2, H2 = cy.measurement_model(pc, 0.3, 0.1, -0.2, moment_from_spec(default_actuator_spec()), sensors)
    assert np.max(np.abs(h1 - h2)) < 1e-14 * np.max(np.abs(h1))
    assert np.max(np.abs(H1 - H2)) < 1e-13 * np.max(np.abs(H1))


def _units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
