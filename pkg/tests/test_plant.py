import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from navigation.errors import FactorizationFailure, NonPositiveDt
from navigation.plant import (
    ControlBounds,
    NoiseModel,
    double_integrator,
    obs_jacobian,
    observe,
    sample_obs_noise,
    sample_process_noise,
    step,
)
from navigation.terrain import PlaneMap, corridor_field


# ─── Dynamics ───

def test_constant_velocity_drift():
    dyn = double_integrator(10.0)
    assert_array_equal(step(dyn, [0, 0, 0, 1, 0, 0], np.zeros(3), np.zeros(6)), [10, 0, 0, 1, 0, 0])


def test_zero_order_hold_response():
    dyn = double_integrator(1.0)
    assert_array_equal(step(dyn, np.zeros(6), [1, 0, 0], np.zeros(6)), [0.5, 0, 0, 1, 0, 0])


def test_two_drift_steps_advance_twice():
    dyn = double_integrator(2.0)
    x0 = np.array([1.0, 2.0, 3.0, 0.5, -1.0, 0.25])
    x2 = step(dyn, step(dyn, x0, np.zeros(3), np.zeros(6)), np.zeros(3), np.zeros(6))
    assert_allclose(x2[:3], x0[:3] + 2 * 2.0 * x0[3:])
    assert_allclose(x2, np.linalg.matrix_power(dyn.F, 2) @ x0)


@pytest.mark.parametrize("dt", [0.0, -1.0])
def test_non_positive_dt(dt):
    with pytest.raises(NonPositiveDt):
        double_integrator(dt)


def test_step_zero_fixed_point_and_additive_noise():
    dyn = double_integrator(10.0)
    assert_array_equal(step(dyn, np.zeros(6), np.zeros(3), np.zeros(6)), np.zeros(6))
    assert_array_equal(step(dyn, np.zeros(6), np.zeros(3), [1, 1, 1, 0, 0, 0]), [1, 1, 1, 0, 0, 0])


def test_step_is_linear(rng):
    dyn = double_integrator(10.0)
    for _ in range(20):
        a, b = rng.normal(size=2)
        x, y = rng.normal(size=(2, 6))
        u, w = rng.normal(size=(2, 3))
        xi = rng.normal(size=6)
        lhs = step(dyn, a * x + b * y, a * u + b * w, np.zeros(6))
        rhs = a * step(dyn, x, u, np.zeros(6)) + b * step(dyn, y, w, np.zeros(6))
        assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
        assert_allclose(step(dyn, x, u, np.zeros(6)) + step(dyn, np.zeros(6), np.zeros(3), xi),
                        step(dyn, x, u, xi), rtol=1e-12, atol=1e-12)


def test_step_broadcasts_over_particles(rng):
    dyn = double_integrator(10.0)
    xs = rng.normal(size=(5, 6))
    u = np.array([0.1, 0.0, -0.1])
    stacked = step(dyn, xs, u, np.zeros((5, 6)))
    for x, out in zip(xs, stacked):
        assert_allclose(out, step(dyn, x, u, np.zeros(6)))


def test_control_bounds_clip():
    bounds = ControlBounds(lower=(-1.0, -1.0, -0.5), upper=(1.0, 1.0, 0.5))
    assert_array_equal(bounds.clip([2.0, -3.0, 0.1]), [1.0, -1.0, 0.1])
    with pytest.raises(ValueError):
        ControlBounds(lower=(1.0, 0.0, 0.0), upper=(0.0, 0.0, 0.0))


# ─── Observation ───

def test_observe_altitude_above_ground():
    x = np.array([5.0, -3.0, 100.0, 0, 0, 0])
    assert observe(x, PlaneMap()) == 100.0
    assert observe(x, PlaneMap(0, 0, 40)) == 60.0
    assert observe(x, PlaneMap(0.1, 0.2, 3.0), eta=-5.0) == pytest.approx(observe(x, PlaneMap(0.1, 0.2, 3.0)) - 5.0)


def test_observe_after_step_is_affine_on_a_plane(rng):
    dyn = double_integrator(10.0)
    plane = PlaneMap(0.05, 0.02, 7.0)

    def z(x, u, xi, eta):
        return observe(step(dyn, x, u, xi), plane, eta)

    base = z(np.zeros(6), np.zeros(3), np.zeros(6), 0.0)
    for _ in range(10):
        x, xi = rng.normal(size=(2, 6))
        u = rng.normal(size=3)
        eta = float(rng.normal())
        parts = (z(x, np.zeros(3), np.zeros(6), 0.0) + z(np.zeros(6), u, np.zeros(6), 0.0)
                 + z(np.zeros(6), np.zeros(3), xi, 0.0) + z(np.zeros(6), np.zeros(3), np.zeros(6), eta) - 3 * base)
        assert z(x, u, xi, eta) == pytest.approx(parts, rel=1e-12, abs=1e-9)


def test_jacobian_on_flat_and_plane_maps():
    x = np.array([10.0, 20.0, 100.0, 1.0, 0.0, 0.0])
    assert_array_equal(obs_jacobian(x, PlaneMap()), [0, 0, 1, 0, 0, 0])
    assert_array_equal(obs_jacobian(x, PlaneMap(0.3, -0.2, 5.0)), [-0.3, 0.2, 1, 0, 0, 0])


def test_jacobian_matches_finite_differences(rng):
    field = corridor_field()
    h = 1e-4
    for _ in range(50):
        x = np.concatenate([rng.uniform([0, -200, 50], [2000, 800, 150]), rng.normal(size=3)])
        H = obs_jacobian(x, field)
        fd = np.array([(observe(x + h * e, field) - observe(x - h * e, field)) / (2 * h) for e in np.eye(6)])
        assert_allclose(H, fd, rtol=1e-5, atol=1e-8)


# ─── Noise ───

def test_zero_process_noise_draws_zero(rng):
    nm = NoiseModel(Q=np.zeros((6, 6)), R=1.0)
    assert_array_equal(sample_process_noise(nm, rng, size=100), 0.0)
    assert_array_equal(sample_process_noise(nm, rng), np.zeros(6))


def test_observation_noise_statistics(rng):
    nm = NoiseModel.diagonal(np.ones(6), 4.0)
    draws = sample_obs_noise(nm, rng, size=1_000_000)
    assert abs(draws.mean()) < 3 * 2.0 / 1e3
    assert draws.var() == pytest.approx(4.0, rel=0.05)
    assert isinstance(sample_obs_noise(nm, rng), float)


def test_process_noise_covariance(rng):
    q = np.array([1.0, 2.0, 3.0, 0.01, 0.02, 0.03])
    nm = NoiseModel.diagonal(q, 1.0)
    draws = sample_process_noise(nm, rng, size=200_000)
    assert_allclose(draws.var(axis=0), q, rtol=0.05)
    corr = np.corrcoef(draws.T)
    assert np.max(np.abs(corr - np.eye(6))) < 0.02


def test_non_psd_process_covariance(rng):
    nm = NoiseModel.diagonal((1.0, 1.0, 1.0, 1.0, 1.0, -1e-3), 1.0)
    with pytest.raises(FactorizationFailure):
        sample_process_noise(nm, rng)


@pytest.mark.parametrize("r", [0.0, -1.0])
def test_observation_variance_must_be_positive(r):
    with pytest.raises(ValueError):
        NoiseModel.diagonal(np.ones(6), r)
