"""Tests for the projected coefficient dynamics and moment algebra."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcscp.basis import build_basis, default_rule, gauss_hermite
from gpcscp.models import SdeModel, double_integrator_model, pendulum_model, spacecraft3dof_model
from gpcscp.projection import (
    GermMap,
    GpcDivergenceError,
    linear_covariance_propagation,
    linearize_projected,
    moments_from_gpc,
    project_cost_matrix,
    project_dynamics,
    project_initial,
    propagate_gpc,
    sample_reconstruct,
    sample_reconstruct_many,
)


def scalar_model(drift_fn, diffusion_value=1.0) -> SdeModel:
    """One-state, one-control, one-channel plant ``dx = f(x) dt + u dt + c dW``."""

    def drift(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return drift_fn(x) + u

    def diffusion(x, u):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.full(shape + (1, 1), diffusion_value)

    return SdeModel("scalar", 1, 1, 1, drift, diffusion, np.array([-10.0]), np.array([10.0]))


def linear_plant():
    return scalar_model(lambda x: x)


def quadratic_plant():
    return scalar_model(lambda x: x**2)


def projected(model, p_gpc, stdev=None):
    gm = GermMap.build(model.d_w, stdev)
    basis = build_basis(p_gpc, gm.d_xi)
    return project_dynamics(model, basis, default_rule(basis), gm), basis, gm


coeff = st.floats(-2.0, 2.0, allow_nan=False)


class TestGermMap:
    def test_build(self):
        gm = GermMap.build(1, [0.0, 0.1, 0.0, 0.2])
        assert gm.d_xi == 3
        assert gm.channel_germs == (0,)
        assert gm.initial_germs == ((1, 1), (3, 2))

    def test_no_noise_no_uncertainty(self):
        assert GermMap.build(0).d_xi == 1

    def test_duplicate_germ(self):
        with pytest.raises(ValueError):
            GermMap(2, (0,), ((0, 1), (1, 1)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            GermMap(1, (1,))


class TestProjectInitial:
    def test_deterministic(self):
        gm = GermMap.build(1)
        b = build_basis(2, 1)
        X = project_initial([1.0, 2.0], [0.0, 0.0], b, gm)
        np.testing.assert_array_equal(X, [1.0, 0, 0, 2.0, 0, 0])

    def test_scalar_uncertain(self):
        gm = GermMap(1, (), ((0, 0),))
        b = build_basis(2, 1)
        X = project_initial([3.0], [0.5], b, gm)
        np.testing.assert_array_equal(X, [3.0, 0.5, 0.0])
        mean, cov = moments_from_gpc(X, b)
        np.testing.assert_allclose(mean, [3.0])
        np.testing.assert_allclose(cov, [[0.25]])
        np.testing.assert_allclose(sample_reconstruct(X, b, [0.0]), [3.0])

    def test_too_many_uncertain(self):
        gm = GermMap(1, (), ((0, 0),))
        with pytest.raises(ValueError):
            project_initial([0.0, 0.0], [1.0, 1.0], build_basis(1, 1), gm)

    def test_unassigned(self):
        gm = GermMap(2, (0,), ())
        with pytest.raises(ValueError):
            project_initial([0.0], [1.0], build_basis(1, 2), gm)


class TestProjectDynamics:
    def test_linear_plant_matches_closed_form(self):
        pd, basis, _ = projected(linear_plant(), 1)
        X = np.array([0.7, -0.3])
        np.testing.assert_allclose(pd.drift_coeffs(X, [0.4]), [0.7 + 0.4, -0.3], atol=1e-14)
        np.testing.assert_allclose(pd.diffusion_coeffs(X, [0.4]), [0.0, 1.0], atol=1e-14)
        dt = 0.01
        np.testing.assert_allclose(
            pd.increment(X, [0.4], dt), [(0.7 + 0.4) * dt, -0.3 * dt + np.sqrt(dt)], atol=1e-15
        )

    def test_linear_plant_underactuated(self):
        pd, _, _ = projected(linear_plant(), 3)
        _, b = pd.jacobians(np.zeros(pd.n_state), [0.0], 0.1)
        rows = np.flatnonzero(np.abs(b[:, 0]) > 1e-14)
        np.testing.assert_array_equal(rows, [0])

    def test_first_coefficient_ignores_controls(self):
        pd, _, _ = projected(linear_plant(), 1)
        X0 = np.array([0.0, 0.0])
        a = propagate_gpc(pd, X0, np.zeros((20, 1)), 0.05)
        b = propagate_gpc(pd, X0, np.linspace(-3, 3, 20)[:, None], 0.05)
        np.testing.assert_allclose(a[:, 1], b[:, 1], rtol=0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(coeff, coeff, coeff)
    def test_quadratic_plant_degree_one(self, x0, x1, u):
        pd, _, _ = projected(quadratic_plant(), 1)
        np.testing.assert_allclose(pd.drift_coeffs(np.array([x0, x1]), [u]), [x0**2 + x1**2 + u, 2 * x0 * x1], atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(coeff, coeff, coeff, coeff)
    def test_quadratic_plant_degree_two(self, x0, x1, x2, u):
        # x^2 expanded with He_1^2 = He_2 + 1, He_1 He_2 = He_3 + 2 He_1, He_2^2 = He_4 + 4 He_2 + 2
        pd, _, _ = projected(quadratic_plant(), 2)
        expected = [
            x0**2 + x1**2 + 2 * x2**2 + u,
            2 * x0 * x1 + 4 * x1 * x2,
            2 * x0 * x2 + x1**2 + 4 * x2**2,
        ]
        np.testing.assert_allclose(pd.drift_coeffs(np.array([x0, x1, x2]), [u]), expected, atol=1e-10)

    def test_zero_dynamics(self):
        model = scalar_model(lambda x: 0.0 * x, diffusion_value=0.0)
        pd, _, _ = projected(model, 2)
        X = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(pd.drift_coeffs(X, [0.0]), np.zeros(3))
        np.testing.assert_array_equal(pd.diffusion_coeffs(X, [0.0]), np.zeros(3))

    def test_zero_sigma_diffusion_vanishes(self):
        pd, _, _ = projected(double_integrator_model(2, 0.0), 2)
        X = np.random.default_rng(0).standard_normal(pd.n_state)
        np.testing.assert_array_equal(pd.diffusion_coeffs(X, [0.3, -0.2]), np.zeros(pd.n_state))

    def test_mismatched_germ_map(self):
        model = pendulum_model(0.001)
        basis = build_basis(1, 2)
        with pytest.raises(ValueError):
            project_dynamics(model, basis, default_rule(basis), GermMap(2, (0, 1)))


class TestPropagate:
    def test_zero_dynamics_constant(self):
        model = scalar_model(lambda x: 0.0 * x, diffusion_value=0.0)
        pd, _, _ = projected(model, 1)
        traj = propagate_gpc(pd, [1.0, 0.5], np.zeros((10, 1)), 0.1)
        np.testing.assert_array_equal(traj, np.tile([1.0, 0.5], (11, 1)))

    def test_divergence_reported(self):
        pd, _, _ = projected(quadratic_plant(), 1)
        with pytest.raises(GpcDivergenceError) as info:
            propagate_gpc(pd, [5.0, 0.0], np.zeros((200, 1)), 0.1)
        assert info.value.step >= 1

    def test_pendulum_deterministic_matches_euler(self):
        model = pendulum_model(0.0)
        pd, basis, gm = projected(model, 1)
        X0 = project_initial([np.pi / 4, 0.0], [0.0, 0.0], basis, gm)
        traj = propagate_gpc(pd, X0, np.zeros((100, 0)), 0.01)
        x = np.array([np.pi / 4, 0.0])
        for _ in range(100):
            x = x + model.drift(x, np.zeros(0)) * 0.01
        np.testing.assert_allclose(moments_from_gpc(traj[-1], basis)[0], x, atol=1e-14)

    def test_nonpositive_dt(self):
        pd, _, _ = projected(linear_plant(), 1)
        with pytest.raises(ValueError):
            propagate_gpc(pd, [0.0, 0.0], np.zeros((1, 1)), 0.0)


class TestMoments:
    def test_examples(self):
        b = build_basis(2, 1)
        mean, cov = moments_from_gpc(np.array([2.0, 0.0, 0.0]), b)
        np.testing.assert_array_equal(mean, [2.0])
        np.testing.assert_array_equal(cov, [[0.0]])
        _, cov = moments_from_gpc(np.array([2.0, 0.3, 0.0]), b)
        np.testing.assert_allclose(cov, [[0.09]])
        _, cov = moments_from_gpc(np.array([2.0, 0.3, 0.2]), b)
        np.testing.assert_allclose(cov, [[0.09 + 2 * 0.04]])

    def test_reconstruct_examples(self):
        b = build_basis(2, 1)
        X = np.array([1.5, 0.4, 0.0])
        np.testing.assert_allclose(sample_reconstruct(X, b, [0.0]), [1.5])
        np.testing.assert_allclose(sample_reconstruct(X, b, [1.0]), [1.9])

    @pytest.mark.parametrize("p,d,dx", [(1, 1, 2), (2, 1, 1), (2, 2, 3), (3, 2, 2)])
    def test_sampling_consistency(self, p, d, dx):
        rng = np.random.default_rng(p * 10 + d)
        b = build_basis(p, d)
        X = rng.standard_normal(dx * b.n_terms) * 0.5
        mean, cov = moments_from_gpc(X, b)
        n = 100_000
        samples = sample_reconstruct_many(X, b, rng.standard_normal((n, d)))
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(samples.mean(axis=0) - mean) <= 4 * sd / np.sqrt(n) + 1e-12)
        emp = np.cov(samples.T).reshape(dx, dx)
        # standard error of a sample covariance entry from fourth moments
        centred = samples - samples.mean(axis=0)
        prods = centred[:, :, None] * centred[:, None, :]
        se = prods.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(emp - cov) <= 4 * se + 1e-12)

    def test_stacked(self):
        b = build_basis(1, 1)
        X = np.array([[1.0, 0.1, 2.0, 0.2], [3.0, 0.3, 4.0, 0.4]])
        mean, cov = moments_from_gpc(X, b)
        assert mean.shape == (2, 2) and cov.shape == (2, 2, 2)
        np.testing.assert_allclose(cov[1], [[0.09, 0.12], [0.12, 0.16]])


class TestCostMatrix:
    def test_scalar_degree_two(self):
        q0 = 1.7
        np.testing.assert_allclose(project_cost_matrix([[q0]], build_basis(2, 1)), np.diag([q0, q0, 2 * q0]), atol=1e-12)

    def test_zero(self):
        np.testing.assert_array_equal(project_cost_matrix(np.zeros((2, 2)), build_basis(2, 2)), np.zeros((12, 12)))

    def test_identity(self):
        np.testing.assert_array_equal(project_cost_matrix(np.eye(2), build_basis(1, 1)), np.eye(4))

    def test_asymmetric(self):
        with pytest.raises(ValueError):
            project_cost_matrix([[1.0, 2.0], [0.0, 1.0]], build_basis(1, 1))

    def test_quadratic_form_is_expected_cost(self):
        rng = np.random.default_rng(5)
        b = build_basis(2, 2)
        a = rng.standard_normal((3, 3))
        Q = a @ a.T
        X = rng.standard_normal(3 * b.n_terms)
        mean, cov = moments_from_gpc(X, b)
        expected = mean @ Q @ mean + np.trace(Q @ cov)
        assert X @ project_cost_matrix(Q, b) @ X == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 3), st.integers(1, 3))
    def test_min_eigenvalue(self, seed, p, d):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 3))
        Q = a @ a.T
        big = project_cost_matrix(Q, build_basis(p, d))
        assert np.linalg.eigvalsh(big).min() >= np.linalg.eigvalsh(Q).min() - 1e-10


class TestLinearize:
    def test_linear_plant_exact(self):
        pd, _, _ = projected(linear_plant(), 2)
        dt = 0.1
        for X in (np.zeros(3), np.array([1.0, -2.0, 0.5])):
            a, b, z = linearize_projected(pd, X, [0.3], dt)
            np.testing.assert_allclose(a, dt * np.eye(3), atol=1e-9)
            np.testing.assert_allclose(b, [[dt], [0.0], [0.0]], atol=1e-9)
            np.testing.assert_allclose(z, [0.0, np.sqrt(dt), 0.0], atol=1e-9)

    @pytest.mark.parametrize("model_fn", [quadratic_plant, lambda: spacecraft3dof_model()])
    def test_exact_at_nominal(self, model_fn):
        pd, _, _ = projected(model_fn(), 2)
        rng = np.random.default_rng(2)
        X = rng.standard_normal(pd.n_state) * 0.3
        u = rng.uniform(0, 0.45, pd.d_u)
        a, b, z = linearize_projected(pd, X, u, 0.5)
        np.testing.assert_allclose(a @ X + b @ u + z, pd.increment(X, u, 0.5), atol=1e-12)

    def test_jacobians_match_finite_differences(self):
        pd, _, _ = projected(quadratic_plant(), 2)
        X = np.array([0.4, 0.3, -0.2])
        u = np.array([0.1])
        dt = 0.2
        a, b, _ = linearize_projected(pd, X, u, dt)
        h = 1e-6
        fd = np.column_stack(
            [(pd.increment(X + h * e, u, dt) - pd.increment(X - h * e, u, dt)) / (2 * h) for e in np.eye(3)]
        )
        np.testing.assert_allclose(a, fd, rtol=1e-5, atol=1e-9)
        fdu = (pd.increment(X, u + h, dt) - pd.increment(X, u - h, dt)) / (2 * h)
        np.testing.assert_allclose(b[:, 0], fdu, rtol=1e-5, atol=1e-9)

    def test_non_finite_nominal(self):
        pd, _, _ = projected(linear_plant(), 1)
        with pytest.raises(ValueError):
            linearize_projected(pd, [np.nan, 0.0], [0.0], 0.1)


class TestLinearCovariance:
    def test_additive_linear_plant(self):
        """For a linear plant with additive noise the recursion is exact."""
        model = linear_plant()
        dt = 0.1
        means, covs = linear_covariance_propagation(model, [1.0], [[0.0]], np.zeros((3, 1)), dt)
        f = 1 + dt
        np.testing.assert_allclose(means[:, 0], [1.0, f, f**2, f**3])
        np.testing.assert_allclose(covs[-1, 0, 0], dt * (1 + f**2 + f**4))


class TestQuadratureLevel:
    def test_more_nodes_same_answer_for_polynomial(self):
        model = quadratic_plant()
        gm = GermMap.build(1)
        basis = build_basis(2, 1)
        a = project_dynamics(model, basis, default_rule(basis), gm)
        b = project_dynamics(model, basis, gauss_hermite(12, 1), gm)
        X = np.array([0.3, 0.2, 0.1])
        np.testing.assert_allclose(a.increment(X, [0.0], 0.1), b.increment(X, [0.0], 0.1), atol=1e-13)
