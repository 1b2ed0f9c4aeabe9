"""Tests for seeded Monte-Carlo validation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcscp.basis import build_basis
from gpcscp.constraints import Obstacle
from gpcscp.mc import (
    Plan,
    TrackingGains,
    ValidationSetup,
    binomial_bound,
    rollout_open_loop,
    rollout_stream,
    tracking_controller,
    validate,
    worker_count,
)
from gpcscp.models import double_integrator_model, euler_step, spacecraft3dof_model

T, DT = 21, 0.25
BASIS = build_basis(1, 1)


def coast_plan(model, controls=None, spread=0.0) -> Plan:
    """Deterministic Euler path from rest, optionally with first-order spread in x at every step."""
    controls = np.full((T - 1, model.d_u), 0.2) if controls is None else controls
    states = [np.zeros(model.d_x)]
    for u in controls:
        states.append(euler_step(model, states[-1], u, DT))
    X = np.zeros((T, model.d_x, BASIS.n_terms))
    X[:, :, 0] = states
    X[:, 0, 1] = spread
    return Plan(X.reshape(T, -1), controls, BASIS)


class TestSetup:
    def test_bad_substeps(self):
        with pytest.raises(ValueError):
            ValidationSetup(double_integrator_model(2, 0.1), DT, substeps=0)

    def test_bad_reference(self):
        with pytest.raises(ValueError):
            ValidationSetup(double_integrator_model(2, 0.1), DT, reference="median")

    def test_bad_gains(self):
        with pytest.raises(ValueError):
            TrackingGains(kp=0.0)

    def test_bad_mode(self):
        model = double_integrator_model(2, 0.1)
        with pytest.raises(ValueError):
            validate(coast_plan(model), ValidationSetup(model, DT), 1, 0, mode="feedforward")


class TestStreams:
    def test_stream_is_keyed(self):
        a = rollout_stream(3, 5).standard_normal(4)
        np.testing.assert_array_equal(a, rollout_stream(3, 5).standard_normal(4))
        assert not np.array_equal(a, rollout_stream(3, 6).standard_normal(4))
        assert not np.array_equal(a, rollout_stream(4, 5).standard_normal(4))

    def test_open_loop_without_noise_is_euler(self):
        model = double_integrator_model(2, 0.0)
        u = np.random.default_rng(0).uniform(-1, 1, (T - 1, 2))
        out = rollout_open_loop(model, u, np.zeros(4), DT, seed=1)
        x = np.zeros(4)
        for k in range(T - 1):
            x = euler_step(model, x, u[k], DT)
            np.testing.assert_array_equal(out[k + 1], x)

    def test_open_loop_seeded(self):
        model = double_integrator_model(2, 0.3)
        u = np.ones((T - 1, 2))
        a = rollout_open_loop(model, u, np.zeros(4), DT, seed=2, rollout=7, substeps=4)
        b = rollout_open_loop(model, u, np.zeros(4), DT, seed=2, rollout=7, substeps=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, rollout_open_loop(model, u, np.zeros(4), DT, seed=2, rollout=8, substeps=4))


class TestController:
    def test_zero_error_returns_nominal(self):
        model = double_integrator_model(2, 0.0)
        ref = np.random.default_rng(0).standard_normal((T, 4))
        u_ref = np.random.default_rng(1).uniform(-0.5, 0.5, (T - 1, 2))
        ctrl = tracking_controller(model, ref, u_ref)
        for k in range(T - 1):
            np.testing.assert_array_equal(ctrl(ref[k], k), u_ref[k])

    def test_pd_law(self):
        model = double_integrator_model(2, 0.0, u_max=np.inf)
        ctrl = tracking_controller(model, np.zeros((T, 4)), np.zeros((T - 1, 2)), TrackingGains(2.0, 3.0))
        np.testing.assert_allclose(ctrl(np.array([0.1, -0.2, 0.3, 0.0]), 0), [-0.2 - 0.9, 0.4])

    def test_interpolated_reference(self):
        model = double_integrator_model(1, 0.0)
        ref = np.array([[0.0, 0.0], [1.0, 2.0]])
        ctrl = tracking_controller(model, ref, np.zeros((1, 1)))
        np.testing.assert_allclose(ctrl.reference(0, 0.25), [0.25, 0.5])

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=6, max_size=6),
        st.lists(st.floats(-5, 5), min_size=6, max_size=6),
    )
    def test_spacecraft_outputs_in_box(self, x, ref):
        model = spacecraft3dof_model()
        refs = np.tile(np.asarray(ref), (3, 1))
        ctrl = tracking_controller(model, refs, np.full((2, 8), 0.2))
        u = ctrl(np.asarray(x), 0)
        assert np.all(u >= 0.0) and np.all(u <= 0.45)

    def test_spacecraft_netting(self):
        # a net request along +x body must not fire both opposing thrusters
        model = spacecraft3dof_model()
        ctrl = tracking_controller(model, np.zeros((2, 6)), np.zeros((1, 8)))
        u = ctrl(np.array([-0.1, 0.0, 0.0, 0.0, 0.0, 0.0]), 0)
        for i, j in model.opposing_pairs:
            assert u[i] == 0.0 or u[j] == 0.0

    def test_perturbation_decays(self):
        # plan: rest at origin with 0.2 first-order spread; tracking the mean pulls every sample back
        model = double_integrator_model(2, 0.0)
        controls = np.zeros((T * 2 - 1, 2))
        X = np.zeros((2 * T, 4, BASIS.n_terms))
        X[:, 0, 1] = 0.2
        plan = Plan(X.reshape(2 * T, -1), controls, BASIS)
        setup = ValidationSetup(model, DT, reference="mean")
        stats = validate(plan, setup, 20, seed=0, keep_trajectories=True)
        start = np.abs(stats.trajectories[:, 0, 0])
        end = np.abs(stats.trajectories[:, -1, 0])
        assert start.min() > 0
        assert np.all(end <= 1e-3 * start)
        err = np.linalg.norm(stats.trajectories[:, :, :2], axis=2)
        assert np.all(np.diff(err, axis=1) <= 1e-12)


class TestValidate:
    def test_zero_rollouts(self):
        model = double_integrator_model(2, 0.1)
        stats = validate(coast_plan(model), ValidationSetup(model, DT), 0, seed=0)
        assert stats.summary() == {
            "n": 0,
            "collisions": 0,
            "terminal_violations": 0,
            "min_clearance_q05": None,
            "cost_mean": None,
        }

    def test_noise_free_open_loop_matches_plan(self):
        model = double_integrator_model(2, 0.0)
        plan = coast_plan(model)
        stats = validate(plan, ValidationSetup(model, DT, substeps=1), 3, seed=0, mode="open", keep_trajectories=True)
        for traj in stats.trajectories:
            np.testing.assert_array_equal(traj, plan.gpc_trajectory.reshape(T, 4, -1)[:, :, 0])

    def test_noise_free_safe_plan(self):
        model = double_integrator_model(2, 0.0)
        obs = (Obstacle([0.0, 3.0], np.zeros((2, 2)), 0.5),)
        setup = ValidationSetup(model, DT, obstacles=obs, r_rob=0.1)
        stats = validate(coast_plan(model), setup, 50, seed=0)
        assert stats.collisions == 0
        assert stats.min_clearance.min() > 0

    def test_plan_through_obstacle_always_collides(self):
        model = double_integrator_model(2, 0.0)
        obs = (Obstacle([0.5, 0.5], np.zeros((2, 2)), 0.3),)
        stats = validate(coast_plan(model), ValidationSetup(model, DT, obstacles=obs), 25, seed=0)
        assert stats.collisions == 25
        assert np.all(stats.min_clearance < 0)

    def test_terminal_set(self):
        model = double_integrator_model(2, 0.0)
        plan = coast_plan(model)
        end = plan.gpc_trajectory.reshape(T, 4, -1)[-1, :, 0]
        ok = ValidationSetup(model, DT, goal_mean=end, c_terminal=1e-9, substeps=1)
        far = ValidationSetup(model, DT, goal_mean=end + 1.0, c_terminal=1.0, substeps=1)
        assert validate(plan, ok, 10, 0, mode="open").terminal_violations == 0
        assert validate(plan, far, 10, 0, mode="open").terminal_violations == 10

    def test_cost_is_effort(self):
        model = double_integrator_model(2, 0.0)
        plan = coast_plan(model)
        stats = validate(plan, ValidationSetup(model, DT), 2, 0, mode="open")
        np.testing.assert_allclose(stats.costs, (T - 1) * DT * np.hypot(0.2, 0.2), rtol=1e-12)

    def test_same_seed_identical(self):
        model = double_integrator_model(2, 0.2)
        plan = coast_plan(model, spread=0.05)
        setup = ValidationSetup(model, DT, obstacles=(Obstacle([0.5, 0.4], 0.01 * np.eye(2), 0.2),))
        a = validate(plan, setup, 40, seed=5, keep_trajectories=True)
        b = validate(plan, setup, 40, seed=5, keep_trajectories=True)
        np.testing.assert_array_equal(a.trajectories, b.trajectories)
        assert a.summary() == b.summary()
        c = validate(plan, setup, 40, seed=6, keep_trajectories=True)
        assert not np.array_equal(a.trajectories, c.trajectories)

    def test_batching_and_threads_do_not_matter(self):
        model = double_integrator_model(2, 0.2)
        plan = coast_plan(model, spread=0.05)
        setup = ValidationSetup(model, DT, obstacles=(Obstacle([0.5, 0.4], 0.01 * np.eye(2), 0.2),))
        ref = validate(plan, setup, 60, seed=1, chunk=60, threads=1, keep_trajectories=True)
        for chunk, threads in [(7, 1), (7, 4), (25, 3)]:
            other = validate(plan, setup, 60, seed=1, chunk=chunk, threads=threads, keep_trajectories=True)
            np.testing.assert_array_equal(other.trajectories, ref.trajectories)
            np.testing.assert_array_equal(other.collided, ref.collided)
            np.testing.assert_array_equal(other.costs, ref.costs)

    def test_prefix_stable(self):
        # rollout i only depends on (seed, i)
        model = double_integrator_model(2, 0.2)
        plan = coast_plan(model, spread=0.05)
        setup = ValidationSetup(model, DT)
        few = validate(plan, setup, 5, 3, keep_trajectories=True)
        many = validate(plan, setup, 30, 3, keep_trajectories=True)
        np.testing.assert_array_equal(many.trajectories[:5], few.trajectories)

    def test_negative_count(self):
        model = double_integrator_model(2, 0.1)
        with pytest.raises(ValueError):
            validate(coast_plan(model), ValidationSetup(model, DT), -1, 0)


class TestHelpers:
    def test_binomial_bound(self):
        assert binomial_bound(0.05, 1000) == pytest.approx(0.05 + 3 * np.sqrt(0.05 * 0.95 / 1000), rel=1e-15)

    def test_worker_count(self, monkeypatch):
        monkeypatch.delenv("GPCSCP_THREADS", raising=False)
        assert worker_count() == 1
        monkeypatch.setenv("GPCSCP_THREADS", "6")
        assert worker_count() == 6
        monkeypatch.setenv("GPCSCP_THREADS", "many")
        assert worker_count() == 1
