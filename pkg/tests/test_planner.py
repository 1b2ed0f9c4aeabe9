"""Tests for the cost-bounded RRT and the path utilities."""

import numpy as np
import pytest

from gpcscp.models import double_integrator_model, euler_step, pendulum_model
from gpcscp.planner import (
    PlannerConfig,
    PlannerFailure,
    ao_rrt,
    collision_free,
    resample_path,
    straight_line,
)

GOAL = np.array([2.0, 0.0, 0.0, 0.0])
CENTERS = np.array([[1.0, 0.0]])
RADII = np.array([0.4])


def near_goal(x: np.ndarray) -> bool:
    return bool(np.linalg.norm(x[:2] - GOAL[:2]) <= 0.3 and np.linalg.norm(x[2:]) <= 0.5)


def plan(obstacles: bool, seed: int = 0, budget: int = 1500):
    model = double_integrator_model(2, 0.0, u_max=1.0)
    return model, ao_rrt(
        model,
        np.zeros(4),
        near_goal,
        0.25,
        [-1.0, -1.5, -1.0, -1.0],
        [3.0, 1.5, 1.0, 1.0],
        goal_state=GOAL,
        obstacle_centers=CENTERS if obstacles else None,
        obstacle_radii=RADII if obstacles else None,
        cfg=PlannerConfig(node_budget=budget),
        rng_seed=seed,
    )


@pytest.fixture(scope="module")
def free_plan():
    return plan(False)


@pytest.fixture(scope="module")
def blocked_plan():
    return plan(True)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"node_budget": 0}, {"max_edge_steps": 0}, {"extend_tries": 0}, {"goal_bias": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PlannerConfig(**kw)


class TestCollisionFree:
    def test_no_obstacles(self):
        assert collision_free(np.zeros((3, 2)), np.zeros((0, 2)), np.zeros(0)).all()

    def test_boundary_counts_as_free(self):
        flags = collision_free(np.array([[0.4, 0.0], [0.39, 0.0]]), np.zeros((1, 2)), np.array([0.4]))
        np.testing.assert_array_equal(flags, [True, False])


class TestAoRrt:
    @pytest.mark.parametrize("fixture", ["free_plan", "blocked_plan"])
    def test_reaches_goal(self, fixture, request):
        _, res = request.getfixturevalue(fixture)
        assert near_goal(res.states[-1])
        np.testing.assert_array_equal(res.states[0], np.zeros(4))
        assert res.horizon == res.states.shape[0] == res.controls.shape[0] + 1

    @pytest.mark.parametrize("fixture", ["free_plan", "blocked_plan"])
    def test_path_reintegrates(self, fixture, request):
        model, res = request.getfixturevalue(fixture)
        x = res.states[0]
        for k, u in enumerate(res.controls):
            x = euler_step(model, x, u, 0.25)
            np.testing.assert_allclose(x, res.states[k + 1], atol=1e-9)

    @pytest.mark.parametrize("fixture", ["free_plan", "blocked_plan"])
    def test_solution_costs_decrease(self, fixture, request):
        _, res = request.getfixturevalue(fixture)
        costs = res.solution_costs
        assert costs and all(b < a for a, b in zip(costs, costs[1:]))
        assert res.cost == costs[-1]

    def test_cost_is_effort(self, free_plan):
        _, res = free_plan
        effort = float(np.sum(np.linalg.norm(res.controls, axis=1)) * 0.25)
        assert res.cost == pytest.approx(effort, rel=1e-12)

    def test_controls_in_box(self, blocked_plan):
        _, res = blocked_plan
        assert np.all(np.abs(res.controls) <= 1.0)

    def test_waypoints_avoid_obstacle(self, blocked_plan):
        _, res = blocked_plan
        assert collision_free(res.states[:, :2], CENTERS, RADII).all()

    def test_tree_respects_cost_to_come(self, blocked_plan):
        _, res = blocked_plan
        for node in res.nodes[1:]:
            assert node.cost_to_come >= res.nodes[node.parent].cost_to_come

    def test_seeded_determinism(self, blocked_plan):
        _, res = blocked_plan
        _, again = plan(True)
        np.testing.assert_array_equal(res.states, again.states)
        np.testing.assert_array_equal(res.controls, again.controls)
        assert res.solution_costs == again.solution_costs

    def test_budget_exhausted(self):
        with pytest.raises(PlannerFailure):
            plan(False, budget=2)

    def test_colliding_start(self):
        model = double_integrator_model(2, 0.0)
        with pytest.raises(ValueError):
            ao_rrt(model, [1.0, 0.0, 0.0, 0.0], near_goal, 0.25, -np.ones(4), np.ones(4),
                   obstacle_centers=CENTERS, obstacle_radii=RADII)

    def test_unbounded_controls(self):
        model = double_integrator_model(2, 0.0, u_max=np.inf)
        with pytest.raises(ValueError):
            ao_rrt(model, np.zeros(4), near_goal, 0.25, -np.ones(4), np.ones(4))

    def test_nonpositive_dt(self):
        with pytest.raises(ValueError):
            ao_rrt(pendulum_model(0.0), np.zeros(2), lambda x: True, 0.0, -np.ones(2), np.ones(2))


class TestResample:
    def test_identity(self):
        s = np.arange(10.0).reshape(5, 2)
        u = np.arange(4.0)[:, None]
        out_s, out_u = resample_path(s, u, 5)
        np.testing.assert_array_equal(out_s, s)
        np.testing.assert_array_equal(out_u, u)

    def test_linear_path_stays_linear(self):
        s = np.linspace(0, 1, 7)[:, None] * np.array([[2.0, -1.0]])
        out_s, out_u = resample_path(s, np.ones((6, 1)), 13)
        np.testing.assert_allclose(out_s, np.linspace(0, 1, 13)[:, None] * np.array([[2.0, -1.0]]), atol=1e-15)
        assert out_u.shape == (12, 1)

    def test_controls_follow_containing_step(self):
        s = np.zeros((3, 1))
        u = np.array([[1.0], [2.0]])
        _, out_u = resample_path(s, u, 5)
        np.testing.assert_array_equal(out_u[:, 0], [1.0, 1.0, 2.0, 2.0])

    def test_short_horizon(self):
        with pytest.raises(ValueError):
            resample_path(np.zeros((3, 1)), np.zeros((2, 1)), 1)


class TestStraightLine:
    def test_endpoints(self):
        s, u = straight_line([0, 0, 0, 0], [1, 2, 0, 0], 5, 3)
        np.testing.assert_array_equal(s[0], [0, 0, 0, 0])
        np.testing.assert_array_equal(s[-1], [1, 2, 0, 0])
        np.testing.assert_allclose(np.diff(s, axis=0), np.full((4, 4), [0.25, 0.5, 0, 0]))
        np.testing.assert_array_equal(u, np.zeros((4, 3)))

    def test_blocked(self):
        with pytest.raises(PlannerFailure):
            straight_line([0, 0, 0, 0], [2, 0, 0, 0], 11, 2, CENTERS, RADII)


@pytest.mark.slow
def test_four_obstacle_pipeline():
    """The sampled nominal on the four-obstacle map seeds a converged, safe gPC-SCP plan."""
    from gpcscp.pipeline import run_plan
    from gpcscp.scenario import load_scenario

    sc = load_scenario("fig11")
    assert len(sc.obstacles) == 4 and sc.planner.node_budget == 5000
    out = run_plan(sc)
    assert out.seed_source == "planner"
    assert out.converged
    assert out.max_collision_margin <= 1e-6
