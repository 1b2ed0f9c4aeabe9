"""Asymptotically optimal RRT over the noise-free dynamics.

The tree grows in state-times-cost space: samples carry a target cost drawn
below the best solution found so far, nodes whose cost exceeds that bound
are never added, and every new goal connection tightens the bound.  Edges
are piecewise-constant controls integrated with explicit Euler at the
planning step, so a solution is already a waypoint sequence at that step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .models import SdeModel, euler_step


class PlannerFailure(RuntimeError):
    """No goal connection within the node budget."""


@dataclass(frozen=True)
class TreeNode:
    """One tree vertex; ``parent`` is ``-1`` for the root."""

    state: np.ndarray
    parent: int
    edge_control: np.ndarray
    edge_duration: float
    cost_to_come: float
    edge_steps: int = 0


class PlannerResult(NamedTuple):
    states: np.ndarray
    controls: np.ndarray
    horizon: int
    cost: float
    solution_costs: list
    nodes: list


@dataclass(frozen=True)
class PlannerConfig:
    """Tuning knobs for :func:`ao_rrt`.

    Attributes:
        node_budget: Maximum number of tree nodes.
        max_edge_steps: Edge durations are ``1..max_edge_steps`` planning steps.
        extend_tries: Random controls tried per extension (best one kept).
        goal_bias: Probability of sampling the goal state.
        position_weight, velocity_weight: Nearest-neighbour metric weights.
        cost_weight: Weight of the normalized cost coordinate once a
            solution exists.
    """

    node_budget: int = 5000
    max_edge_steps: int = 10
    extend_tries: int = 8
    goal_bias: float = 0.1
    position_weight: float = 1.0
    velocity_weight: float = 0.3
    cost_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.node_budget < 1 or self.max_edge_steps < 1 or self.extend_tries < 1:
            raise ValueError("node_budget, max_edge_steps and extend_tries must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")


def collision_free(positions: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Per-row flag: position outside every ball ``(centers, radii)``."""
    positions = np.atleast_2d(positions)
    if centers.size == 0:
        return np.ones(positions.shape[0], dtype=bool)
    dist = np.linalg.norm(positions[:, None, :] - centers[None, :, :], axis=2)
    return np.all(dist >= radii[None, :], axis=1)


def metric_weights(model: SdeModel, cfg: PlannerConfig) -> np.ndarray:
    w = np.zeros(model.d_x)
    w[list(model.velocity_indices)] = cfg.velocity_weight
    w[list(model.position_indices)] = cfg.position_weight
    return w


def _edges(model: SdeModel, x: np.ndarray, u: np.ndarray, steps: int, dt: float) -> np.ndarray:
    """Euler paths from ``x`` under each row of ``u``, shape ``(k, steps, d_x)``."""
    cur = np.broadcast_to(x, (u.shape[0], x.size))
    out = np.empty((u.shape[0], steps, x.size))
    for i in range(steps):
        cur = euler_step(model, cur, u, dt)
        out[:, i] = cur
    return out


def ao_rrt(
    model: SdeModel,
    x0,
    goal: Callable[[np.ndarray], bool],
    dt: float,
    sample_low,
    sample_high,
    goal_state=None,
    obstacle_centers=None,
    obstacle_radii=None,
    collision_indices: Sequence[int] = (0, 1),
    cfg: PlannerConfig = PlannerConfig(),
    rng_seed: int = 0,
) -> PlannerResult:
    """Grow a cost-bounded RRT from ``x0`` until the node budget is spent.

    Args:
        model: Plant; only its drift and control box are used.
        x0: Start state.
        goal: Predicate on a state.
        dt: Planning step [s].
        sample_low, sample_high: State sampling box.
        goal_state: State sampled with probability ``cfg.goal_bias``.
        obstacle_centers, obstacle_radii: Inflated safety balls (radii
            already include the robot radius).
        collision_indices: State components compared with the ball centres.
        cfg: Planner settings.
        rng_seed: Seed of the sampling stream.

    Returns:
        The cheapest goal-reaching path found.

    Raises:
        PlannerFailure: If no path reached the goal.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(rng_seed)
    x0 = np.asarray(x0, dtype=float).reshape(model.d_x)
    lo = np.asarray(sample_low, dtype=float).reshape(model.d_x)
    hi = np.asarray(sample_high, dtype=float).reshape(model.d_x)
    ulo = np.asarray(model.control_lower, dtype=float)
    uhi = np.asarray(model.control_upper, dtype=float)
    if not (np.all(np.isfinite(ulo)) and np.all(np.isfinite(uhi))):
        raise ValueError("control box must be bounded for sampling")
    centers = np.zeros((0, len(collision_indices))) if obstacle_centers is None else np.atleast_2d(
        np.asarray(obstacle_centers, dtype=float)
    )
    radii = np.zeros(0) if obstacle_radii is None else np.asarray(obstacle_radii, dtype=float).reshape(-1)
    cidx = list(collision_indices)
    if not collision_free(x0[cidx], centers, radii)[0]:
        raise ValueError("start state collides with an obstacle")

    w = np.sqrt(metric_weights(model, cfg))
    states = np.empty((cfg.node_budget, model.d_x))
    costs = np.empty(cfg.node_budget)
    nodes: list[TreeNode] = [TreeNode(x0, -1, np.zeros(model.d_u), 0.0, 0.0, 0)]
    edge_paths: list[np.ndarray] = [np.zeros((0, model.d_x))]
    states[0], costs[0] = x0, 0.0
    best_cost, best_node = np.inf, -1
    solution_costs: list[float] = []

    attempts = 0
    while len(nodes) < cfg.node_budget and attempts < 20 * cfg.node_budget:
        attempts += 1
        n = len(nodes)
        if goal_state is not None and rng.random() < cfg.goal_bias:
            target = np.asarray(goal_state, dtype=float)
        else:
            target = lo + (hi - lo) * rng.random(model.d_x)
        if np.isfinite(best_cost):
            c_target = best_cost * rng.random()
            d = np.sum(((states[:n] - target) * w) ** 2, axis=1)
            d += (cfg.cost_weight * (costs[:n] - c_target) / best_cost) ** 2
        else:
            d = np.sum(((states[:n] - target) * w) ** 2, axis=1)
        near = int(np.argmin(d))
        parent = nodes[near]

        k = cfg.extend_tries
        u_try = ulo + (uhi - ulo) * rng.random((k, model.d_u))
        steps_try = rng.integers(1, cfg.max_edge_steps + 1, size=k)
        paths = _edges(model, parent.state, u_try, int(steps_try.max()), dt)
        best_try = None
        for j in range(k):
            path = paths[j, : steps_try[j]]
            if not np.all(np.isfinite(path)):
                continue
            if not np.all(collision_free(path[:, cidx], centers, radii)):
                continue
            cost = parent.cost_to_come + float(np.linalg.norm(u_try[j])) * int(steps_try[j]) * dt
            if cost >= best_cost:
                continue
            score = float(np.sum(((path[-1] - target) * w) ** 2))
            if best_try is None or score < best_try[0]:
                best_try = (score, u_try[j], int(steps_try[j]), path, cost)
        if best_try is None:
            continue
        _, u, steps, path, cost = best_try
        node = TreeNode(path[-1].copy(), near, u, steps * dt, cost, steps)
        nodes.append(node)
        edge_paths.append(path)
        states[n], costs[n] = node.state, cost
        if goal(node.state) and cost < best_cost:
            best_cost, best_node = cost, n
            solution_costs.append(cost)

    if best_node < 0:
        raise PlannerFailure(f"no goal connection within {cfg.node_budget} nodes")
    chain = []
    i = best_node
    while i > 0:
        chain.append(i)
        i = nodes[i].parent
    chain.reverse()
    seq_states = [x0[None, :]]
    seq_controls = []
    for i in chain:
        seq_states.append(edge_paths[i])
        seq_controls.append(np.repeat(nodes[i].edge_control[None, :], nodes[i].edge_steps, axis=0))
    states_out = np.concatenate(seq_states)
    controls_out = np.concatenate(seq_controls) if seq_controls else np.zeros((0, model.d_u))
    return PlannerResult(states_out, controls_out, states_out.shape[0], best_cost, solution_costs, nodes)


def resample_path(states: np.ndarray, controls: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Map a waypoint path onto ``horizon`` waypoints by linear time interpolation.

    States are interpolated on a uniform grid over the same duration; the
    controls take the value of the original step containing each new step.
    The result is only approximately consistent with the dynamics when the
    lengths differ; SCP absorbs the mismatch through its affine term.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    n_in = states.shape[0]
    if n_in == horizon:
        return states.copy(), controls.copy()
    s_old = np.linspace(0.0, 1.0, n_in)
    s_new = np.linspace(0.0, 1.0, horizon)
    out = np.stack([np.interp(s_new, s_old, states[:, i]) for i in range(states.shape[1])], axis=1)
    if controls.shape[0] == 0:
        return out, np.zeros((horizon - 1, controls.shape[1] if controls.ndim == 2 else 0))
    mid = (np.arange(horizon - 1) + 0.5) / (horizon - 1)
    pick = np.minimum((mid * controls.shape[0]).astype(int), controls.shape[0] - 1)
    return out, controls[pick].copy()


def straight_line(
    x0,
    xf,
    horizon: int,
    d_u: int,
    obstacle_centers=None,
    obstacle_radii=None,
    collision_indices: Sequence[int] = (0, 1),
) -> tuple[np.ndarray, np.ndarray]:
    """Linear state interpolation with zero controls.

    Raises:
        PlannerFailure: If an interpolated waypoint lies inside a safety ball.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    xf = np.asarray(xf, dtype=float).reshape(-1)
    s = np.linspace(0.0, 1.0, horizon)[:, None]
    states = (1.0 - s) * x0 + s * xf
    if obstacle_centers is not None and len(obstacle_centers):
        centers = np.atleast_2d(np.asarray(obstacle_centers, dtype=float))
        radii = np.asarray(obstacle_radii, dtype=float).reshape(-1)
        if not np.all(collision_free(states[:, list(collision_indices)], centers, radii)):
            raise PlannerFailure("straight line crosses an obstacle")
    return states, np.zeros((horizon - 1, d_u))
