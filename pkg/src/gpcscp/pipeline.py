"""End-to-end planning: sampling-based seed, gPC nominal, then SCP or PC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import HermiteBasis, build_basis, default_rule
from .constraints import terminal_constraints
from .mc import Plan, TrackingGains, ValidationSetup
from .models import SdeModel
from .pc import PcConfig, PcProblem, correction_margins, solve_pc
from .planner import PlannerConfig, PlannerFailure, ao_rrt, resample_path, straight_line
from .projection import (
    GpcDivergenceError,
    ProjectedDynamics,
    moments_from_gpc,
    project_cost_matrix,
    project_dynamics,
    project_initial,
    propagate_gpc,
)
from .scenario import Scenario
from .scp import ScpProblem, collision_cones, solve_scp


@dataclass
class GpcSetup:
    model: SdeModel
    basis: HermiteBasis
    dynamics: ProjectedDynamics
    X0: np.ndarray


@dataclass
class Seed:
    """Initial guess: mean states ``(T, d_x)``, controls ``(T-1, d_u)``."""

    states: np.ndarray
    controls: np.ndarray
    source: str
    planner_cost: Optional[float] = None


@dataclass
class PlanOutcome:
    status: str
    cost: float
    method: str
    flavor: str
    eps_col: float
    p_gpc: int
    basis: HermiteBasis
    gpc_trajectory: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    controls: np.ndarray
    iteration_log: list = field(default_factory=list)
    max_collision_margin: Optional[float] = None
    terminal_slack: float = 0.0
    seed_source: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "Converged"

    @property
    def iterations(self) -> int:
        return max((r["iteration"] for r in self.iteration_log), default=0)

    def plan(self) -> Plan:
        return Plan(self.gpc_trajectory, self.controls, self.basis)


def gpc_setup(sc: Scenario, p_gpc: Optional[int] = None) -> GpcSetup:
    """Plant, basis, projected dynamics and initial coefficients."""
    model = sc.build_model()
    gm = sc.germ_map()
    basis = build_basis(sc.p_gpc if p_gpc is None else int(p_gpc), gm.d_xi)
    pd = project_dynamics(model, basis, default_rule(basis), gm)
    X0 = project_initial(np.array(sc.x0_mean), np.array(sc.x0_stdev), basis, gm)
    return GpcSetup(model, basis, pd, X0)


def _goal_test(sc: Scenario, model: SdeModel) -> Callable[[np.ndarray], bool]:
    goal = np.array(sc.terminal.mean)
    pos = list(sc.collision_indices)
    vel = [v for v, p in zip(model.velocity_indices, model.position_indices) if p in pos]
    ptol, vtol = sc.planner.goal_position_tol, sc.planner.goal_velocity_tol

    def test(x: np.ndarray) -> bool:
        ok = np.linalg.norm(x[pos] - goal[pos]) <= ptol
        return bool(ok and (not vel or np.linalg.norm(x[vel] - goal[vel]) <= vtol))

    return test


def seed_trajectory(sc: Scenario, model: SdeModel, seed: int = 0) -> Seed:
    """Planner path resampled to the horizon, or a straight line if none is found."""
    centers = np.array([o.center for o in sc.obstacles]).reshape(-1, len(sc.collision_indices))
    radii = np.array([o.radius + sc.r_rob for o in sc.obstacles])
    x0, xf = np.array(sc.x0_mean), np.array(sc.terminal.mean)
    if sc.planner.enabled and model.d_u:
        cfg = PlannerConfig(node_budget=sc.planner.node_budget, max_edge_steps=sc.planner.max_edge_steps)
        try:
            res = ao_rrt(
                model, x0, _goal_test(sc, model), sc.dt, sc.planner.sample_low, sc.planner.sample_high,
                goal_state=xf, obstacle_centers=centers, obstacle_radii=radii,
                collision_indices=sc.collision_indices, cfg=cfg, rng_seed=seed,
            )
            states, controls = resample_path(res.states, res.controls, sc.horizon)
            return Seed(states, controls, "planner", float(res.cost))
        except PlannerFailure:
            pass
    states, controls = straight_line(x0, xf, sc.horizon, model.d_u)
    return Seed(states, controls, "straight_line")


def gpc_nominal(setup: GpcSetup, seed: Seed, dt: float) -> np.ndarray:
    """Coefficients propagated under the seed controls, means replaced by the seed states."""
    pd = setup.dynamics
    T = seed.states.shape[0]
    try:
        X = propagate_gpc(pd, setup.X0, seed.controls, dt)
    except GpcDivergenceError:
        X = np.tile(setup.X0, (T, 1))
    X.reshape(T, pd.d_x, -1)[:, :, 0] = seed.states
    return X


def _diag(v: Optional[tuple]) -> Optional[np.ndarray]:
    return None if v is None else np.diag(np.array(v, dtype=float))


def scp_problem(sc: Scenario, setup: GpcSetup, eps_col: float, flavor: str) -> ScpProblem:
    basis = setup.basis
    q_run, q_term = _diag(sc.cost.q_running), _diag(sc.cost.q_terminal)
    t = sc.terminal
    term = terminal_constraints(
        np.array(t.mean), np.array(t.q_xf), t.c_f, t.eps_f, basis, t.kind, sc.scp.terminal_slack_weight
    )
    return ScpProblem(
        dynamics=setup.dynamics,
        horizon=sc.horizon,
        dt=sc.dt,
        X0=setup.X0,
        q_running=None if q_run is None else project_cost_matrix(q_run, basis),
        q_terminal=None if q_term is None else project_cost_matrix(q_term, basis),
        control_norm=sc.cost.control_norm,
        control_weight=sc.cost.control_weight,
        obstacles=sc.obstacle_list(),
        eps_col=eps_col,
        flavor=flavor,
        r_rob=sc.r_rob,
        position_indices=sc.collision_indices,
        terminal=term,
    )


def pc_problem(sc: Scenario, setup: GpcSetup, eps_col: float, flavor: str) -> PcProblem:
    return PcProblem(
        dynamics=setup.dynamics,
        X0=setup.X0,
        horizon=sc.horizon,
        dt=sc.dt,
        goal_mean=np.array(sc.terminal.mean),
        q_running=_diag(sc.cost.q_running),
        q_terminal=_diag(sc.cost.q_terminal),
        obstacles=sc.obstacle_list(),
        r_rob=sc.r_rob,
        eps_col=eps_col,
        flavor=flavor,
        position_indices=sc.collision_indices,
        control_norm=sc.cost.control_norm,
    )


def scp_collision_margin(prob: ScpProblem, X: np.ndarray, X_lin: Optional[np.ndarray] = None) -> Optional[float]:
    """Largest collision-constraint value at ``X``; ``<= 0`` is safe.

    The half-spaces are taken at ``X_lin`` (default ``X``).  Passing the
    nominal of the final subproblem evaluates exactly the constraints that
    subproblem enforced; each is a supporting half-space of its safety ball,
    so a non-positive value certifies the plan against the true ball.
    """
    cones = collision_cones(prob, X if X_lin is None else X_lin)
    if not cones:
        return None
    return max(cons.margin(X[k]) for k, cons in cones)


def run_plan(
    sc: Scenario,
    seed: int = 0,
    method: Optional[str] = None,
    p_gpc: Optional[int] = None,
    flavor: Optional[str] = None,
    eps_col: Optional[float] = None,
    initial: Optional[Seed] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> PlanOutcome:
    """Seed, build and solve the scenario's planning problem.

    Keyword overrides replace the matching scenario fields; ``initial``
    reuses a previously computed seed (sweeps share one seed so that the
    only difference between cells is the swept parameter).
    """
    method = method or sc.method
    flavor = flavor or sc.flavor
    eps_col = sc.eps_col if eps_col is None else float(eps_col)
    setup = gpc_setup(sc, p_gpc)
    if not setup.model.d_u:
        raise ValueError(f"model '{sc.model}' has no controls to plan")
    init = initial if initial is not None else seed_trajectory(sc, setup.model, seed)

    if method == "gpc-scp":
        prob = scp_problem(sc, setup, eps_col, flavor)
        res = solve_scp(prob, (gpc_nominal(setup, init, sc.dt), init.controls), sc.scp, callback)
        X = res.gpc_trajectory
        means, cov = moments_from_gpc(X, setup.basis)
        margin = scp_collision_margin(prob, X, res.last_nominal)
        controls, log, status, cost, slack = res.controls, res.iteration_log, res.status, res.cost, res.slack
    elif method == "gpc-scp-pc":
        prob = pc_problem(sc, setup, eps_col, flavor)
        res = solve_pc(prob, (init.states, init.controls), PcConfig(scp=sc.scp), callback)
        X = res.gpc_trajectory
        means = res.means
        _, cov = moments_from_gpc(X, setup.basis)
        margins = correction_margins(res, prob)
        margin = float(margins.max()) if margins.size else None
        controls, log, status, cost, slack = res.controls, res.iteration_log, res.status, res.cost, 0.0
    else:
        raise ValueError(f"unknown method '{method}'")
    stds = np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0))
    return PlanOutcome(
        status=status.value,
        cost=float(cost),
        method=method,
        flavor=flavor,
        eps_col=eps_col,
        p_gpc=setup.basis.p_gpc,
        basis=setup.basis,
        gpc_trajectory=np.asarray(X),
        means=np.asarray(means),
        stds=stds,
        controls=np.asarray(controls),
        iteration_log=list(log),
        max_collision_margin=None if margin is None else float(margin),
        terminal_slack=float(slack),
        seed_source=init.source,
    )


def validation_setup(sc: Scenario, model: Optional[SdeModel] = None) -> ValidationSetup:
    model = model or sc.build_model()
    v = sc.validation
    return ValidationSetup(
        model=model,
        dt=sc.dt,
        obstacles=sc.obstacle_list(),
        r_rob=sc.r_rob,
        collision_indices=sc.collision_indices,
        goal_mean=np.array(sc.terminal.mean),
        q_terminal=np.array(sc.terminal.q_xf),
        c_terminal=sc.terminal.c_f,
        gains=TrackingGains(v.kp, v.kd),
        substeps=v.substeps,
        reference=v.reference,
    )
