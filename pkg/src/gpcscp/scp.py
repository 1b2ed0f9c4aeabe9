"""Sequential convex programming over projected gPC dynamics.

Each iteration linearizes the coefficient dynamics around the current
nominal, re-linearizes obstacle half-spaces at the nominal mean, and solves
one conic subproblem with quadratic trust regions on the state and control
change.  Radii shrink geometrically; an infeasible subproblem enlarges them
and the iteration is retried.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import conic
from .basis import HermiteBasis
from .constraints import (
    GpcQuadratic,
    LinearChance,
    Obstacle,
    TerminalSpec,
    allocate_risk,
    check_risk,
    stoch_obstacle_surrogate,
    to_gpc_soc,
)
from .projection import ProjectedDynamics, as_control_array, linearize_projected


class ScpStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class ScpConfig:
    """Trust-region schedule and solver settings.

    ``alpha_x`` and ``alpha_u`` are squared radii; iteration ``i`` uses
    ``alpha * beta**i``.
    """

    alpha_x: float = 10.0
    alpha_u: float = 2.0
    beta: float = 0.9
    expand_factor: float = 1.5
    max_iter: int = 30
    conv_tol: float = 1e-4
    terminal_slack_weight: float = 1e4
    max_retries: int = 6
    solver_tol: float = 1e-8
    solver_max_iter: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not self.expand_factor > 1.0:
            raise ValueError("expand_factor must exceed 1")
        if self.alpha_x < 0 or self.alpha_u < 0:
            raise ValueError("trust radii must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")


class MeanRow(NamedTuple):
    """Fixed linear row ``row @ X[step] + offset - relax * s <= 0``.

    ``s`` is a shared non-negative variable that only exists when the
    problem enables risk relaxation (``relax_weight > 0``).
    """

    step: int
    row: np.ndarray
    offset: float
    relax: float = 0.0


@dataclass(frozen=True)
class ScpProblem:
    """Discretized chance-constrained planning problem in gPC coordinates.

    Attributes:
        dynamics: Projected coefficient dynamics.
        horizon: Number of waypoints ``T`` (controls: ``T - 1``).
        dt: Step size [s].
        X0: Initial coefficient vector.
        q_running, q_terminal: Cost matrices on the coefficient vector; the
            running term is weighted by ``dt``.
        control_norm: Order of the control-effort norm (1, 2 or inf).
        control_weight: Multiplier on the effort term.
        obstacles: Obstacles converted to cone constraints at every step.
        eps_col: Joint collision risk per step, split evenly over obstacles.
        flavor: ``"dr"`` or ``"gaussian"`` tightening.
        r_rob: Robot radius [m].
        position_indices: State components that form the position.
        quadratics: ``(step, GpcQuadratic)`` pairs.
        mean_rows: Fixed linear rows on the coefficient vector.
        terminal: Terminal mean / variance specification.
    """

    dynamics: ProjectedDynamics
    horizon: int
    dt: float
    X0: np.ndarray
    q_running: Optional[np.ndarray] = None
    q_terminal: Optional[np.ndarray] = None
    control_norm: float = 2
    control_weight: float = 1.0
    obstacles: tuple = ()
    eps_col: float = 0.05
    flavor: str = "dr"
    r_rob: float = 0.0
    position_indices: tuple = (0, 1)
    quadratics: tuple = ()
    mean_rows: tuple = ()
    terminal: Optional[TerminalSpec] = None
    relax_weight: float = 0.0
    relax_cap: float = 0.0

    def __post_init__(self) -> None:
        if int(self.horizon) < 2:
            raise ValueError("horizon must be at least 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        X0 = np.asarray(self.X0, dtype=float).reshape(-1)
        if X0.size != self.dynamics.n_state:
            raise ValueError(f"X0 has {X0.size} entries, expected {self.dynamics.n_state}")
        object.__setattr__(self, "X0", X0)
        if self.control_norm not in (1, 2, np.inf):
            raise ValueError("control_norm must be 1, 2 or inf")
        if self.flavor not in ("dr", "gaussian"):
            raise ValueError("flavor must be 'dr' or 'gaussian'")
        if self.obstacles:
            check_risk(self.eps_col, "eps_col")
        n = self.dynamics.n_state
        for name in ("q_running", "q_terminal"):
            q = getattr(self, name)
            if q is not None and np.shape(q) != (n, n):
                raise ValueError(f"{name} must have shape ({n}, {n})")

    @property
    def basis(self) -> HermiteBasis:
        return self.dynamics.basis

    @property
    def n_state(self) -> int:
        return self.dynamics.n_state

    @property
    def d_u(self) -> int:
        return self.dynamics.d_u


@dataclass
class ScpResult:
    gpc_trajectory: np.ndarray
    controls: np.ndarray
    iteration_log: list = field(default_factory=list)
    status: ScpStatus = ScpStatus.MAX_ITERATIONS
    cost: float = float("nan")
    slack: float = 0.0
    last_nominal: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status == ScpStatus.CONVERGED


def _psd_root(q: np.ndarray) -> np.ndarray:
    """``R`` with ``R^T R = q`` (rank-revealing)."""
    q = 0.5 * (np.asarray(q, dtype=float) + np.asarray(q, dtype=float).T)
    w, v = np.linalg.eigh(q)
    top = max(1.0, np.abs(w).max()) if w.size else 1.0
    if w.size and w.min() < -1e-10 * top:
        raise ValueError("cost matrix must be positive semidefinite")
    keep = w > 1e-14 * top
    return (v[:, keep] * np.sqrt(w[keep])).T


def _away_from_center(pos: np.ndarray, center: np.ndarray) -> np.ndarray:
    if np.linalg.norm(pos - center) > 1e-9:
        return pos
    return center + np.r_[1e-6, np.zeros(pos.size - 1)]


def collision_cones(prob: ScpProblem, X_nom: np.ndarray) -> list[tuple[int, object]]:
    """Cone constraints ``(step, SocGpcConstraint)`` linearized at ``X_nom``."""
    if not prob.obstacles:
        return []
    basis = prob.basis
    L = basis.n_terms
    d_x = prob.dynamics.d_x
    pos = list(prob.position_indices)
    risks = allocate_risk(prob.eps_col, len(prob.obstacles))
    out = []
    for k in range(1, prob.horizon):
        mean = X_nom[k].reshape(d_x, L)[:, 0]
        for obs, eps in zip(prob.obstacles, risks):
            p_nom = _away_from_center(mean[pos], obs.center_mean)
            sur = stoch_obstacle_surrogate(p_nom, obs, prob.r_rob, eps, bound=prob.flavor)
            lc = LinearChance(sur.halfspace.lift(pos, d_x), sur.halfspace.b, eps)
            out.append((k, to_gpc_soc(lc, basis, prob.flavor, sur.extra_variance())))
    return out


def build_subproblem(
    prob: ScpProblem,
    nominal: tuple[np.ndarray, np.ndarray],
    trust: tuple[float, float],
) -> conic.ConeProgram:
    """Assemble the convex subproblem around ``nominal``.

    Args:
        prob: Problem data.
        nominal: ``(X_nom (T, n), u_nom (T-1, d_u))``.
        trust: Squared radii ``(rx, ru)``; zero pins the variables to the nominal.

    Returns:
        A cone program whose ``meta`` dict holds the variable layout under
        ``"x_idx"``, ``"u_idx"`` and ``"slack_idx"``.
    """
    T, n, d_u, dt = prob.horizon, prob.n_state, prob.d_u, prob.dt
    X_nom = np.asarray(nominal[0], dtype=float)
    u_nom = as_control_array(nominal[1], d_u) if d_u else np.zeros((T - 1, 0))
    if X_nom.shape != (T, n):
        raise ValueError(f"nominal states have shape {X_nom.shape}, expected {(T, n)}")
    if u_nom.shape != (T - 1, d_u):
        raise ValueError(f"nominal controls have shape {u_nom.shape}, expected {(T - 1, d_u)}")
    rx, ru = (float(r) for r in trust)
    if rx < 0 or ru < 0:
        raise ValueError("trust radii must be non-negative")

    bld = conic.ProgramBuilder()
    x_idx = bld.add_variables(T * n).reshape(T, n)
    u_idx = bld.add_variables((T - 1) * d_u).reshape(T - 1, d_u)
    eye_n = np.eye(n)

    bld.add_equality(eye_n, x_idx[0], prob.X0)
    for k in range(T - 1):
        a, b, z = linearize_projected(prob.dynamics, X_nom[k], u_nom[k], dt)
        terms = [(eye_n, x_idx[k + 1]), (-(eye_n + a), x_idx[k])]
        if d_u:
            terms.append((-b, u_idx[k]))
        bld.add_equality_terms(terms, z)

    # trust regions
    for k in range(1, T):
        if rx == 0.0:
            bld.add_equality(eye_n, x_idx[k], X_nom[k])
        else:
            _add_ball(bld, x_idx[k], X_nom[k], np.sqrt(rx))
    if d_u:
        eye_u = np.eye(d_u)
        for k in range(T - 1):
            if ru == 0.0:
                bld.add_equality(eye_u, u_idx[k], u_nom[k])
            else:
                _add_ball(bld, u_idx[k], u_nom[k], np.sqrt(ru))

    # control box and effort
    if d_u:
        lo = np.asarray(prob.dynamics.model.control_lower, dtype=float)
        hi = np.asarray(prob.dynamics.model.control_upper, dtype=float)
        for k in range(T - 1):
            fin_hi = np.isfinite(hi)
            if fin_hi.any():
                bld.add_nonneg(np.eye(d_u)[fin_hi], u_idx[k], hi[fin_hi])
            fin_lo = np.isfinite(lo)
            if fin_lo.any():
                bld.add_nonneg(-np.eye(d_u)[fin_lo], u_idx[k], -lo[fin_lo])
        _add_effort(bld, prob, u_idx)

    # quadratic state cost
    for k, q, w in _state_cost_terms(prob):
        conic.epigraph_soc(bld, _psd_root(q), x_idx[k], weight=w, rotated=True)

    for k, cons in collision_cones(prob, X_nom):
        _add_soc_chance(bld, x_idx[k], cons)
    for k, quad in prob.quadratics:
        _add_quadratic(bld, x_idx[k], quad)
    relax_idx = None
    if prob.relax_weight > 0 and any(r.relax > 0 for r in prob.mean_rows):
        relax_idx = int(bld.add_variables(1)[0])
        bld.add_cost(relax_idx, prob.relax_weight)
        bld.add_nonneg([[-1.0], [1.0]], [relax_idx], [0.0, prob.relax_cap])
    for row in prob.mean_rows:
        vec = np.asarray(row.row, dtype=float)[None, :]
        if relax_idx is not None and row.relax > 0:
            bld.add_nonneg(
                np.hstack([vec, [[-row.relax]]]), np.r_[x_idx[row.step], relax_idx], [-row.offset]
            )
        else:
            bld.add_nonneg(vec, x_idx[row.step], [-row.offset])

    slack_idx = None
    term = prob.terminal
    if term is not None:
        bld.add_equality(term.eq_rows, x_idx[T - 1], term.eq_rhs)
        if term.factor is not None:
            slack_idx = int(bld.add_variables(1)[0])
            bld.add_cost(slack_idx, term.slack_weight)
            bld.add_nonneg([[-1.0]], [slack_idx], [0.0])
            F = np.atleast_2d(term.factor)
            m = F.shape[0]
            g_slack = np.zeros((m + 2, 1))
            g_slack[0, 0] = -1.0
            g_slack[m + 1, 0] = -1.0
            g_x = np.zeros((m + 2, n))
            g_x[1 : m + 1] = -2.0 * F
            rhs = np.zeros(m + 2)
            rhs[0] = term.bound + 1.0
            rhs[m + 1] = term.bound - 1.0
            bld.add_soc_terms([(g_slack, [slack_idx]), (g_x, x_idx[T - 1])], rhs)

    prog = bld.build()
    prog.meta.update(x_idx=x_idx, u_idx=u_idx, slack_idx=slack_idx, relax_idx=relax_idx)
    return prog


def _add_ball(bld: conic.ProgramBuilder, idx: np.ndarray, center: np.ndarray, radius: float) -> None:
    m = idx.size
    g = np.zeros((m + 1, m))
    g[1:] = -np.eye(m)
    rhs = np.concatenate([[radius], -center])
    bld.add_soc_terms([(g, idx)], rhs)


def _add_effort(bld: conic.ProgramBuilder, prob: ScpProblem, u_idx: np.ndarray) -> None:
    w = prob.control_weight * prob.dt
    d_u = u_idx.shape[1]
    eye = np.eye(d_u)
    for k in range(u_idx.shape[0]):
        if prob.control_norm == 2:
            conic.epigraph_soc(bld, eye, u_idx[k], weight=w)
        elif prob.control_norm == 1:
            v = bld.add_variables(d_u)
            bld.add_cost(v, w)
            bld.add_nonneg(np.hstack([eye, -eye]), np.r_[u_idx[k], v], np.zeros(d_u))
            bld.add_nonneg(np.hstack([-eye, -eye]), np.r_[u_idx[k], v], np.zeros(d_u))
        else:
            t = bld.add_variables(1)
            bld.add_cost(t, w)
            ones = np.ones((d_u, 1))
            bld.add_nonneg(np.hstack([eye, -ones]), np.r_[u_idx[k], t], np.zeros(d_u))
            bld.add_nonneg(np.hstack([-eye, -ones]), np.r_[u_idx[k], t], np.zeros(d_u))


def _state_cost_terms(prob: ScpProblem) -> list[tuple[int, np.ndarray, float]]:
    terms = []
    if prob.q_running is not None and np.any(prob.q_running):
        terms.extend((k, prob.q_running, prob.dt) for k in range(prob.horizon - 1))
    if prob.q_terminal is not None and np.any(prob.q_terminal):
        terms.append((prob.horizon - 1, prob.q_terminal, 1.0))
    return terms


def _add_soc_chance(bld: conic.ProgramBuilder, idx: np.ndarray, cons) -> None:
    """``lin X + offset + scale ||[C X; const]|| <= 0`` as a cone block."""
    keep = np.any(cons.cone_matrix != 0, axis=1)
    cm = cons.cone_matrix[keep]
    if cons.scale == 0.0 or (cm.shape[0] == 0 and cons.const.size == 0):
        bld.add_nonneg(cons.lin_row[None, :], idx, [-cons.offset])
        return
    if cm.shape[0] == 0:
        # deterministic robot: the cone collapses to a constant tightening
        bld.add_nonneg(
            cons.lin_row[None, :], idx, [-cons.offset - cons.scale * float(np.linalg.norm(cons.const))]
        )
        return
    k = cm.shape[0] + cons.const.size
    g = np.zeros((k + 1, idx.size))
    g[0] = cons.lin_row
    g[1 : cm.shape[0] + 1] = -cons.scale * cm
    rhs = np.zeros(k + 1)
    rhs[0] = -cons.offset
    rhs[cm.shape[0] + 1 :] = cons.scale * cons.const
    bld.add_soc_terms([(g, idx)], rhs)


def _add_quadratic(bld: conic.ProgramBuilder, idx: np.ndarray, quad: GpcQuadratic) -> None:
    keep = quad.weights > 0
    if not keep.any():
        if quad.bound < 0:
            bld.add_nonneg(np.zeros((1, idx.size)), idx, [quad.bound])
        return
    root = np.sqrt(quad.weights[keep])
    g = np.zeros((keep.sum() + 1, idx.size))
    g[1:, np.flatnonzero(keep)] = -np.diag(root)
    rhs = np.zeros(keep.sum() + 1)
    rhs[0] = np.sqrt(max(quad.bound, 0.0))
    bld.add_soc_terms([(g, idx)], rhs)


def evaluate_cost(prob: ScpProblem, X: np.ndarray, u: np.ndarray) -> float:
    """Objective without the terminal-slack penalty."""
    total = 0.0
    if prob.d_u:
        u = as_control_array(u, prob.d_u)
        norms = np.linalg.norm(u, ord=prob.control_norm, axis=1)
        total += prob.control_weight * prob.dt * float(norms.sum())
    for k, q, w in _state_cost_terms(prob):
        total += w * float(X[k] @ q @ X[k])
    return total


def solve_subproblem(
    prob: ScpProblem,
    nominal: tuple[np.ndarray, np.ndarray],
    trust: tuple[float, float],
    cfg: ScpConfig = ScpConfig(),
) -> tuple[conic.ConeSolution, Optional[np.ndarray], Optional[np.ndarray], float]:
    """Build and solve one subproblem; returns ``(solution, X, u, slack)``."""
    prog = build_subproblem(prob, nominal, trust)
    sol = conic.solve(prog, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
    if not _acceptable(sol, cfg):
        return sol, None, None, 0.0
    x = sol.primal
    X = x[prog.meta["x_idx"]]
    u = x[prog.meta["u_idx"]]
    slack_idx = prog.meta["slack_idx"]
    slack = float(max(x[slack_idx], 0.0)) if slack_idx is not None else 0.0
    return sol, X, u, slack


def _acceptable(sol: conic.ConeSolution, cfg: ScpConfig) -> bool:
    if not np.all(np.isfinite(sol.primal)):
        return False
    if sol.status == conic.Status.OPTIMAL:
        return True
    # accept a stalled solve that is already accurate to a looser tolerance
    loose = max(1e3 * cfg.solver_tol, 1e-6)
    return (
        sol.status == conic.Status.MAX_ITERATIONS
        and sol.primal_residual <= loose
        and sol.dual_residual <= loose
        and sol.gap <= loose * max(1.0, abs(sol.primal_objective))
    )


def solve_scp(
    prob: ScpProblem,
    initial_nominal: tuple[np.ndarray, np.ndarray],
    cfg: ScpConfig = ScpConfig(),
    callback: Optional[Callable[[dict], None]] = None,
) -> ScpResult:
    """Run trust-region SCP from ``initial_nominal``.

    Args:
        prob: Problem data.
        initial_nominal: ``(X (T, n), u (T-1, d_u))``, typically the gPC
            propagation of a planner's controls.
        cfg: Schedule and solver settings.
        callback: Receives every iteration record as it is produced.

    Returns:
        The last accepted iterate with its status and iteration log.
    """
    X_nom = np.array(initial_nominal[0], dtype=float)
    u_nom = as_control_array(initial_nominal[1], prob.d_u).copy() if prob.d_u else np.zeros((prob.horizon - 1, 0))
    result = ScpResult(gpc_trajectory=X_nom, controls=u_nom)
    scale = 1.0
    for it in range(1, cfg.max_iter + 1):
        accepted = False
        for attempt in range(cfg.max_retries + 1):
            rx = cfg.alpha_x * cfg.beta**it * scale
            ru = cfg.alpha_u * cfg.beta**it * scale
            sol, X, u, slack = solve_subproblem(prob, (X_nom, u_nom), (rx, ru), cfg)
            record = {
                "iteration": it,
                "attempt": attempt,
                "radius_x": rx,
                "radius_u": ru,
                "solver_status": sol.status.value,
                "solver_iterations": sol.iterations,
            }
            if X is None:
                record.update(cost=float("nan"), step=float("nan"), slack=float("nan"))
                result.iteration_log.append(record)
                if callback:
                    callback(record)
                scale *= cfg.expand_factor
                continue
            step = float(np.max(np.linalg.norm(X - X_nom, axis=1)))
            cost = evaluate_cost(prob, X, u)
            record.update(cost=cost, step=step, slack=slack)
            result.iteration_log.append(record)
            if callback:
                callback(record)
            result.last_nominal = X_nom
            X_nom, u_nom = X, u
            result.gpc_trajectory, result.controls = X, u
            result.cost, result.slack = cost, slack
            accepted = True
            break
        if not accepted:
            result.status = ScpStatus.INFEASIBLE
            return result
        if step <= cfg.conv_tol:
            result.status = ScpStatus.CONVERGED
            return result
    result.status = ScpStatus.MAX_ITERATIONS
    return result
