"""Predictor-corrector planning: gPC prediction, mean-only correction.

The predictor propagates the full coefficient dynamics under the current
controls and evaluates, for every obstacle half-space, the predicted
variance ``a^T Sigma a`` along its normal.  The corrector then solves a
planning problem over the mean state only, where that variance enters each
half-space as a constant offset, so every collision row is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .basis import build_basis, gauss_hermite
from .constraints import (
    Obstacle,
    allocate_risk,
    check_risk,
    det_obstacle_halfspace,
    terminal_constraints,
    tightening,
)
from .models import SdeModel
from .projection import (
    GermMap,
    ProjectedDynamics,
    moments_from_gpc,
    project_dynamics,
    propagate_gpc,
)
from .scp import MeanRow, ScpConfig, ScpProblem, ScpStatus, evaluate_cost, solve_subproblem


class CorrectionTerm(NamedTuple):
    """Predicted variance along each half-space normal, shape ``(T, J)``."""

    values: np.ndarray


class HalfSpaceRows(NamedTuple):
    """Per-step, per-obstacle position half-spaces ``a^T p + b <= 0``.

    ``normals`` has shape ``(T, J, n_pos)`` and ``offsets`` ``(T, J)``; step
    0 is filled but never constrained.
    """

    normals: np.ndarray
    offsets: np.ndarray


def mean_dynamics(model: SdeModel) -> ProjectedDynamics:
    """Projection onto the constant polynomial only: ``mu' = f(mu, u)``."""
    gm = GermMap.build(model.d_w)
    basis = build_basis(0, gm.d_xi)
    return project_dynamics(model, basis, gauss_hermite(1, gm.d_xi), gm)


def halfspace_rows(
    means: np.ndarray,
    obstacles: Sequence[Obstacle],
    r_rob: float,
    position_indices: Sequence[int],
) -> HalfSpaceRows:
    """Supporting half-spaces of every safety ball at every mean waypoint."""
    T = means.shape[0]
    pos = np.asarray(means, dtype=float)[:, list(position_indices)]
    J = len(obstacles)
    normals = np.zeros((T, J, pos.shape[1]))
    offsets = np.zeros((T, J))
    for k in range(T):
        for j, obs in enumerate(obstacles):
            p = pos[k]
            if np.linalg.norm(p - obs.center_mean) <= 1e-9:
                p = obs.center_mean + np.r_[1e-6, np.zeros(p.size - 1)]
            hs = det_obstacle_halfspace(p, obs, r_rob)
            normals[k, j], offsets[k, j] = hs.a, hs.b
    return HalfSpaceRows(normals, offsets)


def predict(
    pd: ProjectedDynamics,
    controls,
    X0,
    rows: HalfSpaceRows,
    dt: float,
    position_indices: Sequence[int] = (0, 1),
) -> tuple[np.ndarray, CorrectionTerm]:
    """Propagate the coefficients and evaluate ``b_c = a^T Sigma_pos a``.

    Returns:
        ``(X, b_c)`` with ``X`` of shape ``(T, n)``.
    """
    X = propagate_gpc(pd, X0, controls, dt)
    _, cov = moments_from_gpc(X, pd.basis)
    idx = list(position_indices)
    cov_pos = cov[:, idx][:, :, idx]
    if rows.normals.shape[0] != X.shape[0]:
        raise ValueError("half-space rows do not match the horizon")
    bc = np.einsum("kji,kil,kjl->kj", rows.normals, cov_pos, rows.normals)
    return X, CorrectionTerm(np.maximum(bc, 0.0))


@dataclass(frozen=True)
class PcProblem:
    """Inputs of the predictor-corrector loop.

    Attributes:
        dynamics: Full projected dynamics used by the predictor.
        X0: Initial coefficient vector of the full expansion.
        horizon, dt: Discretization.
        goal_mean: Required terminal mean.
        q_running, q_terminal: State cost matrices on the mean (``d_x`` square).
        obstacles, r_rob, eps_col, flavor: Collision constraint data.
        position_indices: Position components of the state.
        control_norm: Effort norm order.
        risk_variable: Let the solver trade tightening for a penalty.
        risk_penalty: Weight of that penalty.
    """

    dynamics: ProjectedDynamics
    X0: np.ndarray
    horizon: int
    dt: float
    goal_mean: np.ndarray
    q_running: Optional[np.ndarray] = None
    q_terminal: Optional[np.ndarray] = None
    obstacles: tuple = ()
    r_rob: float = 0.0
    eps_col: float = 0.05
    flavor: str = "dr"
    position_indices: tuple = (0, 1)
    control_norm: float = 2
    risk_variable: bool = False
    risk_penalty: float = 1e3


@dataclass(frozen=True)
class PcConfig:
    max_iter: int = 30
    conv_tol: float = 1e-3
    max_backtracks: int = 4
    scp: ScpConfig = ScpConfig()


@dataclass
class PcResult:
    means: np.ndarray
    controls: np.ndarray
    gpc_trajectory: np.ndarray
    iteration_log: list = field(default_factory=list)
    status: ScpStatus = ScpStatus.MAX_ITERATIONS
    cost: float = float("nan")
    correction: Optional[CorrectionTerm] = None
    rows: Optional[HalfSpaceRows] = None


def build_correction_problem(
    mean_pd: ProjectedDynamics,
    correction: CorrectionTerm,
    rows: HalfSpaceRows,
    prob: PcProblem,
) -> ScpProblem:
    """Mean-only planning problem with variance-tightened linear rows.

    Each collision row reads
    ``a^T mu + b + kappa(eps) sqrt(b_c + a^T Sigma_p a) <= 0``,
    where ``b`` already contains ``-a^T mu_p``.
    """
    if mean_pd.basis.n_terms != 1:
        raise ValueError("the correction problem needs a mean-only projection")
    d_x = mean_pd.d_x
    T = prob.horizon
    pos = list(prob.position_indices)
    mean_rows = []
    kappa = 0.0
    if prob.obstacles:
        risks = allocate_risk(check_risk(prob.eps_col, "eps_col"), len(prob.obstacles))
        for k in range(1, T):
            for j, (obs, eps) in enumerate(zip(prob.obstacles, risks)):
                a = rows.normals[k, j]
                kappa = tightening(eps, prob.flavor)
                spread = float(np.sqrt(correction.values[k, j] + a @ obs.center_cov @ a))
                lifted = np.zeros(d_x)
                lifted[pos] = a
                relax = spread if prob.risk_variable else 0.0
                mean_rows.append(MeanRow(k, lifted, float(rows.offsets[k, j] + kappa * spread), relax))
    mean0 = np.asarray(prob.X0, dtype=float).reshape(d_x, -1)[:, 0]
    term = terminal_constraints(prob.goal_mean, np.eye(d_x), 1.0, 1.0, mean_pd.basis, "none")
    return ScpProblem(
        dynamics=mean_pd,
        horizon=T,
        dt=prob.dt,
        X0=mean0,
        q_running=prob.q_running,
        q_terminal=prob.q_terminal,
        control_norm=prob.control_norm,
        mean_rows=tuple(mean_rows),
        terminal=term,
        relax_weight=prob.risk_penalty if prob.risk_variable else 0.0,
        relax_cap=kappa,
        position_indices=prob.position_indices,
    )


def solve_pc(
    prob: PcProblem,
    nominal: tuple[np.ndarray, np.ndarray],
    cfg: PcConfig = PcConfig(),
    callback: Optional[Callable[[dict], None]] = None,
) -> PcResult:
    """Alternate prediction and correction until the mean settles.

    Every outer iteration runs one prediction and one trust-region
    correction subproblem; radii follow the same geometric schedule as
    :func:`~gpcscp.scp.solve_scp` and grow on infeasibility.  The variance
    seen by the corrector lags one iterate behind, so an unconverged iterate
    can predict a spread no mean trajectory accommodates.  The correction is
    then retried with ``b_c`` scaled by ``1/2, 1/4, ...`` and finally ``0``
    (``cfg.max_backtracks`` reductions in total); the trust region is only
    enlarged when even the uncorrected problem is infeasible.  Convergence
    is only declared on an iteration that used the full correction.

    Args:
        prob: Problem data.
        nominal: ``(mean states (T, d_x), controls (T-1, d_u))``.
        cfg: Outer tolerance and trust-region settings.
        callback: Receives every iteration record.
    """
    mean_pd = mean_dynamics(prob.dynamics.model)
    means = np.asarray(nominal[0], dtype=float).copy()
    controls = np.asarray(nominal[1], dtype=float).copy()
    pos = list(prob.position_indices)
    sc = cfg.scp
    result = PcResult(means, controls, np.zeros((prob.horizon, prob.dynamics.n_state)))
    weights = [0.5**j for j in range(cfg.max_backtracks)] + [0.0]
    scale = 1.0
    for it in range(1, cfg.max_iter + 1):
        rows = halfspace_rows(means, prob.obstacles, prob.r_rob, pos)
        _, bc_full = predict(prob.dynamics, controls, prob.X0, rows, prob.dt, pos)
        accepted = False
        for attempt in range(sc.max_retries + 1):
            rx = sc.alpha_x * sc.beta**it * scale
            ru = sc.alpha_u * sc.beta**it * scale
            for weight in weights:
                bc = CorrectionTerm(weight * bc_full.values)
                sub = build_correction_problem(mean_pd, bc, rows, prob)
                sol, mu, u, _ = solve_subproblem(sub, (means, controls), (rx, ru), sc)
                record = {
                    "iteration": it,
                    "attempt": attempt,
                    "radius_x": rx,
                    "radius_u": ru,
                    "solver_status": sol.status.value,
                    "solver_iterations": sol.iterations,
                    "max_correction": float(np.sqrt(bc.values.max())) if bc.values.size else 0.0,
                    "correction_weight": weight,
                }
                if mu is not None:
                    accepted = True
                    break
                record.update(cost=float("nan"), step=float("nan"))
                result.iteration_log.append(record)
                if callback:
                    callback(record)
            if accepted:
                break
            # even the uncorrected problem failed: the trust region is the obstruction
            scale *= sc.expand_factor
        if not accepted:
            result.status = ScpStatus.INFEASIBLE
            return result
        step = float(np.max(np.linalg.norm(mu[:, pos] - means[:, pos], axis=1)))
        cost = evaluate_cost(sub, mu, u)
        record.update(cost=cost, step=step)
        result.iteration_log.append(record)
        if callback:
            callback(record)
        means, controls = mu, u
        result.means, result.controls, result.cost = means, controls, cost
        result.correction, result.rows = bc, rows
        if step <= cfg.conv_tol and weight == 1.0:
            result.gpc_trajectory = propagate_gpc(prob.dynamics, prob.X0, controls, prob.dt)
            result.status = ScpStatus.CONVERGED
            return result
    result.gpc_trajectory = propagate_gpc(prob.dynamics, prob.X0, controls, prob.dt)
    result.status = ScpStatus.MAX_ITERATIONS
    return result


def correction_margins(result: PcResult, prob: PcProblem) -> np.ndarray:
    """Re-predict with the final controls and evaluate every collision row.

    Returns the row values ``a^T mu + b + kappa sqrt(b_c + a^T Sigma_p a)``
    with shape ``(T-1, J)``; non-positive means satisfied.
    """
    pos = list(prob.position_indices)
    rows = result.rows if result.rows is not None else halfspace_rows(result.means, prob.obstacles, prob.r_rob, pos)
    X, bc = predict(prob.dynamics, result.controls, prob.X0, rows, prob.dt, pos)
    mean, _ = moments_from_gpc(X, prob.dynamics.basis)
    if not prob.obstacles:
        return np.zeros((prob.horizon - 1, 0))
    risks = allocate_risk(prob.eps_col, len(prob.obstacles))
    out = np.zeros((prob.horizon - 1, len(prob.obstacles)))
    for k in range(1, prob.horizon):
        for j, (obs, eps) in enumerate(zip(prob.obstacles, risks)):
            a = rows.normals[k, j]
            spread = np.sqrt(bc.values[k, j] + a @ obs.center_cov @ a)
            out[k - 1, j] = a @ mean[k, pos] + rows.offsets[k, j] + tightening(eps, prob.flavor) * spread
    return out
