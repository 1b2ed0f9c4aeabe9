"""Seeded Monte-Carlo validation of plans on the true SDE.

Every rollout owns a random stream seeded with ``(seed, rollout)``; the
stream is consumed in a fixed (step, substep, channel) order, so results do
not depend on batching or on how many threads share the work.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .basis import HermiteBasis, eval_basis_many
from .constraints import Obstacle
from .models import SdeModel, euler_maruyama_step
from .projection import as_control_array

DEFAULT_SUBSTEPS = 10


class Plan(NamedTuple):
    """A planned gPC trajectory and its open-loop controls."""

    gpc_trajectory: np.ndarray
    controls: np.ndarray
    basis: HermiteBasis


@dataclass(frozen=True)
class TrackingGains:
    kp: float = 2.0
    kd: float = 3.0

    def __post_init__(self) -> None:
        if not (self.kp > 0 and self.kd > 0):
            raise ValueError("tracking gains must be positive")


@dataclass(frozen=True)
class ValidationSetup:
    """Everything a rollout needs besides the plan.

    Attributes:
        model: True plant.
        dt: Waypoint spacing [s].
        obstacles: Obstacles whose centres are sampled once per rollout.
        r_rob: Robot radius [m].
        collision_indices: State components checked against obstacle centres.
        goal_mean, q_terminal, c_terminal: Terminal set
            ``(x - goal)^T diag(q) (x - goal) <= c``; ``None`` disables it.
        gains: Tracking gains for closed-loop mode.
        substeps: Integration substeps per waypoint interval.
        reference: ``"sampled"`` tracks a realization of the planned
            distribution, ``"mean"`` tracks the planned mean.
    """

    model: SdeModel
    dt: float
    obstacles: tuple = ()
    r_rob: float = 0.0
    collision_indices: tuple = (0, 1)
    goal_mean: Optional[np.ndarray] = None
    q_terminal: Optional[np.ndarray] = None
    c_terminal: Optional[float] = None
    gains: TrackingGains = TrackingGains()
    substeps: int = DEFAULT_SUBSTEPS
    reference: str = "sampled"

    def __post_init__(self) -> None:
        if self.substeps < 1:
            raise ValueError("substeps must be positive")
        if self.reference not in ("sampled", "mean"):
            raise ValueError("reference must be 'sampled' or 'mean'")


@dataclass
class RolloutStats:
    n_rollouts: int
    collisions: int
    terminal_violations: int
    min_clearance: np.ndarray
    costs: np.ndarray
    collided: np.ndarray
    terminal_value: np.ndarray
    trajectories: Optional[np.ndarray] = None

    def summary(self) -> dict:
        """Aggregate record with the fixed output keys."""
        q05 = None
        if self.n_rollouts and np.all(np.isfinite(self.min_clearance)):
            q05 = float(np.quantile(self.min_clearance, 0.05))
        return {
            "n": int(self.n_rollouts),
            "collisions": int(self.collisions),
            "terminal_violations": int(self.terminal_violations),
            "min_clearance_q05": q05,
            "cost_mean": float(np.mean(self.costs)) if self.n_rollouts else None,
        }


def rollout_stream(seed: int, rollout: int) -> np.random.Generator:
    """Independent generator for one rollout."""
    return np.random.default_rng([int(seed), int(rollout)])


def _noise(seed: int, rollouts: Sequence[int], n_steps: int, substeps: int, d_w: int) -> np.ndarray:
    out = np.empty((len(rollouts), n_steps, substeps, d_w))
    for i, r in enumerate(rollouts):
        out[i] = rollout_stream(seed, r).standard_normal((n_steps, substeps, d_w))
    return out


def rollout_open_loop(
    model: SdeModel,
    controls,
    x0_sample,
    dt: float,
    seed: int,
    rollout: int = 0,
    substeps: int = 1,
) -> np.ndarray:
    """Euler-Maruyama rollout under fixed controls.

    Returns:
        Waypoint states of shape ``(T, d_x)``.
    """
    controls = as_control_array(controls, model.d_u) if model.d_u else np.zeros((len(controls), 0))
    noise = _noise(seed, [rollout], controls.shape[0], substeps, model.d_w)[0]
    h = dt / substeps
    x = np.asarray(x0_sample, dtype=float).copy()
    out = np.empty((controls.shape[0] + 1, x.size))
    out[0] = x
    for k, u in enumerate(controls):
        for s in range(substeps):
            x = euler_maruyama_step(model, x, u, h, noise[k, s])
        out[k + 1] = x
    return out


class TrackingController:
    """PD tracking through the pseudo-inverse of the control allocation.

    ``u = clamp(u_nom + pinv(B(x)) (kp e_pos + kd e_vel))`` where ``e`` is
    reference minus actual.  Opposing thruster pairs are netted before
    clamping so that a negative request on one thruster becomes a positive
    request on its opposite.
    """

    def __init__(
        self,
        model: SdeModel,
        ref_states: np.ndarray,
        ref_controls: np.ndarray,
        gains: TrackingGains = TrackingGains(),
    ) -> None:
        self.model = model
        self.ref_states = np.asarray(ref_states, dtype=float)
        self.ref_controls = np.asarray(ref_controls, dtype=float)
        self.gains = gains
        self._pos = list(model.position_indices)
        self._vel = list(model.velocity_indices)
        self._lo = np.asarray(model.control_lower, dtype=float)
        self._hi = np.asarray(model.control_upper, dtype=float)

    def reference(self, k: int, frac: float = 0.0) -> np.ndarray:
        """Reference state between waypoints ``k`` and ``k + 1``."""
        r = self.ref_states
        a = r[..., k, :]
        if frac == 0.0:
            return a
        return (1.0 - frac) * a + frac * r[..., k + 1, :]

    def __call__(self, x: np.ndarray, k: int, frac: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        err = self.reference(k, frac) - x
        accel = self.gains.kp * err[..., self._pos] + self.gains.kd * err[..., self._vel]
        alloc = self.model.allocation(x) if self.model.allocation is not None else None
        if alloc is None:
            corr = accel
        else:
            corr = np.einsum("...ij,...j->...i", np.linalg.pinv(alloc), accel)
        u = self.ref_controls[..., k, :] + corr
        for i, j in self.model.opposing_pairs:
            net = u[..., i] - u[..., j]
            u[..., i] = np.maximum(net, 0.0)
            u[..., j] = np.maximum(-net, 0.0)
        return np.clip(u, self._lo, self._hi)


def tracking_controller(
    model: SdeModel,
    ref_states,
    ref_controls,
    gains: TrackingGains = TrackingGains(),
) -> TrackingController:
    """Feedback law tracking ``ref_states`` around ``ref_controls``."""
    return TrackingController(model, ref_states, ref_controls, gains)


def _simulate(
    plan: Plan,
    setup: ValidationSetup,
    rollouts: Sequence[int],
    seed: int,
    mode: str,
) -> dict:
    model = setup.model
    X = np.asarray(plan.gpc_trajectory, dtype=float)
    T = X.shape[0]
    L = plan.basis.n_terms
    d_x = model.d_x
    coeffs = X.reshape(T, d_x, L)
    controls = as_control_array(plan.controls, model.d_u) if model.d_u else np.zeros((T - 1, 0))
    n = len(rollouts)
    # germ sample, obstacle centres, then process noise: all from the rollout's stream
    xi = np.empty((n, plan.basis.d_xi))
    centers = np.empty((n, len(setup.obstacles), len(setup.collision_indices)))
    noise = np.empty((n, T - 1, setup.substeps, model.d_w))
    for i, r in enumerate(rollouts):
        g = rollout_stream(seed, r)
        xi[i] = g.standard_normal(plan.basis.d_xi)
        for j, obs in enumerate(setup.obstacles):
            if obs.is_stochastic:
                centers[i, j] = g.multivariate_normal(obs.center_mean, obs.center_cov, method="cholesky")
            else:
                centers[i, j] = obs.center_mean
        noise[i] = g.standard_normal((T - 1, setup.substeps, model.d_w))
    phi = eval_basis_many(plan.basis, xi)  # (n, L)
    samples = np.einsum("nl,til->nti", phi, coeffs)  # realizations of the plan
    x = samples[:, 0].copy()
    h = setup.dt / setup.substeps
    traj = np.empty((n, T, d_x))
    traj[:, 0] = x
    cost = np.zeros(n)
    if mode == "closed":
        ref = samples if setup.reference == "sampled" else np.broadcast_to(coeffs[:, :, 0], (n, T, d_x))
        ctrl = TrackingController(model, ref, np.broadcast_to(controls, (n,) + controls.shape), setup.gains)
    for k in range(T - 1):
        for s in range(setup.substeps):
            if mode == "closed":
                u = ctrl(x, k, s / setup.substeps)
            else:
                u = np.broadcast_to(controls[k], (n, model.d_u))
            if model.d_u:
                cost += np.linalg.norm(u, axis=1) * h
            x = euler_maruyama_step(model, x, u, h, noise[:, k, s])
        traj[:, k + 1] = x
    pos = traj[..., list(setup.collision_indices)]
    if setup.obstacles:
        radii = np.array([setup.r_rob + o.radius for o in setup.obstacles])
        dist = np.linalg.norm(pos[:, :, None, :] - centers[:, None, :, :], axis=3) - radii
        min_clear = dist.min(axis=(1, 2))
        collided = np.any(dist < 0.0, axis=(1, 2))
    else:
        min_clear = np.full(n, np.nan)
        collided = np.zeros(n, dtype=bool)
    if setup.goal_mean is not None and setup.c_terminal is not None:
        q = np.ones(d_x) if setup.q_terminal is None else np.asarray(setup.q_terminal, dtype=float)
        e = traj[:, -1] - np.asarray(setup.goal_mean, dtype=float)
        term = np.einsum("ni,i,ni->n", e, q, e)
        violated = term > setup.c_terminal
    else:
        term = np.zeros(n)
        violated = np.zeros(n, dtype=bool)
    return {
        "trajectories": traj,
        "min_clearance": min_clear,
        "collided": collided,
        "terminal_value": term,
        "violated": violated,
        "costs": cost,
    }


def worker_count() -> int:
    """Thread cap from ``GPCSCP_THREADS`` (default 1)."""
    raw = os.environ.get("GPCSCP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def validate(
    plan: Plan,
    setup: ValidationSetup,
    n_rollouts: int,
    seed: int,
    mode: str = "closed",
    chunk: int = 250,
    threads: Optional[int] = None,
    keep_trajectories: bool = False,
) -> RolloutStats:
    """Run ``n_rollouts`` seeded rollouts of ``plan`` and collect statistics.

    Args:
        plan: gPC trajectory, controls and basis.
        setup: Plant, obstacles, terminal set and controller settings.
        n_rollouts: Number of rollouts (may be zero).
        seed: Base seed.
        mode: ``"open"`` replays the controls; ``"closed"`` tracks a reference.
        chunk: Rollouts per vectorized batch.
        threads: Worker threads; defaults to :func:`worker_count`.
        keep_trajectories: Attach the waypoint states as ``stats.trajectories``.
    """
    if mode not in ("open", "closed"):
        raise ValueError("mode must be 'open' or 'closed'")
    if n_rollouts < 0:
        raise ValueError("n_rollouts must be non-negative")
    batches = [list(range(i, min(i + chunk, n_rollouts))) for i in range(0, n_rollouts, chunk)]
    threads = worker_count() if threads is None else max(1, int(threads))
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _simulate(plan, setup, b, seed, mode), batches))
    else:
        parts = [_simulate(plan, setup, b, seed, mode) for b in batches]

    def cat(key: str, dtype=float) -> np.ndarray:
        if not parts:
            return np.zeros(0, dtype=dtype)
        return np.concatenate([p[key] for p in parts])

    collided = cat("collided", bool)
    violated = cat("violated", bool)
    stats = RolloutStats(
        n_rollouts=n_rollouts,
        collisions=int(collided.sum()),
        terminal_violations=int(violated.sum()),
        min_clearance=cat("min_clearance"),
        costs=cat("costs"),
        collided=collided,
        terminal_value=cat("terminal_value"),
    )
    if keep_trajectories:
        stats.trajectories = cat("trajectories")
    return stats


def binomial_bound(eps: float, n: int, n_se: float = 3.0) -> float:
    """``eps + n_se * sqrt(eps (1 - eps) / n)``."""
    return float(eps + n_se * np.sqrt(eps * (1.0 - eps) / n))
