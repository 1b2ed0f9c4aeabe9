"""Deterministic surrogates of chance constraints.

Linear chance constraints ``Pr(a^T x + b <= 0) >= 1 - eps`` are replaced by
the moment condition ``a^T mu + b + kappa(eps) sqrt(a^T Sigma a) <= 0``.  With
``kappa = sqrt((1 - eps) / eps)`` the condition holds for every distribution
with the given mean and covariance; with the Gaussian quantile it is exact
for Gaussian states only.  Quadratic chance constraints are replaced by the
trace condition ``tr(Q Sigma) / c <= eps``.  Every surrogate is available both
in moment space and in gPC coefficient space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .basis import HermiteBasis

Bound = Literal["dr", "gaussian"]

RISK_MIN = 0.001
RISK_MAX = 0.5


class RiskRangeError(ValueError):
    """Raised for a risk level outside the supported range."""


def check_risk(eps: float, name: str = "eps") -> float:
    """Validate that ``eps`` lies in ``[0.001, 0.5]``."""
    eps = float(eps)
    if not RISK_MIN <= eps <= RISK_MAX:
        raise RiskRangeError(f"{name}={eps} outside [{RISK_MIN}, {RISK_MAX}]")
    return eps


def dr_tightening(eps: float) -> float:
    """Distributionally robust multiplier ``sqrt((1 - eps) / eps)``."""
    eps = float(eps)
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return float(np.sqrt((1.0 - eps) / eps))


def gaussian_tightening(eps: float) -> float:
    """Standard normal ``(1 - eps)`` quantile, ``sqrt(2) erfinv(1 - 2 eps)``.

    Accepts ``eps`` in ``(0, 0.5]``; the upper end maps to zero.
    """
    eps = float(eps)
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"eps must lie in (0, 0.5], got {eps}")
    if eps == 0.5:
        return 0.0
    return float(ndtri(1.0 - eps))


def tightening(eps: float, bound: Bound = "dr") -> float:
    """Multiplier for the requested surrogate family."""
    if bound == "dr":
        return dr_tightening(eps)
    if bound == "gaussian":
        return gaussian_tightening(eps)
    raise ValueError(f"unknown bound '{bound}'")


@dataclass(frozen=True)
class LinearChance:
    """``Pr(a^T x + b <= 0) >= 1 - eps``."""

    a: np.ndarray
    b: float
    eps: float

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=float).reshape(-1)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))
        if not 0.0 < self.eps <= 0.5:
            raise ValueError(f"eps must lie in (0, 0.5], got {self.eps}")
        if not np.any(a != 0.0):
            raise ValueError("a must be nonzero")


@dataclass(frozen=True)
class QuadChance:
    """``Pr((x - mu)^T q (x - mu) >= c) <= eps``."""

    q: np.ndarray
    c: float
    eps: float

    def __post_init__(self) -> None:
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        object.__setattr__(self, "q", q)
        if not self.c > 0:
            raise ValueError("c must be positive")
        if np.linalg.eigvalsh(0.5 * (q + q.T)).min() < -1e-12 * max(1.0, np.abs(q).max()):
            raise ValueError("q must be positive semidefinite")


@dataclass(frozen=True)
class Obstacle:
    """Circular obstacle with a Gaussian-distributed centre."""

    center_mean: np.ndarray
    center_cov: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        c = np.asarray(self.center_mean, dtype=float).reshape(-1)
        cov = np.asarray(self.center_cov, dtype=float).reshape(c.size, c.size)
        object.__setattr__(self, "center_mean", c)
        object.__setattr__(self, "center_cov", cov)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("center_cov must be symmetric positive semidefinite")

    @property
    def is_stochastic(self) -> bool:
        return bool(np.any(self.center_cov != 0.0))


def drlcc_moment_check(lc: LinearChance, mean, cov, bound: Bound = "dr") -> float:
    """Signed margin ``a^T mu + b + kappa sqrt(a^T Sigma a)``; ``<= 0`` is feasible."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    var = max(float(lc.a @ cov @ lc.a), 0.0)
    return float(lc.a @ mean + lc.b + tightening(lc.eps, bound) * np.sqrt(var))


def cqcc_check(qc: QuadChance, cov) -> float:
    """Signed margin ``tr(q cov) / c - eps``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return float(np.trace(qc.q @ cov) / qc.c - qc.eps)


def shifted_cqcc_check(A, c: float, eps: float, mean, cov) -> float:
    """Signed margin ``(tr(A cov) + mean^T A mean) / c - eps``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not c > 0:
        raise ValueError("c must be positive")
    return float((np.trace(A @ cov) + mean @ A @ mean) / c - eps)


def allocate_risk(eps: float, m: int) -> list[float]:
    """Equal (Bonferroni) split of a joint risk over ``m`` constraints."""
    if int(m) != m or m < 1:
        raise ValueError("m must be a positive integer")
    return [float(eps) / int(m)] * int(m)


@dataclass(frozen=True)
class SocGpcConstraint:
    """Linear chance surrogate in gPC coordinates.

    Feasible iff ``lin_row @ X + offset + scale * || [cone_matrix @ X; const] || <= 0``.

    Attributes:
        lin_row: Picks ``a^T`` applied to the mean coefficients.
        offset: Constant ``b``.
        cone_matrix: ``(l+1, n)`` matrix mapping ``X`` to the scaled
            higher-order coefficients of ``a^T x``; its norm is ``sqrt(a^T Sigma a)``.
        scale: Tightening multiplier ``kappa(eps)``.
        weight: Diagonal weight ``blkdiag(0, sqrt(E[H H^T]))`` on the basis.
        const: Extra constant cone entries (obstacle-centre uncertainty).
    """

    lin_row: np.ndarray
    offset: float
    cone_matrix: np.ndarray
    scale: float
    weight: np.ndarray
    const: np.ndarray

    def margin(self, X) -> float:
        X = np.asarray(X, dtype=float)
        v = np.concatenate([self.cone_matrix @ X, self.const])
        return float(self.lin_row @ X + self.offset + self.scale * np.linalg.norm(v))


def gpc_weight_matrix(basis: HermiteBasis) -> np.ndarray:
    """``blkdiag(0, sqrt(E[H H^T]))`` for the Hermite basis (diagonal)."""
    w = np.sqrt(basis.norms_sq.astype(float))
    w[0] = 0.0
    return np.diag(w)


def to_gpc_soc(
    lc: LinearChance,
    basis: HermiteBasis,
    bound: Bound = "dr",
    extra_variance: float = 0.0,
) -> SocGpcConstraint:
    """Second-order cone form of a linear chance surrogate over ``X``.

    The cone vector is ``H sum_i a_i p_i`` where ``p_i`` is the coefficient
    block of state ``i``; its squared norm is ``a^T Sigma a`` including all
    cross-covariance terms.  ``extra_variance`` (e.g. ``a^T Sigma_p a`` for an
    uncertain obstacle) enters as a constant cone entry.
    """
    L = basis.n_terms
    a = lc.a
    weight = gpc_weight_matrix(basis)
    lin_row = np.kron(a, np.eye(L)[0])
    cone = weight @ np.kron(a[None, :], np.eye(L))
    if extra_variance < 0:
        raise ValueError("extra_variance must be non-negative")
    const = np.array([np.sqrt(extra_variance)]) if extra_variance > 0 else np.zeros(0)
    return SocGpcConstraint(
        lin_row=lin_row,
        offset=lc.b,
        cone_matrix=cone,
        scale=tightening(lc.eps, bound),
        weight=weight,
        const=const,
    )


@dataclass(frozen=True)
class GpcQuadratic:
    """``sum_s weights[s] * X[s]**2 <= bound`` over gPC slots."""

    weights: np.ndarray
    bound: float

    def value(self, X) -> float:
        X = np.asarray(X, dtype=float)
        return float(self.weights @ (X * X))

    def margin(self, X) -> float:
        return self.value(X) - self.bound


def to_gpc_quadratic(a_diag, c: float, eps: float, basis: HermiteBasis) -> GpcQuadratic:
    """Trace surrogate ``tr(diag(a) Sigma) <= eps c`` over gPC coefficients.

    Slot ``(i, k)`` gets weight ``a_i E[phi_k^2]`` for ``k >= 1`` and zero on
    the mean slots.
    """
    a_diag = np.asarray(a_diag, dtype=float).reshape(-1)
    if np.any(a_diag < 0):
        raise ValueError("a_diag must be non-negative")
    if not c > 0:
        raise ValueError("c must be positive")
    per_term = basis.norms_sq.astype(float).copy()
    per_term[0] = 0.0
    return GpcQuadratic(weights=np.kron(a_diag, per_term), bound=float(eps) * float(c))


@dataclass(frozen=True)
class HalfSpace:
    """Position-space half-space ``a^T p + b <= 0``."""

    a: np.ndarray
    b: float

    def lift(self, position_indices: Sequence[int], d_x: int) -> np.ndarray:
        """State-space row ``C^T a`` for a position selector ``C``."""
        row = np.zeros(d_x)
        row[list(position_indices)] = self.a
        return row


def det_obstacle_halfspace(x_nom, obs: Obstacle, r_rob: float) -> HalfSpace:
    """Supporting half-space of the safety ball seen from ``x_nom``.

    With ``d = x_nom - center`` and ``r_safe = r_rob + radius``, returns
    ``a = -d`` and ``b = d^T center + r_safe |d|``, so that ``a^T p + b <= 0``
    means the projection of ``p - center`` on ``d`` is at least ``r_safe |d|``.
    """
    x_nom = np.asarray(x_nom, dtype=float).reshape(-1)
    d = x_nom - obs.center_mean
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        raise ValueError("nominal position coincides with the obstacle centre")
    r_safe = float(r_rob) + obs.radius
    return HalfSpace(a=-d, b=float(d @ obs.center_mean + r_safe * dist))


@dataclass(frozen=True)
class ObstacleSurrogate:
    """Chance-constrained collision surrogate for one obstacle.

    ``margin(mu, Sigma) = a^T mu + b + kappa sqrt(a^T Sigma a + 2 a^T Sigma_xp a + a^T Sigma_p a)``
    in position space, where ``b`` already carries ``-a^T mu_p``.
    """

    halfspace: HalfSpace
    kappa: float
    obstacle_variance: float
    cross_variance: float

    def margin(self, mean_pos, cov_pos) -> float:
        a = self.halfspace.a
        mean_pos = np.asarray(mean_pos, dtype=float).reshape(-1)
        cov_pos = np.atleast_2d(np.asarray(cov_pos, dtype=float))
        var = float(a @ cov_pos @ a) + 2.0 * self.cross_variance + self.obstacle_variance
        return float(a @ mean_pos + self.halfspace.b + self.kappa * np.sqrt(max(var, 0.0)))

    def extra_variance(self) -> float:
        """Variance terms not carried by the robot's gPC coefficients."""
        return max(self.obstacle_variance + 2.0 * self.cross_variance, 0.0)


def stoch_obstacle_surrogate(
    x_nom,
    obs: Obstacle,
    r_rob: float,
    eps: float,
    cross_cov: Optional[np.ndarray] = None,
    bound: Bound = "dr",
) -> ObstacleSurrogate:
    """Collision surrogate for an obstacle with uncertain centre.

    The half-space is linearized at the nominal position ``x_nom``.  With a
    zero centre covariance and no cross covariance this is the
    deterministic-obstacle surrogate.
    """
    hs = det_obstacle_halfspace(x_nom, obs, r_rob)
    a = hs.a
    cross = 0.0
    if cross_cov is not None:
        cross = float(a @ np.atleast_2d(np.asarray(cross_cov, dtype=float)) @ a)
    return ObstacleSurrogate(
        halfspace=hs,
        kappa=tightening(eps, bound),
        obstacle_variance=float(a @ obs.center_cov @ a),
        cross_variance=cross,
    )


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal conditions in gPC coordinates.

    Attributes:
        eq_rows: ``(d_x, n)`` selector of the mean slots.
        eq_rhs: Required terminal mean.
        factor: ``F`` with ``||F X||^2 = tr(q_xf Sigma)``; ``None`` disables
            the variance constraint.
        bound: Right-hand side of ``||F X||^2 <= bound + slack``.
        slack_weight: Penalty on the non-negative slack.
    """

    eq_rows: np.ndarray
    eq_rhs: np.ndarray
    factor: Optional[np.ndarray]
    bound: float
    slack_weight: float

    def variance_value(self, X) -> float:
        if self.factor is None:
            return 0.0
        v = self.factor @ np.asarray(X, dtype=float)
        return float(v @ v)


def gpc_trace_factor(q_xf, basis: HermiteBasis) -> np.ndarray:
    """Matrix ``F`` with ``||F X||^2 = tr(q_xf Sigma(X))``."""
    q = np.asarray(q_xf, dtype=float)
    if q.ndim == 1:
        q = np.diag(q)
    w, v = np.linalg.eigh(0.5 * (q + q.T))
    if w.min() < -1e-12 * max(1.0, np.abs(w).max()):
        raise ValueError("q_xf must be positive semidefinite")
    keep = w > 1e-14 * max(1.0, np.abs(w).max())
    root = (v[:, keep] * np.sqrt(w[keep])).T  # root^T root = q
    scale = np.sqrt(basis.norms_sq.astype(float))[1:]
    L = basis.n_terms
    pick = np.zeros((L - 1, L))
    pick[np.arange(L - 1), np.arange(1, L)] = scale
    return np.kron(root, pick)


def terminal_constraints(
    xf_mean,
    q_xf,
    c_f: float,
    eps_f: float,
    basis: HermiteBasis,
    kind: Literal["dr", "3sigma", "none"] = "dr",
    slack_weight: float = 1e4,
) -> TerminalSpec:
    """Terminal mean equality plus a slackened variance-trace bound.

    ``kind="dr"`` bounds ``tr(q Sigma) <= eps_f c_f``; ``kind="3sigma"`` uses
    the heuristic ``3 tr(q Sigma) <= c_f``; ``kind="none"`` keeps only the
    mean equality.
    """
    xf_mean = np.asarray(xf_mean, dtype=float).reshape(-1)
    if not c_f > 0:
        raise ValueError("c_f must be positive")
    d_x = xf_mean.size
    L = basis.n_terms
    rows = np.kron(np.eye(d_x), np.eye(L)[0][None, :])
    if kind == "none":
        return TerminalSpec(rows, xf_mean, None, 0.0, float(slack_weight))
    if kind == "dr":
        bound = float(eps_f) * float(c_f)
    elif kind == "3sigma":
        bound = float(c_f) / 3.0
    else:
        raise ValueError(f"unknown terminal constraint kind '{kind}'")
    return TerminalSpec(rows, xf_mean, gpc_trace_factor(q_xf, basis), bound, float(slack_weight))
