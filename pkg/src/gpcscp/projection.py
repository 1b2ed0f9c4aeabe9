"""Projection of an SDE onto a Hermite basis.

A random state ``x(xi)`` is represented by the coefficient vector ``X`` of
its truncated expansion, laid out state-major:
``X = [x_{1,0} .. x_{1,l}, x_{2,0} .. x_{2,l}, ..., x_{dx,l}]``.
The drift and diffusion are projected by collocation on a Gauss-Hermite
rule, which turns the SDE into a deterministic difference equation
``X[k+1] = X[k] + fbar(X[k], u[k]) dt + gbar(X[k], u[k]) sqrt(dt)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import HermiteBasis, QuadratureRule, eval_basis, eval_basis_many
from .models import SdeModel

DIVERGENCE_LIMIT = 1e9


class GpcDivergenceError(RuntimeError):
    """Raised when a propagated coefficient becomes non-finite or too large."""

    def __init__(self, step: int, message: str = "") -> None:
        self.step = step
        super().__init__(message or f"gPC propagation diverged at step {step}")


@dataclass(frozen=True)
class GermMap:
    """Assignment of germ dimensions to noise channels and initial states.

    Attributes:
        d_xi: Total germ dimension.
        channel_germs: Germ index driving each diffusion column.
        initial_germs: ``(state_index, germ_index)`` pairs for uncertain
            initial-state components.
    """

    d_xi: int
    channel_germs: tuple[int, ...]
    initial_germs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        for g in self.channel_germs:
            if not 0 <= g < self.d_xi:
                raise ValueError(f"channel germ {g} outside [0, {self.d_xi})")
        germs = [g for _, g in self.initial_germs]
        if len(set(germs)) != len(germs):
            raise ValueError("uncertain initial components need distinct germs")
        for _, g in self.initial_germs:
            if not 0 <= g < self.d_xi:
                raise ValueError(f"initial-state germ {g} outside [0, {self.d_xi})")

    @classmethod
    def build(cls, d_w: int, stdev: Sequence[float] | None = None) -> "GermMap":
        """Noise channels take germs ``0..d_w-1``; uncertain states follow."""
        uncertain = [i for i, s in enumerate(stdev if stdev is not None else []) if s > 0]
        initial = tuple((i, d_w + n) for n, i in enumerate(uncertain))
        d_xi = max(1, d_w + len(uncertain))
        return cls(d_xi=d_xi, channel_germs=tuple(range(d_w)), initial_germs=initial)


class ProjectedDynamics:
    """Deterministic dynamics of the gPC coefficients of an SDE.

    Construct with :func:`project_dynamics`.  Instances are immutable.
    """

    def __init__(
        self, model: SdeModel, basis: HermiteBasis, rule: QuadratureRule, germ_map: GermMap
    ) -> None:
        if rule.nodes.shape[1] != basis.d_xi:
            raise ValueError("quadrature dimension does not match the basis")
        if germ_map.d_xi != basis.d_xi:
            raise ValueError("germ map dimension does not match the basis")
        if len(germ_map.channel_germs) != model.d_w:
            raise ValueError(
                f"germ map assigns {len(germ_map.channel_germs)} channels, model has {model.d_w}"
            )
        self.model = model
        self.basis = basis
        self.rule = rule
        self.germ_map = germ_map
        self.n_terms = basis.n_terms
        self.d_x = model.d_x
        self.d_u = model.d_u
        self.n_state = model.d_x * basis.n_terms
        phi = eval_basis_many(basis, rule.nodes)
        self._phi = phi
        # coefficient j of a function sampled at the nodes = proj[:, j] . values
        self._proj = phi * rule.weights[:, None] / basis.norms_sq[None, :]
        self._xi_channels = rule.nodes[:, list(germ_map.channel_germs)]
        for arr in (self._phi, self._proj, self._xi_channels):
            arr.setflags(write=False)

    def states_at_nodes(self, X: np.ndarray) -> np.ndarray:
        """Reconstructed states ``Phi(n_k) X`` at every node, shape ``(Q, d_x)``."""
        return self._phi @ np.asarray(X, dtype=float).reshape(self.d_x, self.n_terms).T

    def _project(self, values: np.ndarray) -> np.ndarray:
        return (self._proj.T @ values).T.reshape(-1)

    def drift_coeffs(self, X: np.ndarray, u) -> np.ndarray:
        """Projected drift ``fbar(X, u)`` as a coefficient vector."""
        s = self.states_at_nodes(X)
        return self._project(self.model.drift(s, np.asarray(u, dtype=float)))

    def diffusion_coeffs(self, X: np.ndarray, u) -> np.ndarray:
        """Projected diffusion ``gbar(X, u)``; each column multiplied by its germ."""
        s = self.states_at_nodes(X)
        g = self.model.diffusion(s, np.asarray(u, dtype=float))
        return self._project(np.einsum("kic,kc->ki", g, self._xi_channels))

    def increment(self, X: np.ndarray, u, dt: float) -> np.ndarray:
        """One-step change ``fbar dt + gbar sqrt(dt)``."""
        s = self.states_at_nodes(X)
        u = np.asarray(u, dtype=float)
        f = self.model.drift(s, u)
        g = self.model.diffusion(s, u)
        vals = f * dt + np.sqrt(dt) * np.einsum("kic,kc->ki", g, self._xi_channels)
        return self._project(vals)

    def jacobians(self, X: np.ndarray, u, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Jacobians of :meth:`increment` with respect to ``X`` and ``u``."""
        s = self.states_at_nodes(X)
        u = np.asarray(u, dtype=float)
        u_nodes = np.broadcast_to(u, (s.shape[0], self.d_u))
        jx, ju = self.model.jacobians(s, u_nodes)
        gx, gu = self.model.diffusion_jacobians(s, u_nodes)
        rt = np.sqrt(dt)
        hx = jx * dt + rt * np.einsum("kicm,kc->kim", gx, self._xi_channels)
        hu = ju * dt + rt * np.einsum("kicm,kc->kim", gu, self._xi_channels)
        a = np.einsum("kj,kab,kl->ajbl", self._proj, hx, self._phi, optimize=True)
        b = np.einsum("kj,kam->ajm", self._proj, hu, optimize=True)
        return a.reshape(self.n_state, self.n_state), b.reshape(self.n_state, self.d_u)


def project_dynamics(
    model: SdeModel, basis: HermiteBasis, rule: QuadratureRule, germ_map: GermMap
) -> ProjectedDynamics:
    """Build the projected coefficient dynamics of ``model``."""
    return ProjectedDynamics(model, basis, rule, germ_map)


def project_initial(mean, stdev, basis: HermiteBasis, germ_map: GermMap) -> np.ndarray:
    """Coefficients of a Gaussian initial state with independent components.

    Component ``i`` with ``stdev[i] > 0`` gets its standard deviation on the
    linear polynomial of the germ assigned to it by ``germ_map``.
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    stdev = np.asarray(stdev, dtype=float).reshape(-1)
    if mean.shape != stdev.shape:
        raise ValueError("mean and stdev must have the same length")
    if np.any(stdev < 0):
        raise ValueError("stdev must be non-negative")
    assigned = dict(germ_map.initial_germs)
    uncertain = [i for i in range(mean.size) if stdev[i] > 0]
    if len(uncertain) > basis.d_xi:
        raise ValueError("more uncertain components than germ dimensions")
    missing = [i for i in uncertain if i not in assigned]
    if missing:
        raise ValueError(f"uncertain components {missing} have no assigned germ")
    L = basis.n_terms
    X = np.zeros((mean.size, L))
    X[:, 0] = mean
    if basis.p_gpc >= 1:
        for i in uncertain:
            X[i, basis.first_order_index(assigned[i])] = stdev[i]
    return X.reshape(-1)


def as_control_array(controls, d_u: int) -> np.ndarray:
    """Coerce a control sequence to shape ``(n_steps, d_u)``."""
    arr = np.asarray(controls, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == d_u:
        return arr
    if d_u > 0 and arr.size % d_u == 0:
        return arr.reshape(-1, d_u)
    raise ValueError(f"controls of shape {arr.shape} do not match d_u={d_u}")


def propagate_gpc(pd: ProjectedDynamics, X0, controls, dt: float) -> np.ndarray:
    """Roll the projected dynamics forward.

    Args:
        pd: Projected dynamics.
        X0: Initial coefficient vector.
        controls: Array of shape ``(T-1, d_u)``.
        dt: Step size.

    Returns:
        Array of shape ``(T, d_x * (l+1))``.

    Raises:
        GpcDivergenceError: If a coefficient becomes non-finite or exceeds
            ``1e9`` in magnitude.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    controls = as_control_array(controls, pd.d_u)
    out = np.empty((controls.shape[0] + 1, pd.n_state))
    out[0] = np.asarray(X0, dtype=float)
    for k, u in enumerate(controls):
        nxt = out[k] + pd.increment(out[k], u, dt)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > DIVERGENCE_LIMIT:
            raise GpcDivergenceError(k + 1)
        out[k + 1] = nxt
    return out


def moments_from_gpc(X, basis: HermiteBasis) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the state represented by ``X``.

    Accepts a single coefficient vector or a stack of shape ``(T, n)``; in
    the latter case the outputs gain a leading ``T`` axis.
    """
    X = np.asarray(X, dtype=float)
    L = basis.n_terms
    coeffs = X.reshape(X.shape[:-1] + (-1, L))
    mean = coeffs[..., 0]
    hi = coeffs[..., 1:] * np.sqrt(basis.norms_sq[1:])
    cov = np.einsum("...ij,...kj->...ik", hi, hi)
    return mean, cov


def sample_reconstruct(X, basis: HermiteBasis, xi) -> np.ndarray:
    """State realization ``x(xi) = Phi(xi) X`` for one germ point."""
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, basis.n_terms) @ eval_basis(basis, xi)


def sample_reconstruct_many(X, basis: HermiteBasis, xi: np.ndarray) -> np.ndarray:
    """Realizations for a batch of germ points, shape ``(n_points, d_x)``."""
    X = np.asarray(X, dtype=float)
    return eval_basis_many(basis, xi) @ X.reshape(-1, basis.n_terms).T


def project_cost_matrix(Q, basis: HermiteBasis) -> np.ndarray:
    """``E[Phi^T Q Phi]``: block ``(i, i')`` equals ``Q[i, i'] * diag(norms)``."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[0] != Q.shape[1]:
        raise ValueError("Q must be square")
    if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ValueError("Q must be symmetric")
    return np.kron(Q, np.diag(basis.norms_sq))


def linearize_projected(
    pd: ProjectedDynamics, X_nom, u_nom, dt: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine model ``increment(X, u) ~ A X + B u + Z`` exact at the nominal."""
    X_nom = np.asarray(X_nom, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float).reshape(pd.d_u)
    if not (np.all(np.isfinite(X_nom)) and np.all(np.isfinite(u_nom))):
        raise ValueError("nominal point must be finite")
    a, b = pd.jacobians(X_nom, u_nom, dt)
    z = pd.increment(X_nom, u_nom, dt) - a @ X_nom - b @ u_nom
    return a, b, z


def linear_covariance_propagation(
    model: SdeModel, x0, cov0, controls, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """First-order Taylor mean/covariance recursion used as a baseline.

    The mean follows the noise-free Euler map and the covariance obeys
    ``S <- F S F^T + G G^T dt`` with ``F = I + df/dx dt`` at the mean.
    """
    controls = as_control_array(controls, model.d_u)
    n = model.d_x
    means = np.empty((controls.shape[0] + 1, n))
    covs = np.empty((controls.shape[0] + 1, n, n))
    means[0] = np.asarray(x0, dtype=float)
    covs[0] = np.asarray(cov0, dtype=float)
    eye = np.eye(n)
    for k, u in enumerate(controls):
        x = means[k]
        jx, _ = model.jacobians(x, u)
        f = eye + jx * dt
        g = model.diffusion(x, u)
        means[k + 1] = x + model.drift(x, u) * dt
        covs[k + 1] = f @ covs[k] @ f.T + g @ g.T * dt
    return means, covs
