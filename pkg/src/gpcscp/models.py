"""SDE plants ``dx = f(x, u) dt + g(x, u) dw`` and Euler-Maruyama sampling.

Every evaluator is vectorized: states of shape ``(..., d_x)`` and controls
of shape ``(..., d_u)`` broadcast against each other, drifts come back as
``(..., d_x)`` and diffusions as ``(..., d_x, d_w)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray
JacobianFn = Callable[[Array, Array], tuple[Array, Array]]


@dataclass(frozen=True)
class SdeModel:
    """Controlled Ito SDE with box-bounded controls.

    Attributes:
        name: Plant identifier.
        d_x, d_u, d_w: State, control and noise-channel dimensions.
        drift: ``f(x, u) -> (..., d_x)``.
        diffusion: ``g(x, u) -> (..., d_x, d_w)``.
        control_lower, control_upper: Control box.
        drift_jacobian: Optional ``(x, u) -> (df/dx, df/du)`` with shapes
            ``(..., d_x, d_x)`` and ``(..., d_x, d_u)``.
        diffusion_jacobian: Optional ``(x, u) -> (dg/dx, dg/du)`` with
            shapes ``(..., d_x, d_w, d_x)`` and ``(..., d_x, d_w, d_u)``.
        position_indices: State components treated as positions by the
            tracking controller and the collision checks.
        velocity_indices: Matching velocity components.
        allocation: Optional ``x -> (..., n_pos, d_u)`` map from controls to
            accelerations of the position block.
        opposing_pairs: Control channels whose effects cancel exactly; used to
            keep one-sided actuators non-negative after feedback.
    """

    name: str
    d_x: int
    d_u: int
    d_w: int
    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    control_lower: Array
    control_upper: Array
    drift_jacobian: Optional[JacobianFn] = None
    diffusion_jacobian: Optional[JacobianFn] = None
    position_indices: tuple[int, ...] = ()
    velocity_indices: tuple[int, ...] = ()
    allocation: Optional[Callable[[Array], Array]] = None
    opposing_pairs: tuple[tuple[int, int], ...] = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        lo = np.asarray(self.control_lower, dtype=float)
        hi = np.asarray(self.control_upper, dtype=float)
        if lo.shape != (self.d_u,) or hi.shape != (self.d_u,):
            raise ValueError("control bounds must have length d_u")
        if np.any(lo > hi):
            raise ValueError("control_lower must not exceed control_upper")

    def jacobians(self, x: Array, u: Array) -> tuple[Array, Array]:
        """Drift Jacobians, analytic when available, else central differences."""
        if self.drift_jacobian is not None:
            return self.drift_jacobian(x, u)
        return fd_jacobian(self.drift, x, u)

    def diffusion_jacobians(self, x: Array, u: Array) -> tuple[Array, Array]:
        """Diffusion Jacobians, analytic when available, else central differences."""
        if self.diffusion_jacobian is not None:
            return self.diffusion_jacobian(x, u)
        return fd_jacobian(self.diffusion, x, u)


@dataclass(frozen=True)
class SpacecraftParams:
    """Planar free-flyer parameters (SI units)."""

    mass: float = 10.0
    inertia: float = 1.62
    arm: float = 0.4
    sigma: float = 0.1
    thrust_max: float = 0.45

    def __post_init__(self) -> None:
        for name in ("mass", "inertia", "arm", "thrust_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def fd_jacobian(fn: Callable[[Array, Array], Array], x: Array, u: Array) -> tuple[Array, Array]:
    """Central-difference Jacobians of ``fn(x, u)`` in ``x`` and ``u``.

    The step for coordinate ``z`` is ``1e-6 * (1 + |z|)``.  Output shapes are
    ``fn.shape + (d_x,)`` and ``fn.shape + (d_u,)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def partials(arg_index: int) -> Array:
        base = x if arg_index == 0 else u
        cols = []
        for i in range(base.shape[-1]):
            h = 1e-6 * (1.0 + np.abs(base[..., i]))
            plus = base.copy()
            minus = base.copy()
            plus[..., i] += h
            minus[..., i] -= h
            if arg_index == 0:
                fp, fm = fn(plus, u), fn(minus, u)
            else:
                fp, fm = fn(x, plus), fn(x, minus)
            scale = (2.0 * h).reshape(h.shape + (1,) * (np.ndim(fp) - np.ndim(h)))
            cols.append((fp - fm) / scale)
        if not cols:
            out = np.asarray(fn(x, u))
            return np.zeros(out.shape + (0,))
        return np.stack(cols, axis=-1)

    return partials(0), partials(1)


def _zeros_like_batch(x: Array, *tail: int) -> Array:
    return np.zeros(np.shape(x)[:-1] + tail)


def pendulum_model(noise_var: float) -> SdeModel:
    """Damped pendulum ``theta'' = -sin(theta) - 0.8 theta'`` with additive noise.

    State ``(theta, theta_dot)``; no controls; one noise channel entering the
    angular acceleration with standard deviation ``sqrt(noise_var)``.
    """
    if noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    damping = 0.8
    amp = float(np.sqrt(noise_var))

    def drift(x: Array, u: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1], -np.sin(x[..., 0]) - damping * x[..., 1]], axis=-1)

    def diffusion(x: Array, u: Array) -> Array:
        g = _zeros_like_batch(np.asarray(x), 2, 1)
        g[..., 1, 0] = amp
        return g

    def drift_jac(x: Array, u: Array) -> tuple[Array, Array]:
        x = np.asarray(x, dtype=float)
        jx = _zeros_like_batch(x, 2, 2)
        jx[..., 0, 1] = 1.0
        jx[..., 1, 0] = -np.cos(x[..., 0])
        jx[..., 1, 1] = -damping
        return jx, _zeros_like_batch(x, 2, 0)

    def diffusion_jac(x: Array, u: Array) -> tuple[Array, Array]:
        return _zeros_like_batch(np.asarray(x), 2, 1, 2), _zeros_like_batch(np.asarray(x), 2, 1, 0)

    return SdeModel(
        name="pendulum",
        d_x=2,
        d_u=0,
        d_w=1,
        drift=drift,
        diffusion=diffusion,
        control_lower=np.zeros(0),
        control_upper=np.zeros(0),
        drift_jacobian=drift_jac,
        diffusion_jacobian=diffusion_jac,
        position_indices=(0,),
        velocity_indices=(1,),
        params={"noise_var": float(noise_var)},
    )


def double_integrator_model(d: int, sigma: float, u_max: float = 1.0) -> SdeModel:
    """Position/velocity chain in ``d`` dimensions with acceleration control.

    The single noise channel is control-multiplicative: the velocity rows of
    the diffusion column are ``sigma * u``.
    """
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    n = 2 * d

    def drift(x: Array, u: Array) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        vel = np.broadcast_to(x[..., d:], batch + (d,))
        acc = np.broadcast_to(u, batch + (d,))
        return np.concatenate([vel, acc], axis=-1)

    def diffusion(x: Array, u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(np.shape(x)[:-1], u.shape[:-1])
        g = np.zeros(batch + (n, 1))
        g[..., d:, 0] = sigma * u
        return g

    def drift_jac(x: Array, u: Array) -> tuple[Array, Array]:
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        jx = np.zeros(batch + (n, n))
        ju = np.zeros(batch + (n, d))
        for i in range(d):
            jx[..., i, d + i] = 1.0
            ju[..., d + i, i] = 1.0
        return jx, ju

    def diffusion_jac(x: Array, u: Array) -> tuple[Array, Array]:
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        gx = np.zeros(batch + (n, 1, n))
        gu = np.zeros(batch + (n, 1, d))
        for i in range(d):
            gu[..., d + i, 0, i] = sigma
        return gx, gu

    def allocation(x: Array) -> Array:
        return np.broadcast_to(np.eye(d), np.shape(x)[:-1] + (d, d))

    return SdeModel(
        name="double_integrator",
        d_x=n,
        d_u=d,
        d_w=1,
        drift=drift,
        diffusion=diffusion,
        control_lower=-u_max * np.ones(d),
        control_upper=u_max * np.ones(d),
        drift_jacobian=drift_jac,
        diffusion_jacobian=diffusion_jac,
        position_indices=tuple(range(d)),
        velocity_indices=tuple(range(d, n)),
        allocation=allocation,
        params={"d": d, "sigma": float(sigma), "u_max": float(u_max)},
    )


# Body-frame thruster layout: four faces, two thrusters per face, each pair
# offset by +/- arm/2 from the centre so they produce opposite torques.
_FORCE_BODY = np.array(
    [
        [1.0, 1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, -1.0, -1.0],
    ]
)
_TORQUE_SIGN = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
# (i, j) thrusters with exactly opposite force and torque
SPACECRAFT_OPPOSING_PAIRS = ((0, 3), (1, 2), (4, 7), (5, 6))


def thruster_allocation(theta, params: SpacecraftParams) -> np.ndarray:
    """Map from the eight thrust magnitudes to ``(x_ddot, y_ddot, theta_ddot)``.

    Args:
        theta: Heading angle(s) in radians, any shape.
        params: Spacecraft parameters.

    Returns:
        Array of shape ``theta.shape + (3, 8)``.
    """
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (3, 8))
    fx, fy = _FORCE_BODY
    out[..., 0, :] = (c[..., None] * fx - s[..., None] * fy) / params.mass
    out[..., 1, :] = (s[..., None] * fx + c[..., None] * fy) / params.mass
    out[..., 2, :] = 0.5 * params.arm * _TORQUE_SIGN / params.inertia
    return out


def _allocation_dtheta(theta, params: SpacecraftParams) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(theta.shape + (3, 8))
    fx, fy = _FORCE_BODY
    out[..., 0, :] = (-s[..., None] * fx - c[..., None] * fy) / params.mass
    out[..., 1, :] = (c[..., None] * fx - s[..., None] * fy) / params.mass
    return out


def spacecraft3dof_model(params: SpacecraftParams | None = None) -> SdeModel:
    """Planar three-degree-of-freedom free flyer with eight on/off thrusters.

    State ``(x, y, theta, x_dot, y_dot, theta_dot)``; controls are the eight
    thrust magnitudes in ``[0, thrust_max]``.  The single noise channel is
    ``sigma * [0; B(theta) u]``, i.e. a lumped multiplicative actuation error.
    """
    p = params or SpacecraftParams()
    sigma = p.sigma

    def accel(x: Array, u: Array) -> Array:
        b = thruster_allocation(np.asarray(x)[..., 2], p)
        return np.einsum("...ij,...j->...i", b, np.asarray(u, dtype=float))

    def drift(x: Array, u: Array) -> Array:
        x = np.asarray(x, dtype=float)
        a = accel(x, u)
        vel = np.broadcast_to(x[..., 3:], a.shape)
        return np.concatenate([vel, a], axis=-1)

    def diffusion(x: Array, u: Array) -> Array:
        a = accel(x, u)
        g = np.zeros(a.shape[:-1] + (6, 1))
        g[..., 3:, 0] = sigma * a
        return g

    def drift_jac(x: Array, u: Array) -> tuple[Array, Array]:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        b = thruster_allocation(x[..., 2], p)
        db = _allocation_dtheta(x[..., 2], p)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        jx = np.zeros(batch + (6, 6))
        jx[..., 0, 3] = jx[..., 1, 4] = jx[..., 2, 5] = 1.0
        jx[..., 3:, 2] = np.einsum("...ij,...j->...i", db, u)
        ju = np.zeros(batch + (6, 8))
        ju[..., 3:, :] = b
        return jx, ju

    def diffusion_jac(x: Array, u: Array) -> tuple[Array, Array]:
        jx, ju = drift_jac(x, u)
        gx = np.zeros(jx.shape[:-2] + (6, 1, 6))
        gu = np.zeros(ju.shape[:-2] + (6, 1, 8))
        gx[..., 3:, 0, :] = sigma * jx[..., 3:, :]
        gu[..., 3:, 0, :] = sigma * ju[..., 3:, :]
        return gx, gu

    def allocation(x: Array) -> Array:
        return thruster_allocation(np.asarray(x)[..., 2], p)

    return SdeModel(
        name="spacecraft3dof",
        d_x=6,
        d_u=8,
        d_w=1,
        drift=drift,
        diffusion=diffusion,
        control_lower=np.zeros(8),
        control_upper=p.thrust_max * np.ones(8),
        drift_jacobian=drift_jac,
        diffusion_jacobian=diffusion_jac,
        position_indices=(0, 1, 2),
        velocity_indices=(3, 4, 5),
        allocation=allocation,
        opposing_pairs=SPACECRAFT_OPPOSING_PAIRS,
        params={
            "mass": p.mass,
            "inertia": p.inertia,
            "arm": p.arm,
            "sigma": p.sigma,
            "thrust_max": p.thrust_max,
        },
    )


def euler_maruyama_step(model: SdeModel, x, u, dt: float, noise) -> np.ndarray:
    """One step ``x + f(x,u) dt + g(x,u) sqrt(dt) noise`` (batched)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    noise = np.asarray(noise, dtype=float)
    g = model.diffusion(x, u)
    return x + model.drift(x, u) * dt + np.sqrt(dt) * np.einsum("...ij,...j->...i", g, noise)


def euler_step(model: SdeModel, x, u, dt: float) -> np.ndarray:
    """Explicit Euler step of the noise-free ODE ``x' = f(x, u)``."""
    return np.asarray(x, dtype=float) + model.drift(x, u) * dt


def build_model(name: str, params: dict | None = None, sigma: float | None = None) -> SdeModel:
    """Construct a plant from its registry name and parameter map."""
    params = dict(params or {})
    allowed = {
        "pendulum": {"noise_var"},
        "double_integrator": {"d", "sigma", "u_max"},
        "spacecraft3dof": {"mass", "inertia", "arm", "sigma", "thrust_max"},
    }
    if name in allowed:
        unknown = set(params) - allowed[name]
        if unknown:
            raise ValueError(f"unknown {name} parameters: {sorted(unknown)}")
    if name == "pendulum":
        return pendulum_model(float(params.get("noise_var", 0.001)))
    if name == "double_integrator":
        s = float(sigma if sigma is not None else params.get("sigma", 0.0))
        return double_integrator_model(int(params.get("d", 2)), s, float(params.get("u_max", 1.0)))
    if name == "spacecraft3dof":
        if sigma is not None:
            params["sigma"] = float(sigma)
        return spacecraft3dof_model(SpacecraftParams(**{k: float(v) for k, v in params.items()}))
    raise ValueError(f"unknown model '{name}'")


MODEL_NAMES = ("pendulum", "double_integrator", "spacecraft3dof")
