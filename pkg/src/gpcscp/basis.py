"""Multivariate probabilists' Hermite basis and Gauss-Hermite quadrature.

The basis is the total-degree truncation of tensor products of the
univariate probabilists' Hermite polynomials ``He_0 = 1``, ``He_1 = xi``,
``He_2 = xi**2 - 1``, ... which are orthogonal under the standard normal
density.  Multi-indices are stored in graded order: total degree first,
then reverse-lexicographic within a degree, so the first-order terms come
out in germ order ``(1,0,..), (0,1,..), ...``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import eigh_tridiagonal

DEFAULT_BASIS_CAP = 10_000


class BasisSizeError(ValueError):
    """Raised when the truncated basis would exceed the size cap."""


@dataclass(frozen=True)
class HermiteBasis:
    """Total-degree truncated multivariate Hermite basis.

    Attributes:
        p_gpc: Maximum total polynomial degree.
        d_xi: Number of independent standard-normal germs.
        indices: Integer array of shape ``(n_terms, d_xi)`` holding the
            multi-index of every basis polynomial.
        norms_sq: ``E[phi_j**2]`` for every basis polynomial.
    """

    p_gpc: int
    d_xi: int
    indices: np.ndarray
    norms_sq: np.ndarray

    @property
    def n_terms(self) -> int:
        """Number of basis polynomials (``l + 1``)."""
        return int(self.indices.shape[0])

    def index_of(self, multi_index) -> int:
        """Position of ``multi_index`` in the basis ordering."""
        target = tuple(int(a) for a in multi_index)
        for j, row in enumerate(self.indices):
            if tuple(int(a) for a in row) == target:
                return j
        raise KeyError(f"multi-index {target} not in basis")

    def first_order_index(self, germ: int) -> int:
        """Position of the linear polynomial ``xi_germ``."""
        if not 0 <= germ < self.d_xi:
            raise IndexError(f"germ {germ} out of range for d_xi={self.d_xi}")
        alpha = [0] * self.d_xi
        alpha[germ] = 1
        return self.index_of(alpha)


class QuadratureRule(NamedTuple):
    """Tensorized Gauss-Hermite rule for the standard normal measure.

    Attributes:
        nodes: Array of shape ``(n_nodes, d_xi)``.
        weights: Positive weights of shape ``(n_nodes,)`` summing to one.
    """

    nodes: np.ndarray
    weights: np.ndarray


def _graded_indices(p_gpc: int, d_xi: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for degree in range(p_gpc + 1):
        level = [
            alpha
            for alpha in itertools.product(range(degree + 1), repeat=d_xi)
            if sum(alpha) == degree
        ]
        level.sort(reverse=True)
        out.extend(level)
    return out


def build_basis(p_gpc: int, d_xi: int, cap: int = DEFAULT_BASIS_CAP) -> HermiteBasis:
    """Build the total-degree Hermite basis.

    Args:
        p_gpc: Maximum total degree, ``>= 0``.
        d_xi: Germ dimension, ``>= 1``.
        cap: Largest admissible number of basis terms.

    Returns:
        The basis with ``binomial(p_gpc + d_xi, d_xi)`` terms.

    Raises:
        ValueError: On negative degree or non-positive dimension.
        BasisSizeError: If the number of terms exceeds ``cap``.
    """
    if int(p_gpc) != p_gpc or p_gpc < 0:
        raise ValueError(f"p_gpc must be a non-negative integer, got {p_gpc}")
    if int(d_xi) != d_xi or d_xi < 1:
        raise ValueError(f"d_xi must be a positive integer, got {d_xi}")
    p_gpc, d_xi = int(p_gpc), int(d_xi)
    n_terms = math.comb(p_gpc + d_xi, d_xi)
    if n_terms > cap:
        raise BasisSizeError(
            f"basis with p_gpc={p_gpc}, d_xi={d_xi} has {n_terms} terms (cap {cap})"
        )
    indices = np.array(_graded_indices(p_gpc, d_xi), dtype=np.int64).reshape(n_terms, d_xi)
    norms = np.array(
        [math.prod(math.factorial(int(a)) for a in row) for row in indices], dtype=float
    )
    indices.setflags(write=False)
    norms.setflags(write=False)
    return HermiteBasis(p_gpc=p_gpc, d_xi=d_xi, indices=indices, norms_sq=norms)


def hermite_e_table(xi: np.ndarray, max_degree: int) -> np.ndarray:
    """Evaluate ``He_0 .. He_max_degree`` by the three-term recurrence.

    Args:
        xi: Array of evaluation points of any shape.
        max_degree: Highest degree to evaluate.

    Returns:
        Array of shape ``(max_degree + 1,) + xi.shape``.
    """
    xi = np.asarray(xi, dtype=float)
    table = np.empty((max_degree + 1,) + xi.shape)
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = xi
    for n in range(1, max_degree):
        table[n + 1] = xi * table[n] - n * table[n - 1]
    return table


def eval_basis_many(basis: HermiteBasis, xi: np.ndarray) -> np.ndarray:
    """Evaluate every basis polynomial at a batch of germ points.

    Args:
        basis: The Hermite basis.
        xi: Array of shape ``(n_points, d_xi)``.

    Returns:
        Array of shape ``(n_points, n_terms)``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if xi.shape[1] != basis.d_xi:
        raise ValueError(f"expected germ dimension {basis.d_xi}, got {xi.shape[1]}")
    table = hermite_e_table(xi, basis.p_gpc)  # (P+1, n_points, d_xi)
    out = np.ones((xi.shape[0], basis.n_terms))
    for dim in range(basis.d_xi):
        out *= table[basis.indices[:, dim], :, dim].T
    return out


def eval_basis(basis: HermiteBasis, xi) -> np.ndarray:
    """Evaluate the basis vector ``[phi_0(xi), ..., phi_l(xi)]`` at one point."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if not np.all(np.isfinite(xi)):
        raise ValueError("xi must be finite")
    return eval_basis_many(basis, xi[None, :])[0]


def norm_sq(basis: HermiteBasis, j: int) -> float:
    """Return ``E[phi_j**2]``, the product of factorials of the multi-index."""
    if not 0 <= j < basis.n_terms:
        raise IndexError(f"basis index {j} out of range [0, {basis.n_terms})")
    return float(basis.norms_sq[j])


def gauss_hermite_1d(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Univariate Gauss-Hermite rule for the standard normal density.

    Nodes are eigenvalues of the symmetric Jacobi matrix of the
    probabilists' recurrence (zero diagonal, off-diagonal ``sqrt(k)``).
    Weights use the closed form ``(m-1)! / (m He_{m-1}(x)^2)``, which is
    more accurate in the tails than squared eigenvector components.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"number of nodes must be a positive integer, got {m}")
    m = int(m)
    if m == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, m, dtype=float))
    nodes = eigh_tridiagonal(np.zeros(m), off, eigvals_only=True)
    nodes = 0.5 * (nodes - nodes[::-1])  # exact symmetry
    he = hermite_e_table(nodes, m)
    # one Newton polish on He_m using He_m' = m He_{m-1}
    nodes = nodes - he[m] / (m * he[m - 1])
    nodes = 0.5 * (nodes - nodes[::-1])
    if m % 2 == 1:
        nodes[m // 2] = 0.0
    he_prev = hermite_e_table(nodes, m - 1)[m - 1]
    log_w = math.lgamma(m) - math.log(m) - 2.0 * np.log(np.abs(he_prev))
    weights = np.exp(log_w)
    weights /= weights.sum()
    return nodes, weights


def gauss_hermite(m: int, d_xi: int) -> QuadratureRule:
    """Tensorized Gauss-Hermite rule with ``m`` nodes per dimension."""
    if int(d_xi) != d_xi or d_xi < 1:
        raise ValueError(f"d_xi must be a positive integer, got {d_xi}")
    x1, w1 = gauss_hermite_1d(m)
    grids = np.meshgrid(*([x1] * int(d_xi)), indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    wgrids = np.meshgrid(*([w1] * int(d_xi)), indexing="ij")
    weights = np.prod(np.stack([g.reshape(-1) for g in wgrids], axis=1), axis=1)
    return QuadratureRule(nodes=nodes, weights=weights)


def default_rule(basis: HermiteBasis, extra: int = 3) -> QuadratureRule:
    """Rule with ``p_gpc + extra`` nodes per dimension."""
    return gauss_hermite(basis.p_gpc + extra, basis.d_xi)


def expect(
    basis: HermiteBasis,
    rule: QuadratureRule,
    integrand: Callable[[np.ndarray], float],
) -> float:
    """Approximate ``E[integrand(xi)]`` with the quadrature rule.

    The integrand receives one germ point (a ``d_xi`` vector) per call.
    """
    if rule.nodes.shape[1] != basis.d_xi:
        raise ValueError("quadrature dimension does not match the basis")
    values = np.array([float(integrand(node)) for node in rule.nodes])
    return float(np.dot(rule.weights, values))


def gram_matrix(basis: HermiteBasis, rule: QuadratureRule) -> np.ndarray:
    """Quadrature approximation of ``E[phi_i phi_j]`` for all pairs."""
    phi = eval_basis_many(basis, rule.nodes)
    return (phi * rule.weights[:, None]).T @ phi
