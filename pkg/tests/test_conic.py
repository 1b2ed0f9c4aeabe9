"""Tests for the interior-point cone solver."""

import itertools

import numpy as np
import pytest

from gpcscp import conic
from gpcscp.conic import ConeBlock, ConeKind, ConeProgram, ProgramBuilder, Status, certify, epigraph_soc, solve

cp = pytest.importorskip("cvxpy")

ORTH, SOC = ConeKind.ORTHANT, ConeKind.SOC


def random_lp(seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``min c^T x`` over a bounded polytope ``A x <= b`` containing the origin."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    m = int(rng.integers(n + 1, 7))
    A = np.vstack([rng.standard_normal((m, n)), np.eye(n), -np.eye(n)])
    b = np.concatenate([rng.uniform(0.5, 2.0, m), 5.0 * np.ones(2 * n)])
    c = rng.standard_normal(n)
    return c, A, b


def vertex_optimum(c, A, b) -> float:
    """Brute force over every basis of ``n`` active constraints."""
    n = c.size
    best = np.inf
    for rows in itertools.combinations(range(A.shape[0]), n):
        sub = A[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, b[list(rows)])
        if np.all(A @ x <= b + 1e-9):
            best = min(best, float(c @ x))
    return best


def random_socp(seed: int) -> ConeProgram:
    """Bounded SOCP with a strictly feasible point, equalities and both cone kinds."""
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(3, 7))
    x0 = rng.standard_normal(n)
    bld = ProgramBuilder()
    x = bld.add_variables(n)
    bld.add_cost(x, rng.standard_normal(n))
    # box keeps the problem bounded
    bld.add_nonneg(np.vstack([np.eye(n), -np.eye(n)]), x, np.concatenate([x0 + 3.0, 3.0 - x0]))
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.integers(2, 5))
        F = rng.standard_normal((k - 1, n))
        g = rng.standard_normal(n)
        # || F x + f || <= g^T x + d with slack at x0
        f = rng.standard_normal(k - 1)
        d = float(np.linalg.norm(F @ x0 + f) - g @ x0 + rng.uniform(0.5, 2.0))
        G = np.vstack([-g, -F])
        h = np.concatenate([[d], f])
        bld.add_soc_terms([(G, x)], h)
    if rng.random() < 0.5:
        row = rng.standard_normal((1, n))
        bld.add_equality(row, x, row @ x0)
    return bld.build()


def cvxpy_optimum(p: ConeProgram) -> float:
    x = cp.Variable(p.n)
    cons = []
    if p.p:
        cons.append(p.eq_matrix.toarray() @ x == p.eq_rhs)
    G = p.G.toarray()
    start = 0
    for blk in p.cones:
        rows = slice(start, start + blk.size)
        s = p.h[rows] - G[rows] @ x
        cons.append(s >= 0 if blk.kind == ORTH else cp.SOC(s[0], s[1:]))
        start += blk.size
    prob = cp.Problem(cp.Minimize(p.cost @ x), cons)
    prob.solve(solver=cp.CLARABEL)
    return float(prob.value)


class TestProgram:
    def test_block_sizes_checked(self):
        with pytest.raises(ValueError):
            ConeProgram([1.0], G=[[1.0]], h=[1.0], cones=[(ORTH, 2)])

    def test_soc_block_size(self):
        with pytest.raises(ValueError):
            ConeBlock(SOC, 1)

    def test_dump_layout(self):
        p = ConeProgram([1.0, 0.0], [[1.0, 1.0]], [2.0], [[-1.0, 0.0]], [0.0], [(ORTH, 1)])
        text = p.dump()
        assert text.startswith("variables 2\n")
        assert "equalities 1" in text and "block 0 orthant size 1" in text

    def test_nonpositive_tol(self):
        with pytest.raises(ValueError):
            solve(ConeProgram([1.0], G=[[-1.0]], h=[-1.0], cones=[(ORTH, 1)]), tol=0.0)


class TestSmallInstances:
    def test_lower_bound(self):
        sol = solve(ConeProgram([1.0], G=[[-1.0]], h=[-1.0], cones=[(ORTH, 1)]))
        assert sol.status == Status.OPTIMAL
        assert sol.x[0] == pytest.approx(1.0, abs=1e-7)

    def test_euclidean_norm(self):
        # variables (t, x1, x2);  ||(x1, x2)|| <= t, x = (3, 4)
        G = -np.eye(3)
        p = ConeProgram([1.0, 0.0, 0.0], [[0, 1, 0], [0, 0, 1]], [3.0, 4.0], G, np.zeros(3), [(SOC, 3)])
        sol = solve(p)
        assert sol.status == Status.OPTIMAL
        assert sol.x[0] == pytest.approx(5.0, abs=1e-7)
        assert certify(p, sol, 1e-8)["ok"]

    def test_primal_infeasible(self):
        p = ConeProgram([1.0], G=[[-1.0], [1.0]], h=[-1.0, 0.0], cones=[(ORTH, 2)])
        assert solve(p).status == Status.PRIMAL_INFEASIBLE

    def test_dual_infeasible(self):
        p = ConeProgram([1.0], G=[[1.0]], h=[1.0], cones=[(ORTH, 1)])
        assert solve(p).status == Status.DUAL_INFEASIBLE

    def test_iteration_cap(self):
        c, A, b = random_lp(0)
        p = ConeProgram(c, G=A, h=b, cones=[(ORTH, b.size)])
        sol = solve(p, max_iter=1)
        assert sol.status == Status.MAX_ITERATIONS

    def test_equality_only(self):
        p = ConeProgram([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [1.0, 2.0])
        sol = solve(p)
        assert sol.status == Status.OPTIMAL
        np.testing.assert_allclose(sol.x, [1.0, 2.0], atol=1e-8)


class TestLpBattery:
    @pytest.mark.parametrize("seed", range(50))
    def test_vertex_enumeration(self, seed):
        c, A, b = random_lp(seed)
        p = ConeProgram(c, G=A, h=b, cones=[(ORTH, b.size)])
        sol = solve(p)
        assert sol.status == Status.OPTIMAL
        assert float(c @ sol.x) == pytest.approx(vertex_optimum(c, A, b), abs=1e-7)


class TestLpScaling:
    @pytest.mark.parametrize("seed", range(50))
    def test_cost_scaling_keeps_argmin(self, seed):
        c, A, b = random_lp(seed)
        base = solve(ConeProgram(c, G=A, h=b, cones=[(ORTH, b.size)]))
        scaled = solve(ConeProgram(1e3 * c, G=A, h=b, cones=[(ORTH, b.size)]))
        np.testing.assert_allclose(scaled.x, base.x, atol=1e-6)


class TestSocpBattery:
    @pytest.mark.parametrize("seed", range(20))
    def test_kkt_certificate(self, seed):
        p = random_socp(seed)
        sol = solve(p, tol=1e-8)
        assert sol.status == Status.OPTIMAL
        report = certify(p, sol, 1e-8)
        assert report["ok"], report

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_reference_solver(self, seed):
        p = random_socp(seed)
        sol = solve(p)
        assert sol.primal_objective == pytest.approx(cvxpy_optimum(p), abs=1e-6, rel=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_cost_scaling_keeps_objective(self, seed):
        p = random_socp(seed)
        scaled = ConeProgram(1e3 * p.cost, p.eq_matrix, p.eq_rhs, p.G, p.h, p.cones)
        a, b = solve(p), solve(scaled)
        assert b.primal_objective / 1e3 == pytest.approx(a.primal_objective, rel=1e-8, abs=1e-8)
        np.testing.assert_allclose(b.x, a.x, atol=1e-3)

    @pytest.mark.xfail(
        strict=False,
        reason="on curved cone faces the argmin is resolved only to about the square root of the gap tolerance",
    )
    @pytest.mark.parametrize("seed", range(20))
    def test_cost_scaling_keeps_argmin(self, seed):
        p = random_socp(seed)
        scaled = ConeProgram(1e3 * p.cost, p.eq_matrix, p.eq_rhs, p.G, p.h, p.cones)
        np.testing.assert_allclose(solve(scaled).x, solve(p).x, atol=1e-6)

    def test_deterministic(self):
        p = random_socp(3)
        a, b = solve(p), solve(p)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.iterations == b.iterations


class TestEpigraph:
    def test_rotated_square(self):
        # min x^2 s.t. x >= 2
        bld = ProgramBuilder()
        x = bld.add_variables(1)
        bld.add_nonneg([[-1.0]], x, [-2.0])
        t = epigraph_soc(bld, [[1.0]], x, rotated=True)
        sol = solve(bld.build())
        assert sol.x[x[0]] == pytest.approx(2.0, abs=1e-6)
        assert sol.x[t] == pytest.approx(4.0, abs=1e-6)

    def test_norm(self):
        # min |x| s.t. x >= 2
        bld = ProgramBuilder()
        x = bld.add_variables(1)
        bld.add_nonneg([[-1.0]], x, [-2.0])
        t = epigraph_soc(bld, [[1.0]], x)
        sol = solve(bld.build())
        assert sol.x[x[0]] == pytest.approx(2.0, abs=1e-6)
        assert sol.x[t] == pytest.approx(2.0, abs=1e-6)

    def test_zero_factor(self):
        bld = ProgramBuilder()
        x = bld.add_variables(2)
        assert epigraph_soc(bld, np.zeros((2, 2)), x) is None
        assert bld.n == 2

    @pytest.mark.parametrize("seed", range(10))
    def test_objective_equals_quadratic(self, seed):
        rng = np.random.default_rng(seed)
        n = 3
        F = rng.standard_normal((n, n))
        shift = rng.standard_normal(n)
        c = rng.standard_normal(n)
        bld = ProgramBuilder()
        x = bld.add_variables(n)
        bld.add_cost(x, c)
        t = epigraph_soc(bld, F, x, shift, rotated=True)
        sol = solve(bld.build())
        z = sol.x[x]
        direct = float(np.sum((F @ (z - shift)) ** 2))
        assert sol.x[t] == pytest.approx(direct, abs=1e-7, rel=1e-7)
        # unconstrained quadratic: optimal value against the closed-form minimizer
        z_star = shift - np.linalg.solve(2 * F.T @ F, c)
        best = float(c @ z_star + np.sum((F @ (z_star - shift)) ** 2))
        assert sol.primal_objective == pytest.approx(best, abs=1e-7, rel=1e-7)


class TestBuilder:
    def test_orthant_rows_first(self):
        bld = ProgramBuilder()
        x = bld.add_variables(2)
        bld.add_soc_terms([(-np.eye(2), x)], np.zeros(2))
        bld.add_nonneg([[1.0, 0.0]], x, [1.0])
        p = bld.build()
        assert [b.kind for b in p.cones] == [ORTH, SOC]
        np.testing.assert_array_equal(p.G.toarray()[0], [1.0, 0.0])

    def test_equality_terms(self):
        bld = ProgramBuilder()
        x = bld.add_variables(1)
        y = bld.add_variables(1)
        bld.add_equality_terms([([[1.0]], x), ([[2.0]], y)], [3.0])
        p = bld.build()
        np.testing.assert_array_equal(p.eq_matrix.toarray(), [[1.0, 2.0]])
        assert conic.DEFAULT_TOL == 1e-8 and conic.DEFAULT_MAX_ITER == 100
