"""Primal-dual interior-point solver for linear and second-order cone programs.

Standard form::

    minimize    c^T x
    subject to  A x = b
                G x + s = h,   s in K

where ``K`` is a product of nonnegative orthants and second-order cones
``{(t, v) : ||v||_2 <= t}``.  The dual is

    maximize    -b^T y - h^T z
    subject to  A^T y + G^T z + c = 0,   z in K.

The solver runs a homogeneous self-dual embedding with Nesterov-Todd
scaling and a Mehrotra predictor-corrector step, so infeasible and
unbounded problems terminate with a certificate instead of diverging.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
KKT_REGULARIZATION = 1e-9
STEP_FRACTION = 0.99
DENSE_KKT_LIMIT = 400


class ConeKind(str, enum.Enum):
    ORTHANT = "orthant"
    SOC = "soc"


@dataclass(frozen=True)
class ConeBlock:
    kind: ConeKind
    size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ConeKind(self.kind))
        if self.kind == ConeKind.SOC and self.size < 2:
            raise ValueError("second-order cone blocks need size >= 2")
        if self.size < 1:
            raise ValueError("cone blocks need positive size")


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    MAX_ITERATIONS = "MaxIterations"


def _as_csc(mat, shape: tuple[int, int]) -> sp.csc_matrix:
    if mat is None:
        return sp.csc_matrix(shape)
    if sp.issparse(mat):
        out = sp.csc_matrix(mat, dtype=float)
    else:
        out = sp.csc_matrix(np.asarray(mat, dtype=float).reshape(shape))
    if out.shape != shape:
        raise ValueError(f"matrix has shape {out.shape}, expected {shape}")
    return out


class ConeProgram:
    """A conic program in standard form.

    Args:
        cost: Objective vector ``c`` of length ``n``.
        eq_matrix, eq_rhs: Equality constraints ``A x = b`` (may be empty).
        G, h: Cone constraint data with ``G x + s = h``.
        cones: Ordered blocks partitioning ``s``.
    """

    def __init__(
        self,
        cost,
        eq_matrix=None,
        eq_rhs=None,
        G=None,
        h=None,
        cones: Sequence[ConeBlock | tuple] = (),
    ) -> None:
        self.cost = np.asarray(cost, dtype=float).reshape(-1)
        self.n = self.cost.size
        self.eq_rhs = np.zeros(0) if eq_rhs is None else np.asarray(eq_rhs, dtype=float).reshape(-1)
        self.eq_matrix = _as_csc(eq_matrix, (self.eq_rhs.size, self.n))
        self.h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
        self.G = _as_csc(G, (self.h.size, self.n))
        self.cones = tuple(c if isinstance(c, ConeBlock) else ConeBlock(*c) for c in cones)
        if sum(c.size for c in self.cones) != self.h.size:
            raise ValueError("cone block sizes must sum to the number of rows of G")
        self.meta: dict = {}

    @property
    def m(self) -> int:
        return self.h.size

    @property
    def p(self) -> int:
        return self.eq_rhs.size

    def dump(self) -> str:
        """Human-readable listing of the program in standard form."""
        out = io.StringIO()
        out.write(f"variables {self.n}\n")
        out.write("cost " + " ".join(f"{v:.17g}" for v in self.cost) + "\n")
        out.write(f"equalities {self.p}\n")
        A = self.eq_matrix.tocsr()
        for i in range(self.p):
            row = A.getrow(i)
            terms = " ".join(f"{j}:{v:.17g}" for j, v in zip(row.indices, row.data))
            out.write(f"  eq {i}: {terms} = {self.eq_rhs[i]:.17g}\n")
        out.write(f"cone rows {self.m}\n")
        G = self.G.tocsr()
        start = 0
        for bi, blk in enumerate(self.cones):
            out.write(f"  block {bi} {blk.kind.value} size {blk.size}\n")
            for i in range(start, start + blk.size):
                row = G.getrow(i)
                terms = " ".join(f"{j}:{v:.17g}" for j, v in zip(row.indices, row.data))
                out.write(f"    s{i} = {self.h[i]:.17g} - ({terms})\n")
            start += blk.size
        return out.getvalue()


@dataclass
class ConeSolution:
    """Solver output.  ``primal`` is ``x``; ``dual`` holds ``y`` then ``z``."""

    status: Status
    primal: np.ndarray
    dual: np.ndarray
    slack: np.ndarray
    gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    primal_objective: float = float("nan")
    dual_objective: float = float("nan")
    history: list = field(default_factory=list)

    @property
    def x(self) -> np.ndarray:
        return self.primal


class _Cones:
    """Vectorized cone algebra over a block partition."""

    def __init__(self, blocks: Sequence[ConeBlock]) -> None:
        orth: list[int] = []
        socs: list[tuple[int, int]] = []
        start = 0
        for blk in blocks:
            if blk.kind == ConeKind.ORTHANT:
                orth.extend(range(start, start + blk.size))
            else:
                socs.append((start, blk.size))
            start += blk.size
        self.m = start
        self.orth = np.array(orth, dtype=np.int64)
        self.socs = socs
        self.degree = len(orth) + len(socs)
        self.e = np.zeros(start)
        self.e[self.orth] = 1.0
        for st, _ in socs:
            self.e[st] = 1.0

    def inner_min_eig(self, u: np.ndarray) -> float:
        vals = [np.min(u[self.orth])] if self.orth.size else []
        for st, q in self.socs:
            vals.append(u[st] - np.linalg.norm(u[st + 1 : st + q]))
        return float(min(vals)) if vals else 1.0

    def product(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        o = self.orth
        out[o] = u[o] * v[o]
        for st, q in self.socs:
            u0, u1 = u[st], u[st + 1 : st + q]
            v0, v1 = v[st], v[st + 1 : st + q]
            out[st] = u0 * v0 + u1 @ v1
            out[st + 1 : st + q] = u0 * v1 + v0 * u1
        return out

    def divide(self, lam: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Solve ``lam o x = r`` for ``x``.

        Near the cone boundary this can produce non-finite entries; the caller
        rejects non-finite iterates, so floating-point warnings are silenced.
        """
        out = np.empty_like(r)
        o = self.orth
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out[o] = r[o] / lam[o]
            for st, q in self.socs:
                l0, l1 = lam[st], lam[st + 1 : st + q]
                r0, r1 = r[st], r[st + 1 : st + q]
                x0 = (l0 * r0 - l1 @ r1) / (l0 * l0 - l1 @ l1)
                out[st] = x0
                out[st + 1 : st + q] = (r1 - x0 * l1) / l0
        return out

    def max_step(self, u: np.ndarray, d: np.ndarray) -> float:
        """Largest ``alpha`` with ``u + alpha d`` in the cone (``u`` interior)."""
        alpha = np.inf
        o = self.orth
        if o.size:
            neg = d[o] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-u[o][neg] / d[o][neg])))
        for st, q in self.socs:
            u0, u1 = u[st], u[st + 1 : st + q]
            d0, d1 = d[st], d[st + 1 : st + q]
            nrm = np.sqrt(max(u0 * u0 - u1 @ u1, 1e-300))
            w0, w1 = u0 / nrm, u1 / nrm
            # Lorentz boost sending u/nrm to e, applied to d/nrm
            t = w1 @ d1
            dd0 = (w0 * d0 - t) / nrm
            dd1 = (d1 + (t / (1.0 + w0) - d0) * w1) / nrm
            denom = np.linalg.norm(dd1) - dd0
            if denom > 0:
                alpha = min(alpha, 1.0 / denom)
        return alpha


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lambda``."""

    def __init__(self, cones: _Cones, s: np.ndarray, z: np.ndarray) -> None:
        self.cones = cones
        o = cones.orth
        self.d = np.sqrt(s[o] / z[o])
        self.soc: list[tuple[float, np.ndarray]] = []
        for st, q in cones.socs:
            sb, zb = s[st : st + q], z[st : st + q]
            sn = np.sqrt(max(sb[0] ** 2 - sb[1:] @ sb[1:], 1e-300))
            zn = np.sqrt(max(zb[0] ** 2 - zb[1:] @ zb[1:], 1e-300))
            sbar, zbar = sb / sn, zb / zn
            gamma = np.sqrt(max((1.0 + sbar @ zbar) / 2.0, 1e-300))
            w = np.empty(q)
            w[0] = (sbar[0] + zbar[0]) / (2.0 * gamma)
            w[1:] = (sbar[1:] - zbar[1:]) / (2.0 * gamma)
            # renormalize so that w^T J w = 1 exactly
            w[0] = np.sqrt(1.0 + w[1:] @ w[1:])
            self.soc.append((float(np.sqrt(sn / zn)), w))

    def apply(self, v: np.ndarray, inverse: bool = False) -> np.ndarray:
        out = np.empty_like(v)
        o = self.cones.orth
        out[o] = v[o] / self.d if inverse else v[o] * self.d
        for (st, q), (eta, w) in zip(self.cones.socs, self.soc):
            v0, v1 = v[st], v[st + 1 : st + q]
            w0, w1 = w[0], w[1:]
            t = w1 @ v1
            if inverse:
                out[st] = (w0 * v0 - t) / eta
                out[st + 1 : st + q] = (v1 + (t / (1.0 + w0) - v0) * w1) / eta
            else:
                out[st] = eta * (w0 * v0 + t)
                out[st + 1 : st + q] = eta * (v1 + (t / (1.0 + w0) + v0) * w1)
        return out

    def squared_blocks(self) -> list[np.ndarray]:
        mats = []
        for eta, w in self.soc:
            q = w.size
            H = np.empty((q, q))
            H[0, 0] = w[0]
            H[0, 1:] = H[1:, 0] = w[1:]
            H[1:, 1:] = np.eye(q - 1) + np.outer(w[1:], w[1:]) / (1.0 + w[0])
            mats.append(eta * eta * (H @ H))
        return mats

    def squared_sparse(self) -> sp.csc_matrix:
        m = self.cones.m
        rows = [self.cones.orth]
        cols = [self.cones.orth]
        vals = [self.d * self.d]
        for (st, q), blk in zip(self.cones.socs, self.squared_blocks()):
            r, c = np.meshgrid(np.arange(st, st + q), np.arange(st, st + q), indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(blk.ravel())
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
        )


class _KKT:
    """Factorization of ``[[0, A^T, G^T], [A, 0, 0], [G, 0, -W^2]]``."""

    def __init__(self, prog: ConeProgram, w2: sp.csc_matrix, reg: float, pivot: bool = False) -> None:
        n, p, m = prog.n, prog.p, prog.m
        self.n, self.p, self.m = n, p, m
        A, G = prog.eq_matrix, prog.G
        self.K0 = sp.bmat(
            [
                [sp.csc_matrix((n, n)), A.T, G.T],
                [A, sp.csc_matrix((p, p)), sp.csc_matrix((p, m))],
                [G, sp.csc_matrix((m, p)), -w2],
            ],
            format="csc",
        )
        diag = np.concatenate([reg * np.ones(n), -reg * np.ones(p), np.zeros(m)])
        self.K = (self.K0 + sp.diags(diag)).tocsc()
        self.dense = n + p + m <= DENSE_KKT_LIMIT
        self.pivot = pivot
        self._factor()

    def _factor(self) -> None:
        if self.dense:
            self.lu = sla.lu_factor(self.K.toarray(), check_finite=False)
        elif self.pivot:
            self.lu = spla.splu(self.K, permc_spec="COLAMD", diag_pivot_thresh=0.5)
        else:
            # symmetric structure: fill-reducing ordering on A + A^T, diagonal pivots
            self.lu = spla.splu(
                self.K,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )

    def _raw(self, rhs: np.ndarray) -> np.ndarray:
        if self.dense:
            return sla.lu_solve(self.lu, rhs, check_finite=False)
        return self.lu.solve(rhs)

    def _refined(self, rhs: np.ndarray, refine: int) -> tuple[np.ndarray, float]:
        sol = self._raw(rhs)
        scale = max(1.0, np.linalg.norm(rhs, np.inf))
        err = np.inf
        for _ in range(refine + 1):
            res = rhs - self.K0 @ sol
            err = np.linalg.norm(res, np.inf) / scale
            if not np.isfinite(err) or err <= 1e-14:
                break
            sol = sol + self._raw(res)
        return sol, err

    def solve(self, r1, r2, r3, refine: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rhs = np.concatenate([r1, r2, r3])
        sol, err = self._refined(rhs, refine)
        if not self.dense and not self.pivot and not err <= 1e-9:
            # diagonal pivoting lost accuracy; switch to threshold pivoting
            self.pivot = True
            self._factor()
            sol, err = self._refined(rhs, refine)
        n, p = self.n, self.p
        return sol[:n], sol[n : n + p], sol[n + p :]


def _safe_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v)) if v.size else 0.0


def solve(
    p: ConeProgram,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    reg: float = KKT_REGULARIZATION,
) -> ConeSolution:
    """Solve a cone program with a homogeneous primal-dual interior-point method.

    Args:
        p: Program in standard form.
        tol: Tolerance on relative residuals, gap and infeasibility certificates.
        max_iter: Iteration cap.
        reg: Static regularization added to the KKT diagonal.

    Returns:
        A :class:`ConeSolution`.  For ``Optimal`` the primal/dual residuals
        are at most ``tol`` and the gap is at most ``tol * max(1, |c^T x|)``.
        For infeasibility statuses ``primal``/``dual`` hold the normalized
        certificate.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    cones = _Cones(p.cones)
    n, m, neq = p.n, p.m, p.p
    c, b, h = p.cost, p.eq_rhs, p.h
    A, G = p.eq_matrix, p.G
    AT, GT = A.T.tocsc(), G.T.tocsc()
    e = cones.e
    hist: list[dict] = []

    def fail(status: Status, x, y, z, s, it, gap=np.inf, pres=np.inf, dres=np.inf) -> ConeSolution:
        return ConeSolution(status, x, np.concatenate([y, z]), s, gap, pres, dres, it, history=hist)

    if m == 0 and neq == 0:
        if np.any(c != 0):
            return fail(Status.DUAL_INFEASIBLE, -c / np.linalg.norm(c), np.zeros(0), np.zeros(0), np.zeros(0), 0)
        return ConeSolution(Status.OPTIMAL, np.zeros(n), np.zeros(0), np.zeros(0), 0.0, 0.0, 0.0, 0, 0.0, 0.0)

    # initial point from two least-squares problems with W = I
    try:
        kkt = _KKT(p, sp.identity(m, format="csc"), reg)
    except RuntimeError:
        return fail(Status.MAX_ITERATIONS, np.zeros(n), np.zeros(neq), np.zeros(m), np.zeros(m), 0)
    x, _, zt = kkt.solve(np.zeros(n), b, h)
    pivot = kkt.pivot
    s = -zt
    _, y, z = kkt.solve(-c, np.zeros(neq), np.zeros(m))
    for vec in (s, z):
        t = -cones.inner_min_eig(vec)
        if m and t >= -1e-8 * max(_safe_norm(vec), 1.0):
            vec += (1.0 + t) * e
    tau, kappa = 1.0, 1.0

    bnorm = max(1.0, _safe_norm(b))
    hnorm = max(1.0, _safe_norm(h))
    cnorm = max(1.0, _safe_norm(c))

    for it in range(max_iter + 1):
        hrx = AT @ y + GT @ z
        hry = A @ x
        hrz = G @ x + s
        rx = hrx + c * tau
        ry = b * tau - hry
        rz = hrz - h * tau
        cx = float(c @ x)
        by_hz = float(b @ y + h @ z)
        rt = kappa + cx + by_hz
        gap_raw = float(s @ z)
        mu = (gap_raw + tau * kappa) / (cones.degree + 1)

        pres = max(_safe_norm(ry) / tau / bnorm, _safe_norm(rz) / tau / hnorm)
        dres = _safe_norm(rx) / tau / cnorm
        pcost = cx / tau
        dcost = -by_hz / tau
        gap = gap_raw / tau**2
        hist.append({"iter": it, "pcost": pcost, "dcost": dcost, "gap": gap, "pres": pres, "dres": dres})

        if pres <= tol and dres <= tol and gap <= tol * max(1.0, min(abs(pcost), abs(dcost))):
            return ConeSolution(
                Status.OPTIMAL, x / tau, np.concatenate([y, z]) / tau, s / tau,
                gap, pres, dres, it, pcost, dcost, hist,
            )
        if by_hz < 0:
            pinf = _safe_norm(hrx) / cnorm / (-by_hz)
            if pinf <= tol:
                scale = -by_hz
                return fail(Status.PRIMAL_INFEASIBLE, np.full(n, np.nan), y / scale, z / scale, s, it, gap, pres, dres)
        if cx < 0:
            dinf = max(_safe_norm(hry) / bnorm, _safe_norm(hrz) / hnorm) / (-cx)
            if dinf <= tol:
                scale = -cx
                return fail(Status.DUAL_INFEASIBLE, x / scale, np.zeros(neq), np.zeros(m), s / scale, it, gap, pres, dres)
        if it == max_iter:
            break

        scaling = _Scaling(cones, s, z)
        lam = scaling.apply(z)
        try:
            kkt = _KKT(p, scaling.squared_sparse(), reg, pivot=pivot)
        except RuntimeError:
            break
        x1, y1, z1 = kkt.solve(-c, b, h)
        pivot = kkt.pivot
        denom_base = float(c @ x1 + b @ y1 + h @ z1)

        def newton(r_c: np.ndarray, r_tau: float, eta: float):
            u = cones.divide(lam, r_c)
            wu = scaling.apply(u)
            x0, y0, z0 = kkt.solve(-eta * rx, eta * ry, -eta * rz - wu)
            dtau = (-eta * rt - r_tau / tau - float(c @ x0 + b @ y0 + h @ z0)) / (
                denom_base - kappa / tau
            )
            dx = x0 + dtau * x1
            dy = y0 + dtau * y1
            dz = z0 + dtau * z1
            dz_s = scaling.apply(dz)
            ds_s = u - dz_s
            ds = scaling.apply(ds_s)
            dkappa = (r_tau - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa, ds_s, dz_s

        def step_length(dz, ds, dtau, dkappa) -> float:
            alpha = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        lam_sq = cones.product(lam, lam)
        aff = newton(-lam_sq, -tau * kappa, 1.0)
        alpha_aff = min(1.0, step_length(aff[2], aff[3], aff[4], aff[5]))
        sigma = float(np.clip((1.0 - alpha_aff) ** 3, 0.0, 1.0))
        r_c = -lam_sq - cones.product(aff[6], aff[7]) + sigma * mu * e
        r_tau = -tau * kappa - aff[4] * aff[5] + sigma * mu
        dx, dy, dz, ds, dtau, dkappa, _, _ = newton(r_c, r_tau, 1.0 - sigma)
        alpha = min(1.0, STEP_FRACTION * step_length(dz, ds, dtau, dkappa))
        if not np.isfinite(alpha) or alpha < 1e-12:
            break
        nxt = (x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds,
               tau + alpha * dtau, kappa + alpha * dkappa)
        if not all(np.all(np.isfinite(v)) for v in nxt) or nxt[4] <= 0:
            break
        x, y, z, s, tau, kappa = nxt

    return ConeSolution(
        Status.MAX_ITERATIONS, x / tau, np.concatenate([y, z]) / tau, s / tau,
        gap, pres, dres, it, pcost, dcost, hist,
    )


def certify(p: ConeProgram, sol: ConeSolution, tol: float) -> dict:
    """Independent KKT residual check of an optimal solution.

    Returns a dictionary of residuals and a boolean ``ok``.
    """
    x = sol.primal
    y = sol.dual[: p.p]
    z = sol.dual[p.p :]
    s = p.h - p.G @ x
    cones = _Cones(p.cones)
    eq_res = _safe_norm(p.eq_matrix @ x - p.eq_rhs) / (1.0 + _safe_norm(p.eq_rhs))
    dual_res = _safe_norm(p.cost + p.eq_matrix.T @ y + p.G.T @ z) / (1.0 + _safe_norm(p.cost))
    s_min = cones.inner_min_eig(s) if p.m else 0.0
    z_min = cones.inner_min_eig(z) if p.m else 0.0
    pobj = float(p.cost @ x)
    dobj = float(-p.eq_rhs @ y - p.h @ z)
    gap = abs(pobj - dobj)
    comp = abs(float(s @ z))
    scale = max(1.0, abs(pobj))
    ok = (
        eq_res <= tol
        and dual_res <= tol
        and s_min >= -tol * max(1.0, _safe_norm(s))
        and z_min >= -tol * max(1.0, _safe_norm(z))
        and gap <= tol * scale
        and comp <= tol * scale
    )
    return {
        "eq_residual": eq_res,
        "dual_residual": dual_res,
        "slack_min_eig": s_min,
        "dual_min_eig": z_min,
        "gap": gap,
        "complementarity": comp,
        "ok": bool(ok),
    }


class ProgramBuilder:
    """Incremental assembly of a :class:`ConeProgram` from sparse pieces.

    Variables are allocated in named groups; constraint rows are collected in
    coordinate form and cone blocks keep the order in which they are added,
    except that all orthant rows are placed first.
    """

    def __init__(self) -> None:
        self.n = 0
        self.cost: list[tuple[int, float]] = []
        self._eq: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self._n_eq = 0
        self._orth: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self._n_orth = 0
        self._soc: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]] = []

    def add_variables(self, count: int) -> np.ndarray:
        idx = np.arange(self.n, self.n + count)
        self.n += count
        return idx

    def add_cost(self, idx, coef) -> None:
        idx = np.atleast_1d(idx)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        self.cost.extend(zip(idx.tolist(), coef.tolist()))

    @staticmethod
    def _coo(mat, cols) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cols = np.asarray(cols)
        if sp.issparse(mat):
            coo = sp.coo_matrix(mat)
            return coo.row, cols[coo.col], coo.data
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        r, cidx = np.nonzero(mat)
        return r, cols[cidx], mat[r, cidx]

    def add_equality(self, mat, cols, rhs) -> None:
        """Rows ``mat @ z[cols] = rhs``."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        r, cidx, v = self._coo(mat, cols)
        self._eq.append((r + self._n_eq, cidx, v, rhs))
        self._n_eq += rhs.size

    def add_equality_terms(self, terms: Sequence[tuple], rhs) -> None:
        """Rows ``sum_t mat_t @ z[cols_t] = rhs``."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        rows, cols, vals = [], [], []
        for mat, cidx in terms:
            r, c_, v = self._coo(mat, cidx)
            rows.append(r)
            cols.append(c_)
            vals.append(v)
        self._eq.append((np.concatenate(rows) + self._n_eq, np.concatenate(cols), np.concatenate(vals), rhs))
        self._n_eq += rhs.size

    def add_nonneg(self, mat, cols, rhs) -> None:
        """Rows ``mat @ z[cols] <= rhs`` (orthant slack ``rhs - mat z``)."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        r, cidx, v = self._coo(mat, cols)
        self._orth.append((r + self._n_orth, cidx, v, rhs))
        self._n_orth += rhs.size

    def add_soc_terms(self, terms: Sequence[tuple], rhs) -> None:
        """Cone ``rhs - sum_t mat_t @ z[cols_t] in SOC`` (first row is the norm bound)."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        rows, cols, vals = [], [], []
        for mat, cidx in terms:
            r, c_, v = self._coo(mat, cidx)
            rows.append(r)
            cols.append(c_)
            vals.append(v)
        self._soc.append((np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), rhs, rhs.size))

    def build(self) -> ConeProgram:
        c = np.zeros(self.n)
        for i, v in self.cost:
            c[i] += v
        if self._eq:
            er = np.concatenate([t[0] for t in self._eq])
            ec = np.concatenate([t[1] for t in self._eq])
            ev = np.concatenate([t[2] for t in self._eq])
            b = np.concatenate([t[3] for t in self._eq])
        else:
            er = ec = np.zeros(0, dtype=np.int64)
            ev = b = np.zeros(0)
        A = sp.csc_matrix((ev, (er, ec)), shape=(b.size, self.n))
        rows, cols, vals, hs, blocks = [], [], [], [], []
        offset = 0
        if self._n_orth:
            for r, c_, v, rhs in self._orth:
                rows.append(r)
                cols.append(c_)
                vals.append(v)
                hs.append(rhs)
            blocks.append(ConeBlock(ConeKind.ORTHANT, self._n_orth))
            offset = self._n_orth
        for r, c_, v, rhs, q in self._soc:
            rows.append(r + offset)
            cols.append(c_)
            vals.append(v)
            hs.append(rhs)
            blocks.append(ConeBlock(ConeKind.SOC, q))
            offset += q
        if rows:
            G = sp.csc_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(offset, self.n),
            )
            h = np.concatenate(hs)
        else:
            G = sp.csc_matrix((0, self.n))
            h = np.zeros(0)
        return ConeProgram(c, A, b, G, h, blocks)


def epigraph_soc(
    builder: ProgramBuilder,
    chol_factor,
    var_idx,
    shift=None,
    weight: float = 1.0,
    rotated: bool = False,
) -> Optional[int]:
    """Add an epigraph variable ``t`` for a quadratic form and put it in the cost.

    With ``F = chol_factor`` (so the form is ``||F (z - shift)||^2``):

    * ``rotated=False`` adds ``||F (z - shift)||_2 <= t`` (the norm).
    * ``rotated=True`` adds ``||F (z - shift)||_2^2 <= t`` via
      ``||(2 F (z - shift), t - 1)|| <= t + 1``.

    Returns the index of ``t``, or ``None`` when the factor is zero.
    """
    F = np.atleast_2d(np.asarray(chol_factor, dtype=float))
    var_idx = np.asarray(var_idx)
    if not np.any(F):
        return None
    shift = np.zeros(var_idx.size) if shift is None else np.asarray(shift, dtype=float)
    t = int(builder.add_variables(1)[0])
    builder.add_cost(t, weight)
    k = F.shape[0]
    Fs = F @ shift
    if rotated:
        # s = h - G z:  s0 = t + 1,  s1 = 2 F (z - shift),  s2 = t - 1
        top = sp.csr_matrix(([-1.0], ([0], [0])), shape=(k + 2, 1))
        bottom = sp.csr_matrix(([-1.0], ([k + 1], [0])), shape=(k + 2, 1))
        gz = np.zeros((k + 2, var_idx.size))
        gz[1 : k + 1] = -2.0 * F
        rhs = np.zeros(k + 2)
        rhs[0] = 1.0
        rhs[1 : k + 1] = -2.0 * Fs
        rhs[k + 1] = -1.0
        builder.add_soc_terms([(top + bottom, [t]), (gz, var_idx)], rhs)
    else:
        gt = np.zeros((k + 1, 1))
        gt[0, 0] = -1.0
        gz = np.zeros((k + 1, var_idx.size))
        gz[1:] = -F
        rhs = np.zeros(k + 1)
        rhs[1:] = -Fs
        builder.add_soc_terms([(gt, [t]), (gz, var_idx)], rhs)
    return t
