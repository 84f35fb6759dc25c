"""Primal-dual interior-point solver for diagonal-Hessian convex QPs.

Solves::

    minimize    1/2 x' diag(q) x + lin' x
    subject to  A x = b,  G x <= h

with a Mehrotra predictor-corrector iteration on the slack form
``G x + s = h, s >= 0``.  The Newton system is reduced to the dense normal
matrix ``diag(q) + G' diag(z/s) G`` (n is a few hundred at most here) and the
equality block is handled by a Schur complement.

After convergence the solution is polished by a short primal active-set
method warm-started at the interior-point iterate with working set ``z > s``.
On a well-identified active set this takes one equality-constrained step; on
degenerate faces (exact linear costs) it walks to the exact optimum.  The
polished point is only kept if it passes the KKT check.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.optimize import lsq_linear

from .formulation import QpData

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass(frozen=True)
class ConvexProgram:
    q_diag: np.ndarray
    lin: np.ndarray
    qp: QpData

    def __post_init__(self):
        n = self.qp.n
        q = np.broadcast_to(np.asarray(self.q_diag, dtype=float), (n,)).copy()
        lin = np.asarray(self.lin, dtype=float)
        if lin.shape != (n,):
            raise ValueError(f"linear term has shape {lin.shape}, expected ({n},)")
        if np.any(q < 0):
            raise ValueError("q_diag must be nonnegative")
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "lin", lin)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.q_diag * x) + self.lin @ x)


def projection_program(qp: QpData, z: np.ndarray) -> ConvexProgram:
    """Euclidean projection of ``z`` onto the feasible region."""
    return ConvexProgram(np.ones(qp.n), -np.asarray(z, dtype=float), qp)


def cost_vector(cost: np.ndarray, layout) -> np.ndarray:
    """Stack an n_g x T cost matrix into decision layout, zeros on ESS slots."""
    full = np.zeros((layout.p, layout.T))
    full[layout.block("gen")] = cost
    return full.ravel(order="F")


def opf_program(qp: QpData, cost: np.ndarray, eps: float = 1e-8) -> ConvexProgram:
    """Exact linear-cost dispatch, with an ``eps`` proximal term for a nonsingular KKT."""
    return ConvexProgram(np.full(qp.n, eps), cost_vector(cost, qp.layout), qp)


@dataclass
class SolveResult:
    x_star: np.ndarray
    lambda_star: np.ndarray
    mu_star: np.ndarray
    status: str
    iterations: int
    residuals: dict
    polished: bool = False
    # orthonormal basis of the row space of the active constraints, reused by
    # the sensitivity layer: (equality-free active inequality rows, basis)
    active_basis: tuple | None = field(default=None, repr=False)


class SolverError(RuntimeError):
    def __init__(self, message: str, result: SolveResult):
        super().__init__(message)
        self.result = result


class Infeasible(SolverError):
    pass


class MaxIterations(SolverError):
    pass


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    complementarity: float
    dual_feasibility: float

    def max(self) -> float:
        return max(
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.complementarity,
            self.dual_feasibility,
        )


def check_kkt(result: SolveResult, prog: ConvexProgram) -> KktReport:
    """Absolute KKT residuals (infinity norms) of a candidate primal-dual point."""
    qp = prog.qp
    x, lam, mu = result.x_star, result.lambda_star, result.mu_star
    grad = prog.q_diag * x + prog.lin + qp.a_mat.T @ lam + qp.g_mat.T @ mu
    gx_h = qp.g_mat @ x - qp.h_vec
    eq = qp.a_mat @ x - qp.b_vec

    def inf(v):
        return float(np.max(np.abs(v))) if v.size else 0.0

    return KktReport(
        stationarity=inf(grad),
        primal_eq=inf(eq),
        primal_ineq=float(max(gx_h.max(initial=0.0), 0.0)),
        complementarity=inf(mu * gx_h),
        dual_feasibility=float(max(-mu.min(initial=0.0), 0.0)),
    )


_NORMAL_MAPS: dict[int, tuple] = {}


def _normal_map(g_mat) -> sp.csr_matrix:
    """Sparse map ``w -> vec(G' diag(w) G)``, cached per constraint matrix.

    The region's sparsity pattern is fixed across scenarios and iterations,
    so the outer products of the rows are formed once.
    """
    key = id(g_mat)
    hit = _NORMAL_MAPS.get(key)
    if hit is not None and hit[0]() is g_mat:
        return hit[1]
    g = sp.csr_matrix(g_mat)
    n = g.shape[1]
    counts = np.diff(g.indptr)
    flat, vals, cols = [], [], []
    for r in np.flatnonzero(counts):
        idx = g.indices[g.indptr[r] : g.indptr[r + 1]]
        v = g.data[g.indptr[r] : g.indptr[r + 1]]
        flat.append((idx[:, None] * n + idx[None, :]).ravel())
        vals.append(np.outer(v, v).ravel())
        cols.append(np.full(idx.size * idx.size, r))
    if flat:
        mapping = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(flat), np.concatenate(cols))), shape=(n * n, g.shape[0])
        )
    else:
        mapping = sp.csr_matrix((n * n, g.shape[0]))
    try:
        ref = weakref.ref(g_mat)
        weakref.finalize(g_mat, _NORMAL_MAPS.pop, key, None)
    except TypeError:
        return mapping
    _NORMAL_MAPS[key] = (ref, mapping)
    return mapping


class _NormalSystem:
    """Factorization of [[H, A'], [A, 0]] with H = diag(q) + G' W G."""

    def __init__(self, q_diag, g_mat, w, a_dense):
        n = g_mat.shape[1]
        h = (_normal_map(g_mat) @ w).reshape(n, n) if w.size else np.zeros((n, n))
        h[np.diag_indices_from(h)] += q_diag
        reg = 0.0
        for _ in range(6):
            try:
                self.chol = la.cho_factor(h, lower=True, check_finite=False)
                break
            except la.LinAlgError:
                reg = max(reg * 100, 1e-12 * max(1.0, float(np.max(np.diag(h)))))
                h[np.diag_indices_from(h)] += reg
        else:
            raise la.LinAlgError("normal matrix is not positive definite")
        self.a = a_dense
        if a_dense.shape[0]:
            self.hinv_at = la.cho_solve(self.chol, a_dense.T, check_finite=False)
            schur = a_dense @ self.hinv_at
            schur[np.diag_indices_from(schur)] += 1e-14 * max(1.0, float(np.max(np.diag(schur))))
            self.schur = la.lu_factor(schur, check_finite=False)

    def solve(self, r1, r2):
        hinv_r1 = la.cho_solve(self.chol, r1, check_finite=False)
        if not self.a.shape[0]:
            return hinv_r1, np.zeros(0)
        dy = la.lu_solve(self.schur, self.a @ hinv_r1 - r2, check_finite=False)
        return hinv_r1 - self.hinv_at @ dy, dy


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _initial_point(prog, a_dense, warm_start):
    qp = prog.qp
    g = qp.g_mat
    if warm_start is not None and warm_start.x_star.shape == (qp.n,):
        x = warm_start.x_star.copy()
        y = warm_start.lambda_star.copy() if warm_start.lambda_star.shape == (qp.b_vec.size,) else np.zeros(qp.b_vec.size)
    else:
        # least-squares start: min 1/2 x'Qx + lin'x + 1/2 ||G x - h||^2 s.t. A x = b
        sys_ = _NormalSystem(prog.q_diag, g, np.ones(qp.q), a_dense)
        x, y = sys_.solve(-prog.lin + g.T @ qp.h_vec, qp.b_vec)
    s = qp.h_vec - g @ x
    z = -s.copy()
    for v in (s, z):
        lo = float(v.min(initial=1.0))
        if lo <= 0:
            v += 1.0 - lo
    return x, y, s, z


def solve(
    prog: ConvexProgram,
    warm_start: SolveResult | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
    polish: bool = True,
    verbose: bool = False,
) -> SolveResult:
    """Solve ``prog``; raises :class:`Infeasible` or :class:`MaxIterations` on failure."""
    qp = prog.qp
    g, h, b = qp.g_mat, qp.h_vec, qp.b_vec
    a_dense = qp.a_mat.toarray()
    g_t = g.T.tocsr()
    a_t = qp.a_mat.T.tocsr()
    q_diag, lin = prog.q_diag, prog.lin
    m, nq = b.size, h.size

    x, y, s, z = _initial_point(prog, a_dense, warm_start)
    scale_b = 1.0 + (np.max(np.abs(b)) if m else 0.0)
    scale_h = 1.0 + (np.max(np.abs(h)) if nq else 0.0)
    scale_c = 1.0 + np.max(np.abs(lin))
    # IPM runs to a tighter relative target than the reported tolerance so the
    # polish step has a clear active set to work with
    tol_ipm = min(tol, 1e-9)

    status, it = MAX_ITER, 0
    res = {}
    result = None
    for it in range(1, max_iter + 1):
        r_d = q_diag * x + lin + a_t @ y + g_t @ z
        r_p = qp.a_mat @ x - b
        r_g = g @ x + s - h
        gap = float(s @ z)
        pobj = prog.objective(x)
        pres_b = np.max(np.abs(r_p), initial=0.0)
        pres_h = np.max(np.abs(r_g), initial=0.0)
        res = {"primal": max(pres_b, pres_h), "dual": float(np.max(np.abs(r_d))), "gap": gap}
        if verbose:
            logger.info(
                "ipm %3d  pobj % .8e  pres %.2e  dres %.2e  gap %.2e",
                it, pobj, res["primal"], res["dual"], gap,
            )
        feasible = pres_b <= tol * scale_b and pres_h <= tol * scale_h and res["dual"] <= tol * scale_c
        if polish and nq and feasible and gap <= 1e-6 * (1.0 + abs(pobj)):
            cand = _polish(prog, x, z > s, tol, it, z, y)
            if cand is None:
                # degenerate faces: also fix rows that are numerically tight
                tight = s <= 1e-7 * (1.0 + np.abs(h))
                if np.any(tight & ~(z > s)):
                    cand = _polish(prog, x, (z > s) | tight, tol, it, z, y)
            if cand is not None:
                result, status = cand, OPTIMAL
                break
        if (
            pres_b <= tol_ipm * scale_b
            and pres_h <= tol_ipm * scale_h
            and res["dual"] <= tol_ipm * scale_c
            and gap <= tol_ipm * (1.0 + abs(pobj))
        ):
            cand = _ipm_result(x, y, z, it, res)
            if _kkt_ok(check_kkt(cand, prog), prog, tol) and np.max(s * z) <= tol:
                result, status = cand, OPTIMAL
                break
        # Farkas certificate: A'y + G'z ~ 0 with b'y + h'z < 0
        cert = -(b @ y + h @ z)
        if cert > 0 and it > 5:
            farkas = np.max(np.abs(a_t @ y + g_t @ z))
            if farkas <= 1e-9 * cert and res["primal"] > tol * scale_h:
                status = INFEASIBLE
                break
        if nq == 0:
            # pure equality-constrained problem: one Newton step is exact
            sys_ = _NormalSystem(q_diag, g, np.zeros(0), a_dense)
            dx, dy = sys_.solve(-r_d, -r_p)
            x, y = x + dx, y + dy
            continue

        try:
            sys_ = _NormalSystem(q_diag, g, z / s, a_dense)
        except la.LinAlgError:
            logger.warning("normal matrix factorization failed at iteration %d", it)
            break

        def newton(r_sz):
            # solve the reduced system, then refine against the unreduced
            # Newton equations; z/s spans many decades near the optimum
            e_d, e_p, e_g, e_sz = r_d, r_p, r_g, r_sz
            dx, dy = np.zeros_like(x), np.zeros_like(y)
            ds, dz = np.zeros_like(s), np.zeros_like(z)
            for _ in range(3):
                r1 = -e_d - g_t @ ((z * e_g - e_sz) / s)
                cx, cy = sys_.solve(r1, -e_p)
                cs = -e_g - g @ cx
                cz = (-e_sz - z * cs) / s
                dx += cx
                dy += cy
                ds += cs
                dz += cz
                e_d = r_d + q_diag * dx + a_t @ dy + g_t @ dz
                e_p = r_p + qp.a_mat @ dx
                e_g = r_g + g @ dx + ds
                e_sz = r_sz + z * ds + s * dz
                err = max(np.max(np.abs(e_d)), np.max(np.abs(e_p), initial=0.0))
                if err <= 1e-13 * (scale_c + np.max(np.abs(r_d))):
                    break
            return dx, dy, ds, dz

        mu = gap / nq
        dx, dy, ds, dz = newton(s * z)
        alpha = min(1.0, _max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha * ds) @ (z + alpha * dz)) / nq
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, ds, dz = newton(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x += alpha * dx
        y += alpha * dy
        s += alpha * ds
        z += alpha * dz
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            break

    if status == INFEASIBLE:
        raise Infeasible(
            f"primal infeasible (certificate after {it} iterations, residual {res['primal']:.3e})",
            _ipm_result(x, y, z, it, res, INFEASIBLE),
        )
    if result is None:
        raise MaxIterations(
            f"no convergence in {it} iterations (primal {res.get('primal', np.nan):.3e}, "
            f"dual {res.get('dual', np.nan):.3e}, gap {res.get('gap', np.nan):.3e})",
            _ipm_result(x, y, z, it, res, MAX_ITER),
        )
    return _finalize(result, prog)


def _finalize(result: SolveResult, prog: ConvexProgram) -> SolveResult:
    rep = check_kkt(result, prog)
    result.residuals = {
        "primal": max(rep.primal_eq, rep.primal_ineq),
        "dual": rep.stationarity,
        "gap": rep.complementarity,
    }
    return result


def _ipm_result(x, y, z, it, res, status=OPTIMAL):
    return SolveResult(
        x_star=x.copy(),
        lambda_star=y.copy(),
        mu_star=np.maximum(z, 0.0),
        status=status,
        iterations=it,
        residuals=dict(res),
    )


def _kkt_ok(rep: KktReport, prog: ConvexProgram, tol: float) -> bool:
    qp = prog.qp
    scale_b = 1.0 + (np.max(np.abs(qp.b_vec)) if qp.b_vec.size else 0.0)
    scale_h = 1.0 + (np.max(np.abs(qp.h_vec)) if qp.h_vec.size else 0.0)
    return (
        rep.primal_eq <= tol * scale_b
        and rep.primal_ineq <= tol * scale_h
        and rep.stationarity <= tol * (1.0 + np.max(np.abs(prog.lin)))
        and rep.complementarity <= tol * scale_h
        and rep.dual_feasibility <= tol
    )


def row_space_basis(c: np.ndarray, rtol: float = 1e-10, weights: np.ndarray | None = None):
    """Pivoted-QR basis of the row space of ``c``.

    Returns ``(basis, rows, r)``: orthonormal columns spanning range(c'), the
    indices of a maximal independent subset of rows, and the triangular factor
    with ``c[rows].T == basis @ r``.  Positive ``weights`` bias the pivoting
    toward heavily weighted rows.
    """
    n = c.shape[1]
    if c.shape[0] == 0:
        return np.zeros((n, 0)), np.zeros(0, dtype=int), np.zeros((0, 0))
    ct = c.T if weights is None else c.T * weights
    qmat, rmat, piv = la.qr(ct, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(rmat))
    rank = int(np.sum(diag > rtol * max(diag[0], 1e-300)))
    rows = piv[:rank]
    r = rmat[:rank, :rank]
    if weights is not None:
        r = r / weights[rows]
    return qmat[:, :rank], rows, r


def _polish(prog, x_ipm, mask, tol, iterations, duals=None, eq_duals=None, max_steps=60):
    """Primal active-set finish started from the interior-point iterate.

    The working set starts as ``mask``.  Each step solves the
    equality-constrained problem on the working set in its null space, moves
    as far as feasibility allows (adding the blocking row) and, at a working
    set minimizer, drops rows with negative multipliers.  ``duals`` (the
    interior-point inequality multipliers) steer the choice among redundant
    active rows toward a nonnegative split.  Returns ``None`` if
    the result does not pass the KKT check.
    """
    qp = prog.qp
    m = qp.b_vec.size
    a_dense = qp.a_mat.toarray()
    g_mat, h = qp.g_mat, qp.h_vec
    qd, lin = prog.q_diag, prog.lin
    work = np.asarray(mask, dtype=bool).copy()
    x = x_ipm.copy()
    dual_tol = tol * (1.0 + np.max(np.abs(lin)))
    corrected = False
    nu = None
    for _ in range(max_steps):
        active = np.flatnonzero(work)
        c = np.vstack([a_dense, g_mat[active].toarray()])
        d = np.concatenate([qp.b_vec, h[active]])
        weights = None
        if duals is not None:
            top = float(np.max(duals[active], initial=0.0)) + 1.0
            weights = np.concatenate([np.full(m, 10.0 * top), np.maximum(duals[active], 1e-6 * top)])
        basis, rows, r = row_space_basis(c, weights=weights)
        if not corrected:
            # smallest move onto the working set's affine hull
            resid = d[rows] - c[rows] @ x
            x = x + basis @ la.solve_triangular(r, resid, trans="T", check_finite=False)
            corrected = True
        grad = qd * x + lin
        if rows.size < qp.n:
            full_q = la.qr(basis, mode="full", check_finite=False)[0] if rows.size else np.eye(qp.n)
            null = full_q[:, rows.size:]
            hess = null.T @ (qd[:, None] * null)
            try:
                w = la.solve(hess, -null.T @ grad, assume_a="pos", check_finite=False)
            except (la.LinAlgError, ValueError):
                return None
            step = null @ w
        else:
            step = np.zeros(qp.n)
        if np.max(np.abs(step)) > 1e-12 * (1.0 + np.max(np.abs(x))):
            g_step = g_mat @ step
            slack = h - g_mat @ x
            block = (g_step > 1e-14 * (1.0 + np.abs(h))) & ~work
            alpha, hit = 1.0, -1
            if np.any(block):
                ratios = np.maximum(slack[block], 0.0) / g_step[block]
                k = int(np.argmin(ratios))
                if ratios[k] < 1.0:
                    alpha, hit = float(ratios[k]), int(np.flatnonzero(block)[k])
            x = x + alpha * step
            if hit >= 0:
                work[hit] = True
                continue
            grad = qd * x + lin
        # working-set minimizer: recover multipliers and check their signs
        nu = np.zeros(c.shape[0])
        if rows.size:
            nu[rows] = la.solve_triangular(r, basis.T @ -grad, check_finite=False)
        # negative multipliers on redundant rows: drop those rows from the
        # factorization while the rank is unchanged
        keep = np.ones(c.shape[0], dtype=bool)
        for _ in range(3):
            neg = m + np.flatnonzero(nu[m:] < -dual_tol)
            if not neg.size or rows.size == keep.sum():
                break
            keep[neg] = False
            sub = np.flatnonzero(keep)
            basis_w, rows_w, r_w = row_space_basis(c[sub], weights=None if weights is None else weights[sub])
            if rows_w.size != rows.size:
                break
            nu = np.zeros(c.shape[0])
            nu[sub[rows_w]] = la.solve_triangular(r_w, basis_w.T @ -grad, check_finite=False)
        if np.any(nu[m:] < -dual_tol):
            work[active[int(np.argmin(nu[m:]))]] = False
            continue
        break
    else:
        return None
    if nu is None:
        return None
    if np.any(nu[m:] < 0):
        # redundant rows split the multiplier freely; clipping a negative share
        # would leave a stationarity residual, so refit with sign bounds
        grad = qd * x + lin
        lower = np.concatenate([np.full(m, -np.inf), np.zeros(active.size)])
        fit = lsq_linear(c.T, -grad, bounds=(lower, np.inf), method="bvls", tol=1e-15)
        if fit.success:
            nu = fit.x
    mu = np.zeros(qp.q)
    mu[active] = np.maximum(nu[m:], 0.0)
    cand = SolveResult(
        x_star=x,
        lambda_star=nu[:m].copy(),
        mu_star=mu,
        status=OPTIMAL,
        iterations=iterations,
        residuals={},
        polished=True,
        active_basis=(active, basis),
    )
    rep = check_kkt(cand, prog)
    if not _kkt_ok(rep, prog, tol):
        logger.debug("polish rejected: %s", rep)
        return None
    return cand

