"""Sensitivity of the Euclidean projection onto the feasible region.

At an optimal projection ``x = P(z)`` with strongly active inequality rows
``S`` the projection is locally the orthogonal projection onto the affine set
``{A x = b, G_S x = h_S}``, so its Jacobian is ``I - Q Q'`` where ``Q`` is an
orthonormal basis of the row space of ``[A; G_S]``.  This is the reduced form
of the differentiated KKT system; the full block system is provided as
:func:`full_kkt_jacobian` for cross-checking.

Rows that are tight but carry a (numerically) zero multiplier make the
Jacobian set-valued.  They are treated as inactive, which is the limit taken
from the interior, and counted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .formulation import QpData
from .qp_solver import OPTIMAL, SolveResult, row_space_basis

logger = logging.getLogger(__name__)

TAU_ACT = 1e-6
TAU_SLACK = 1e-6


class DegenerateActiveSet(RuntimeError):
    """The active-set system could not be reduced to a usable basis."""


@dataclass(frozen=True)
class ActiveSet:
    strong: np.ndarray  # rows with mu > tau_act: held fixed by the Jacobian
    weak: np.ndarray  # tight rows with mu <= tau_act: treated as inactive
    tau_act: float = TAU_ACT
    tau_slack: float = TAU_SLACK

    @property
    def active_rows(self) -> np.ndarray:
        return np.union1d(self.strong, self.weak)

    @classmethod
    def from_solution(
        cls, sol: SolveResult, qp: QpData, tau_act: float = TAU_ACT, tau_slack: float = TAU_SLACK
    ) -> "ActiveSet":
        slack = qp.h_vec - qp.g_mat @ sol.x_star
        tight = slack < tau_slack * (1.0 + np.abs(qp.h_vec))
        strong = sol.mu_star > tau_act
        return cls(
            strong=np.flatnonzero(strong),
            weak=np.flatnonzero(tight & ~strong),
            tau_act=tau_act,
            tau_slack=tau_slack,
        )


@dataclass(frozen=True)
class VjpWorkspace:
    basis: np.ndarray  # orthonormal basis of range([A; G_S]')
    active: ActiveSet
    n: int

    @property
    def degenerate_rows(self) -> int:
        return int(self.active.weak.size)


def build_sensitivity(
    sol: SolveResult,
    qp: QpData,
    tau_act: float = TAU_ACT,
    tau_slack: float = TAU_SLACK,
) -> VjpWorkspace:
    """Factor the projection sensitivity at an optimal solution."""
    if sol.status != OPTIMAL:
        raise ValueError(f"sensitivity needs an optimal solution, got status {sol.status!r}")
    active = ActiveSet.from_solution(sol, qp, tau_act, tau_slack)
    basis = None
    if sol.active_basis is not None:
        rows, cached = sol.active_basis
        if np.array_equal(rows, active.strong):
            basis = cached
    if basis is None:
        c = np.vstack([qp.a_mat.toarray(), qp.g_mat[active.strong].toarray()])
        basis, _, _ = row_space_basis(c)
    if not np.all(np.isfinite(basis)):
        raise DegenerateActiveSet("non-finite active-set basis")
    if active.weak.size:
        logger.debug("%d weakly active rows treated as inactive", active.weak.size)
    return VjpWorkspace(basis=basis, active=active, n=qp.n)


def vjp(ws: VjpWorkspace, grad_x: np.ndarray) -> np.ndarray:
    """Pull a cotangent on the projected point back to the raw input."""
    g = np.asarray(grad_x, dtype=float)
    if g.shape[-1] != ws.n:
        raise ValueError(f"cotangent has length {g.shape[-1]}, expected {ws.n}")
    # the Jacobian is symmetric, so the transposed solve is the same projector
    return g - (g @ ws.basis) @ ws.basis.T


def jacobian(ws: VjpWorkspace) -> np.ndarray:
    """Dense Jacobian assembled from basis cotangents; for tests and small cases."""
    return np.stack([vjp(ws, e) for e in np.eye(ws.n)], axis=1).T


def full_kkt_jacobian(sol: SolveResult, qp: QpData) -> np.ndarray:
    """Jacobian from the unreduced differentiated KKT system.

    Solves ``[[I, G', A'], [diag(mu) G, diag(G x - h), 0], [A, 0, 0]]``
    against ``[I; 0; 0]`` by least squares (redundant constraints make the
    dual block rank deficient).  Only meaningful at strictly complementary
    solutions.
    """
    n, q, m = qp.n, qp.q, qp.b_vec.size
    g = qp.g_mat.toarray()
    a = qp.a_mat.toarray()
    resid = g @ sol.x_star - qp.h_vec
    kkt = np.zeros((n + q + m, n + q + m))
    kkt[:n, :n] = np.eye(n)
    kkt[:n, n : n + q] = g.T
    kkt[:n, n + q :] = a.T
    kkt[n : n + q, :n] = sol.mu_star[:, None] * g
    kkt[n : n + q, n : n + q] = np.diag(resid)
    kkt[n + q :, :n] = a
    rhs = np.zeros((n + q + m, n))
    rhs[:n] = np.eye(n)
    sol_mat = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol_mat[:n]
