"""ADMM solver for dense convex QPs ``min u'Pu/2 + c'u  s.t.  A u <= b``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InfeasibleProblem

log = logging.getLogger(__name__)


@dataclass
class AdmmSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeas: float = 1e-7
    max_iter: int = 20000
    alpha: float = 1.6
    sigma: float = 1e-6
    rho: float = 0.1
    rho_min: float = 1e-3
    rho_max: float = 1e3
    adapt_every: int = 25
    check_every: int = 5
    polish: bool = True


@dataclass
class QpSolution:
    """Primal point, inequality multipliers and recomputed KKT residuals."""

    u: np.ndarray
    duals: np.ndarray
    kkt: dict
    iterations: int
    converged: bool
    status: str = "solved"
    slack: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def u_star(self):
        return self.u


def kkt_residuals(P, c, A, b, u, lam) -> dict:
    """Stationarity, primal feasibility and complementarity for ``A u <= b``."""
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    stat = P @ u + c + (A.T @ lam if A.size else 0.0)
    s = A @ u - b if A.size else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "primal": float(np.max(np.maximum(s, 0.0))) if s.size else 0.0,
        "dual": float(np.max(np.maximum(-lam, 0.0))) if lam.size else 0.0,
        "complementarity": float(np.max(np.abs(lam * s))) if s.size else 0.0,
    }


class AdmmQpSolver:
    """Operator-splitting QP solver with over-relaxation and warm starts.

    The matrix ``P`` and constraint matrix ``A`` are fixed at construction;
    ``solve`` accepts a fresh linear term and right-hand side so that a
    parametric problem can be re-solved without refactoring.
    """

    def __init__(self, P, A, settings: Optional[AdmmSettings] = None):
        self.P = np.asarray(P, dtype=float)
        self.A = np.asarray(A, dtype=float).reshape(-1, self.P.shape[0])
        self.settings = settings or AdmmSettings()
        self.n = self.P.shape[0]
        self.p = self.A.shape[0]
        self.rho = self.settings.rho
        self._factor(self.rho)

    def _factor(self, rho):
        s = self.settings
        K = self.P + s.sigma * np.eye(self.n) + rho * (self.A.T @ self.A)
        self._cho = scipy.linalg.cho_factor(K)
        self.rho = rho

    def solve(self, c, b, warm: Optional[QpSolution] = None) -> QpSolution:
        s = self.settings
        P, A = self.P, self.A
        c = np.asarray(c, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        if self.p == 0:
            u = -np.linalg.lstsq(P, c, rcond=None)[0]
            return QpSolution(u, np.zeros(0), kkt_residuals(P, c, A, b, u, np.zeros(0)), 0, True)
        if warm is not None and warm.u.shape == (self.n,) and warm.duals.shape == (self.p,):
            x = warm.u.copy()
            y = warm.duals.copy()
            z = np.minimum(A @ x, b)
        else:
            x = np.zeros(self.n)
            y = np.zeros(self.p)
            z = np.minimum(A @ x, b)
        status = "max_iter"
        it = 0
        y_prev = y.copy()
        for it in range(1, s.max_iter + 1):
            rho = self.rho
            rhs = s.sigma * x - c + A.T @ (rho * z - y)
            xt = scipy.linalg.cho_solve(self._cho, rhs)
            zt = A @ xt
            x = s.alpha * xt + (1 - s.alpha) * x
            zr = s.alpha * zt + (1 - s.alpha) * z
            z_new = np.minimum(zr + y / rho, b)
            y_prev = y
            y = y + rho * (zr - z_new)
            z = z_new
            if it % s.check_every and it != s.max_iter:
                continue
            Ax = A @ x
            Px = P @ x
            Aty = A.T @ y
            r_prim = np.max(np.abs(Ax - z))
            r_dual = np.max(np.abs(Px + c + Aty))
            e_prim = s.eps_abs + s.eps_rel * max(np.max(np.abs(Ax)), np.max(np.abs(z)))
            e_dual = s.eps_abs + s.eps_rel * max(np.max(np.abs(Px)), np.max(np.abs(Aty)),
                                                 np.max(np.abs(c)))
            if r_prim <= e_prim and r_dual <= e_dual:
                status = "solved"
                break
            dy = y - y_prev
            ndy = np.max(np.abs(dy))
            if ndy > 0 and np.max(np.abs(A.T @ dy)) <= s.eps_infeas * ndy \
                    and b @ np.maximum(dy, 0) < -s.eps_infeas * ndy and np.all(dy >= -s.eps_infeas * ndy):
                raise InfeasibleProblem("primal infeasibility certificate found")
            if it % s.adapt_every == 0:
                num = r_prim / max(np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-30)
                den = r_dual / max(np.max(np.abs(Px)), np.max(np.abs(Aty)), np.max(np.abs(c)), 1e-30)
                if den > 0 and num > 0:
                    new = float(np.clip(rho * np.sqrt(num / den), s.rho_min, s.rho_max))
                    if new > 5 * rho or new < rho / 5:
                        self._factor(new)
        lam = np.maximum(y, 0.0)
        sol = QpSolution(x, lam, kkt_residuals(P, c, A, b, x, lam), it, status == "solved",
                         status, z)
        if s.polish:
            sol = self._polish(sol, c, b)
        return sol

    def _polish(self, sol: QpSolution, c, b, max_rounds: int = 25) -> QpSolution:
        """Refine the ADMM point by solving KKT systems on a guessed active set.

        The guess comes from the ADMM duals and slacks; rows with negative
        multipliers are released and violated rows are added until the
        active set is consistent.  The refined point replaces the ADMM one
        only if its recomputed KKT residuals are no worse.
        """
        P, A = self.P, self.A
        slack = A @ sol.u - b
        tol = 1e-5 * (1 + np.abs(b))
        active = (sol.duals > 1e-9) | (slack > -tol)
        best = sol
        best_score = max(sol.kkt.values())
        for _ in range(max_rounds):
            Aa = A[active]
            k = Aa.shape[0]
            K = np.block([[P + 1e-12 * np.eye(self.n), Aa.T], [Aa, -1e-12 * np.eye(k)]])
            try:
                kkt_sol = np.linalg.solve(K, np.concatenate([-c, b[active]]))
            except np.linalg.LinAlgError:
                break
            u = kkt_sol[:self.n]
            lam = np.zeros(self.p)
            lam[active] = kkt_sol[self.n:]
            viol = ~active & (A @ u - b > 1e-12 * (1 + np.abs(b)))
            negative = lam < -1e-12 * (1 + np.abs(lam).max())
            if not negative.any() and not viol.any():
                lam = np.maximum(lam, 0.0)
                kkt = kkt_residuals(P, c, A, b, u, lam)
                score = max(kkt.values())
                if score <= best_score:
                    ok = score < 1e-6
                    best = QpSolution(u, lam, kkt, sol.iterations, sol.converged or ok,
                                      "solved" if ok else sol.status, A @ u)
                break
            # Release the most negative multiplier, add every violated row.
            if negative.any():
                active[np.argmin(lam)] = False
            active |= viol
        return best


def solve_dense_qp(P, c, A, b, settings=None, warm=None) -> QpSolution:
    return AdmmQpSolver(P, A, settings).solve(c, b, warm)
