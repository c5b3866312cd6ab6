"""Dense convex QP solver.

Problems have the form::

    minimize    1/2 z'Pz + c'z + constant
    subject to  A_eq z = b_eq,   G z <= h

and are solved with an operator-splitting (ADMM) scheme on the stacked
constraint set ``l <= A z <= u`` with Ruiz equilibration and an adaptive
penalty, followed by a polish step that solves the KKT system on the
identified active set. The polish step is refined by a small primal-dual
active-set loop, so well-posed problems normally finish with residuals at
round-off level.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ShapeError

log = logging.getLogger(__name__)


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max-iterations"
    INFEASIBLE = "infeasible"


@dataclass
class QuadraticProgram:
    P: np.ndarray
    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    constant: float = 0.0

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = self.P.shape[0]
        if self.P.shape != (n, n):
            raise ShapeError(f"P must be square, got {self.P.shape}")
        asym = np.max(np.abs(self.P - self.P.T)) if n else 0.0
        if asym > 1e-10 * max(1.0, np.max(np.abs(self.P), initial=0.0)):
            raise ShapeError(f"P is not symmetric (max asymmetry {asym:.3g})")
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.c.size != n:
            raise ShapeError(f"c must have length {n}, got {self.c.size}")
        self.A_eq, self.b_eq = self._pair(self.A_eq, self.b_eq, n, "A_eq/b_eq")
        self.G, self.h = self._pair(self.G, self.h, n, "G/h")

    @staticmethod
    def _pair(M, v, n, name):
        if M is None:
            return np.zeros((0, n)), np.zeros(0)
        M = np.asarray(M, dtype=float).reshape(-1, n)
        v = np.asarray(v, dtype=float).ravel()
        if v.size != M.shape[0]:
            raise ShapeError(f"{name}: {M.shape[0]} rows but {v.size} right-hand sides")
        return M, v

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.c @ z + self.constant)

    def residuals(self, z, nu, mu):
        """(primal, stationarity, complementarity) infinity-norm residuals."""
        prim = 0.0
        if self.A_eq.shape[0]:
            prim = np.max(np.abs(self.A_eq @ z - self.b_eq))
        finite = np.isfinite(self.h)
        slack = np.zeros(0)
        if self.G.shape[0]:
            gz = self.G @ z
            slack = np.where(finite, self.h - gz, np.inf)
            if finite.any():
                prim = max(prim, np.max(np.maximum(-slack[finite], 0.0)))
        grad = self.P @ z + self.c + self.A_eq.T @ nu + self.G.T @ mu
        dual = float(np.max(np.abs(grad))) if grad.size else 0.0
        comp = float(np.max(np.abs(mu[finite] * slack[finite]))) if finite.any() else 0.0
        return float(prim), dual, comp


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: QpStatus
    primal_residual: float
    dual_residual: float
    complementarity: float
    iterations: int = 0
    polished: bool = False
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def optimal(self) -> bool:
        return self.status == QpStatus.OPTIMAL


@dataclass
class _Setup:
    P: np.ndarray
    A: np.ndarray
    Pbar: np.ndarray
    Abar: np.ndarray
    D: np.ndarray
    E: np.ndarray
    cost_scale: float
    factors: dict = field(default_factory=dict)


def _ruiz(P, A, iters=15):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Pb, Ab = P.copy(), A.copy()
    for _ in range(iters):
        col = np.max(np.abs(Pb), axis=0) if n else np.zeros(0)
        if m:
            col = np.maximum(col, np.max(np.abs(Ab), axis=0))
            row = np.max(np.abs(Ab), axis=1)
        else:
            row = np.zeros(0)
        col = np.where(col < 1e-4, 1.0, np.minimum(col, 1e4))
        row = np.where(row < 1e-4, 1.0, np.minimum(row, 1e4))
        d = 1.0 / np.sqrt(col)
        e = 1.0 / np.sqrt(row)
        Pb = d[:, None] * Pb * d[None, :]
        Ab = e[:, None] * Ab * d[None, :]
        D *= d
        E *= e
    return Pb, Ab, D, E


class QpSolver:
    """Reusable solver; caches scaling/factorizations and warm-starts repeat solves.

    The cache is keyed on the contents of ``P`` and the stacked constraint
    matrix, so receding-horizon loops that only change ``c``, ``b_eq`` or ``h``
    pay for the factorizations once. With ``warm_start`` the active set of the
    previous solve is tried first; ADMM only runs when that guess does not
    lead to a KKT point within a few active-set corrections.
    """

    def __init__(self, tol: float = 1e-6, max_iter: int = 20000, warm_start: bool = True,
                 polish: bool = True, rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
                 check_every: int = 10, adapt_every: int = 50, active_set_first: bool = True):
        self.tol = tol
        self.active_set_first = active_set_first
        self.max_iter = max_iter
        self.warm_start = warm_start
        self.polish = polish
        self.rho0 = rho
        self.sigma = sigma
        self.alpha = alpha
        self.check_every = check_every
        self.adapt_every = adapt_every
        self._P = None
        self._A = None
        self._setup: Optional[_Setup] = None
        self._kkt_cache: dict = {}
        self._warm = None
        self._warm_active = None
        self.last_path = None

    # -- problem assembly -------------------------------------------------
    @staticmethod
    def _stack(qp: QuadraticProgram):
        G, h = qp.G, qp.h
        keep = np.isfinite(h) & np.any(G != 0.0, axis=1) if G.shape[0] else np.zeros(0, bool)
        keep_eq = np.any(qp.A_eq != 0.0, axis=1) if qp.A_eq.shape[0] else np.zeros(0, bool)
        A = np.vstack([qp.A_eq[keep_eq], G[keep]])
        l = np.concatenate([qp.b_eq[keep_eq], np.full(int(keep.sum()), -np.inf)])
        u = np.concatenate([qp.b_eq[keep_eq], h[keep]])
        return A, l, u, keep_eq, keep

    def _sync(self, P, A):
        if self._P is not None and self._P.shape == P.shape and self._A.shape == A.shape \
                and np.array_equal(self._P, P) and np.array_equal(self._A, A):
            return
        self._P, self._A = P.copy(), A.copy()
        self._setup = None
        self._kkt_cache = {}

    def _get_setup(self) -> _Setup:
        if self._setup is None:
            P, A = self._P, self._A
            Pb, Ab, D, E = _ruiz(P, A)
            colnorm = np.max(np.abs(Pb), axis=0).mean() if P.size else 1.0
            cost_scale = 1.0 / min(max(colnorm, 1e-4), 1e4)
            self._setup = _Setup(P, A, Pb * cost_scale, Ab, D, E, cost_scale)
        return self._setup

    def _factor(self, s: _Setup, rho_vec: np.ndarray):
        key = rho_vec.tobytes()
        f = s.factors.get(key)
        if f is None:
            K = s.Pbar + self.sigma * np.eye(s.Pbar.shape[0]) + s.Abar.T @ (rho_vec[:, None] * s.Abar)
            f = scipy.linalg.cho_factor(K, check_finite=False)
            if len(s.factors) > 8:
                s.factors.clear()
            s.factors[key] = f
        return f

    # -- main entry -------------------------------------------------------
    def solve(self, qp: QuadraticProgram, active: Optional[np.ndarray] = None) -> QpSolution:
        """Solve ``qp``. ``active`` optionally flags rows of ``G`` expected to be tight."""
        n = qp.n
        # rows without variable dependence are dropped after a consistency check
        for M, lo, hi in ((qp.A_eq, qp.b_eq, qp.b_eq), (qp.G, np.full(qp.h.size, -np.inf), qp.h)):
            if M.shape[0]:
                zr = ~np.any(M != 0.0, axis=1)
                if ((lo[zr] > self.tol) | (hi[zr] < -self.tol)).any():
                    return self._result(qp, np.zeros(n), None, QpStatus.INFEASIBLE, 0, False)
        A, l, u, keep_eq, keep = self._stack(qp)
        self._sync(qp.P, A)
        n_eq = int(keep_eq.sum())
        m = A.shape[0]
        eq = np.zeros(m, bool)
        eq[:n_eq] = True

        iters = 0
        res = None
        lower = upper = None
        if self.polish and self.active_set_first:
            lower = np.zeros(m, bool)
            upper = np.zeros(m, bool)
            if active is not None:
                upper[n_eq:] = np.asarray(active, bool)[keep]
            elif self.warm_start and self._warm_active is not None and self._warm_active[0].size == m:
                lower, upper = self._warm_active
            res = self._active_set(qp.P, qp.c, A, l, u, eq, lower, upper, max_rounds=10)
            self.last_path = "active-set"
        if res is not None:
            x, y, lower, upper = res
            status, polished = QpStatus.OPTIMAL, True
        else:
            self.last_path = "admm"
            x, y, lower, upper, iters, status, polished = self._admm_then_polish(qp.P, qp.c, A, l, u, eq)
        if status != QpStatus.INFEASIBLE:
            self._warm = (x.copy(), np.clip(A @ x, l, u), y.copy())
            if lower is not None:
                self._warm_active = (lower.copy(), upper.copy())
        return self._result(qp, x, (keep_eq, keep, y), status, iters, polished)

    def _admm_then_polish(self, P, c, A, l, u, eq):
        """ADMM to a loose tolerance, then polish; tighten and continue while polishing fails."""
        eps = max(self.tol, 1e-4) if self.polish else self.tol
        start = None
        if self.warm_start and self._warm is not None and self._warm[0].size == P.shape[0] \
                and self._warm[1].size == A.shape[0]:
            start = self._warm
        budget = self.max_iter
        total = 0
        while True:
            x, z, y, it, status = self._admm(c, A, l, u, eq, eps, start, budget)
            total += it
            budget -= it
            if status == QpStatus.INFEASIBLE:
                return x, y, None, None, total, status, False
            if self.polish:
                lower = (~eq) & (z - l < -y)
                upper = (~eq) & (u - z < y)
                res = self._active_set(P, c, A, l, u, eq, lower, upper, max_rounds=25)
                if res is not None:
                    xs, ys, lower, upper = res
                    return xs, ys, lower, upper, total, QpStatus.OPTIMAL, True
            if status != QpStatus.OPTIMAL or budget <= 0 or eps <= self.tol:
                return x, y, None, None, total, status, False
            eps = max(eps * 1e-2, self.tol)
            start = (x, z, y)

    def _result(self, qp, x, packed, status, iters, polished) -> QpSolution:
        nu = np.zeros(qp.A_eq.shape[0])
        mu = np.zeros(qp.G.shape[0])
        if packed is not None:
            keep_eq, keep, y = packed
            n_eq = int(keep_eq.sum())
            nu[keep_eq] = y[:n_eq]
            mu[keep] = np.maximum(y[n_eq:], 0.0)
        prim, dual, comp = qp.residuals(x, nu, mu)
        return QpSolution(x, qp.objective(x), status, prim, dual, comp, iters, polished, nu, mu)

    def _admm(self, c, A, l, u, eq, eps, start=None, max_iter=None):
        s = self._get_setup()
        n, m = s.Pbar.shape[0], A.shape[0]
        D, E, cs = s.D, s.E, s.cost_scale
        qb = cs * D * c
        lb = np.where(np.isfinite(l), E * l, l)
        ub = np.where(np.isfinite(u), E * u, u)

        if start is not None:
            x0, z0, y0 = start
            x = x0 / D
            z = np.clip(E * z0, lb, ub)
            y = cs * y0 / E
        else:
            x, z, y = np.zeros(n), np.clip(np.zeros(m), lb, ub), np.zeros(m)

        rho = self.rho0
        rho_vec = np.where(eq, 1e3 * rho, rho)
        fac = self._factor(s, rho_vec)
        Pb, Ab = s.Pbar, s.Abar
        alpha, sigma = self.alpha, self.sigma
        max_iter = self.max_iter if max_iter is None else max(int(max_iter), 1)
        y_prev = y.copy()
        status = QpStatus.MAX_ITER
        it = 0
        for it in range(1, max_iter + 1):
            rhs = sigma * x - qb + Ab.T @ (rho_vec * z - y)
            xt = scipy.linalg.cho_solve(fac, rhs, check_finite=False)
            zt = Ab @ xt
            x = alpha * xt + (1 - alpha) * x
            zr = alpha * zt + (1 - alpha) * z
            z_new = np.clip(zr + y / rho_vec, lb, ub)
            y = y + rho_vec * (zr - z_new)
            z = z_new

            if it % self.check_every and it != max_iter:
                continue
            Ax = Ab @ x
            Px = Pb @ x
            Aty = Ab.T @ y
            prim = np.max(np.abs((Ax - z) / E), initial=0.0)
            dual = np.max(np.abs((Px + qb + Aty) / D), initial=0.0) / cs
            prim_scale = max(np.max(np.abs(Ax / E), initial=0.0), np.max(np.abs(z / E), initial=0.0))
            dual_scale = max(np.max(np.abs(Px / D), initial=0.0), np.max(np.abs(Aty / D), initial=0.0),
                             np.max(np.abs(qb / D), initial=0.0)) / cs
            if prim <= eps + eps * prim_scale and dual <= eps + eps * dual_scale:
                status = QpStatus.OPTIMAL
                break
            if m and self._certifies_infeasible(A, l, u, E * (y - y_prev)):
                status = QpStatus.INFEASIBLE
                break
            y_prev = y.copy()
            if m and it % self.adapt_every == 0:
                ps = np.max(np.abs(Ax - z), initial=0.0) / max(np.max(np.abs(Ax), initial=0.0),
                                                             np.max(np.abs(z), initial=0.0), 1e-12)
                ds = np.max(np.abs(Px + qb + Aty), initial=0.0) / max(
                    np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                    np.max(np.abs(qb), initial=0.0), 1e-12)
                new_rho = float(np.clip(rho * np.sqrt(ps / max(ds, 1e-12)), 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    rho_vec = np.where(eq, 1e3 * rho, rho)
                    fac = self._factor(s, rho_vec)
        return D * x, z / E, E * y / cs, it, status

    @staticmethod
    def _certifies_infeasible(A, l, u, dy) -> bool:
        dy = np.where(np.isfinite(u), dy, np.minimum(dy, 0.0))
        dy = np.where(np.isfinite(l), dy, np.maximum(dy, 0.0))
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-12:
            return False
        eps = 1e-7
        support = np.sum(np.where(np.isfinite(u), u, 0.0) * np.maximum(dy, 0.0)) + \
            np.sum(np.where(np.isfinite(l), l, 0.0) * np.minimum(dy, 0.0))
        return np.max(np.abs(A.T @ dy), initial=0.0) <= eps * norm and support <= -eps * norm

    # -- active-set polish ------------------------------------------------
    def _kkt_solve(self, P, A_act, rhs_x, rhs_y, key):
        """Solve the equality-constrained KKT system.

        Plain LU first; a tiny diagonal regularization with iterative refinement
        when the system is singular; SVD least squares when both leave a residual.
        The route that worked is cached per active set.
        """
        n, k = P.shape[0], A_act.shape[0]
        K = np.block([[P, A_act.T], [A_act, np.zeros((k, k))]])
        rhs = np.concatenate([rhs_x, rhs_y])
        cached = self._kkt_cache.get(key)
        routes = [cached] if cached is not None else []
        routes += [("lu", None), ("reg", None), ("lstsq", None)]
        sol = None
        for route, fac in routes:
            sol, fac = self._kkt_route(route, fac, K, rhs, n, k)
            if sol is None:
                continue
            r = rhs - K @ sol
            scale = max(1.0, np.max(np.abs(rhs), initial=0.0),
                        np.max(np.abs(K), initial=0.0) * np.max(np.abs(sol), initial=0.0))
            if route == "lstsq" or np.max(np.abs(r), initial=0.0) <= 1e-13 * scale:
                if len(self._kkt_cache) > 32:
                    self._kkt_cache.clear()
                self._kkt_cache[key] = (route, fac)
                break
        return sol[:n], sol[n:]

    @staticmethod
    def _kkt_route(route, fac, K, rhs, n, k):
        if route == "lstsq":
            return scipy.linalg.lstsq(K, rhs, lapack_driver="gelsd", check_finite=False)[0], None
        if fac is None:
            Kf = K
            if route == "reg":
                delta = 1e-9 * max(1.0, np.max(np.abs(K[:n, :n]), initial=0.0))
                Kf = K.copy()
                Kf[:n, :n] += delta * np.eye(n)
                Kf[n:, n:] -= delta * np.eye(k)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                fac = scipy.linalg.lu_factor(Kf, check_finite=False)
            if not np.all(np.isfinite(fac[0])) or np.min(np.abs(np.diag(fac[0])), initial=1.0) == 0.0:
                return None, None
        sol = scipy.linalg.lu_solve(fac, rhs, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None, None
        for _ in range(5 if route == "reg" else 2):
            r = rhs - K @ sol
            if np.max(np.abs(r), initial=0.0) <= 1e-15 * max(1.0, np.max(np.abs(rhs), initial=0.0)):
                break
            sol = sol + scipy.linalg.lu_solve(fac, r, check_finite=False)
        return sol, fac

    def _active_set(self, P, c, A, l, u, eq, lower, upper, max_rounds=25):
        """Primal-dual active-set iterations from the guess ``(lower, upper)``.

        Returns ``(x, y, lower, upper)`` at a verified KKT point, else None.
        """
        m = A.shape[0]
        lower = lower & ~eq & np.isfinite(l)
        upper = upper & ~eq & np.isfinite(u) & ~lower
        tol = self.tol
        for _ in range(max_rounds):
            act = eq | lower | upper
            idx = np.flatnonzero(act)
            b_act = np.where(lower[idx], l[idx], u[idx])
            key = (idx.tobytes(), lower[idx].tobytes())
            xs, ys = self._kkt_solve(P, A[idx], -c, b_act, key)
            yfull = np.zeros(m)
            yfull[idx] = ys
            Ax = A @ xs
            scale = max(1.0, np.max(np.abs(Ax), initial=0.0))
            viol_up = (~eq) & np.isfinite(u) & (Ax > u + tol * scale)
            viol_lo = (~eq) & np.isfinite(l) & (Ax < l - tol * scale)
            ysc = max(1.0, np.max(np.abs(yfull), initial=0.0))
            wrong_up = upper & (yfull < -tol * ysc)
            wrong_lo = lower & (yfull > tol * ysc)
            if not (viol_up.any() or viol_lo.any() or wrong_up.any() or wrong_lo.any()):
                grad = P @ xs + c + A.T @ yfull
                gscale = max(1.0, np.max(np.abs(c), initial=0.0), np.max(np.abs(P @ xs), initial=0.0))
                if np.max(np.abs(grad), initial=0.0) <= tol * gscale \
                        and np.max(np.abs(Ax[eq] - l[eq]), initial=0.0) <= tol * scale:
                    return xs, yfull, lower, upper
                return None
            upper = (upper & ~wrong_up) | viol_up
            lower = (lower & ~wrong_lo) | viol_lo
        log.debug("active-set loop did not settle")
        return None


def solve_qp(qp: QuadraticProgram, tol: float = 1e-6, max_iter: int = 20000, **kwargs) -> QpSolution:
    """One-shot convenience wrapper around :class:`QpSolver`."""
    return QpSolver(tol=tol, max_iter=max_iter, **kwargs).solve(qp)
