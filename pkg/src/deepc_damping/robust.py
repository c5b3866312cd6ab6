"""Min-Max DeePC, its disturbance-feedback variant and the vertex/cutting-plane solver.

The uncertain future disturbance is parameterized by a downsampled vector
``w_tilde`` that is linearly interpolated back to the prediction horizon.
With ``g = pinv(H) col(u_ini, w_ini, y_ini + sigma_y, u, w_hat)`` every cost
term is a squared norm of a residual that is affine in the decision vector
``z`` for fixed ``w_tilde`` and affine in ``w_tilde`` for fixed ``z``; the
worst case over the box is therefore attained at a vertex, and constraints
that are affine in ``w_tilde`` hold on the box iff they hold at the vertices.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .datamat import DataBlocks, numerical_rank
from .errors import NotReadyError, ShapeError, SolverError, VertexLimitError
from .predictive import DeePCConfig, IniBuffer
from .qp import QpSolver, QpStatus, QuadraticProgram

log = logging.getLogger(__name__)

PINV_RTOL = 1e-10
VERTEX_CAP = 4096


def _trunc_div(a: int, b: int) -> int:
    # truncation toward zero; operands here are non-negative but keep it explicit
    return int(a / b) if a * b >= 0 else -int(-a / b)


@dataclass(frozen=True)
class DisturbanceBox:
    """Uniform box ``[w_lo, w_hi]`` on ``q`` channels over an ``N``-step horizon, downsampled by ``M``."""

    q: int
    w_lo: float
    w_hi: float
    N: int
    M: int = 1

    def __post_init__(self):
        if self.q < 0:
            raise ValueError("q must be >= 0")
        if self.w_lo > self.w_hi:
            raise ValueError(f"w_lo={self.w_lo} exceeds w_hi={self.w_hi}")
        if not 1 <= self.M <= self.N:
            raise ValueError(f"downsampling factor M={self.M} must satisfy 1 <= M <= N={self.N}")

    @property
    def K(self) -> int:
        return _trunc_div(self.N, self.M)

    @property
    def n_r(self) -> int:
        return self.q * (self.K + 1)

    @property
    def n_vertices(self) -> int:
        return 2 ** self.n_r


def interpolation_weights(N: int, M: int) -> np.ndarray:
    """Scalar ``N x (K+1)`` matrix mapping downsampled points to the interpolated horizon."""
    if not 1 <= M <= N:
        raise ValueError(f"M={M} must satisfy 1 <= M <= N={N}")
    K = _trunc_div(N, M)
    i_bar = M * (K - 1)
    W = np.zeros((N, K + 1))
    for i in range(N):
        if i <= i_bar:
            j = _trunc_div(i, M)
            frac = (i % M) / M
            W[i, j] += 1.0 - frac
            if frac:
                W[i, j + 1] += frac
        else:
            frac = (i - i_bar) / (N - 1 - i_bar)
            W[i, K - 1] += 1.0 - frac
            W[i, K] += frac
    return W


def interpolation_matrix(q: int, N: int, M: int) -> np.ndarray:
    """``qN x q(K+1)`` channel-wise interpolation map (time-major on both sides)."""
    return np.kron(interpolation_weights(N, M), np.eye(q))


def interpolate_disturbance(w_tilde, N: int, M: int, q: int = 1) -> np.ndarray:
    """Piecewise-linear upsampling of the reduced disturbance vector to ``qN`` samples."""
    w_tilde = np.asarray(w_tilde, dtype=float).ravel()
    K = _trunc_div(N, M)
    if w_tilde.size != q * (K + 1):
        raise ShapeError(f"reduced vector must have length q*(K+1) = {q * (K + 1)}, got {w_tilde.size}")
    return interpolation_matrix(q, N, M) @ w_tilde


def enumerate_vertices(box: DisturbanceBox, cap: int = VERTEX_CAP) -> np.ndarray:
    """All ``2**n_r`` corners of the reduced box, one per row."""
    if box.n_vertices > cap:
        raise VertexLimitError(
            f"{box.n_vertices} vertices exceed the cap of {cap}; increase the downsampling factor M "
            f"(currently {box.M}) or shorten the horizon")
    if box.n_r == 0:
        return np.zeros((1, 0))
    return np.array(list(itertools.product((box.w_lo, box.w_hi), repeat=box.n_r)), dtype=float)


def toeplitz_expand(params, m: int, q: int, N: int) -> np.ndarray:
    """Strictly lower block-Toeplitz ``mN x qN`` matrix with block ``(i, j) = L_{i-j}``."""
    params = np.asarray(params, dtype=float).reshape(N - 1, m, q) if N > 1 else np.zeros((0, m, q))
    L = np.zeros((m * N, q * N))
    for d in range(1, N):
        blk = params[d - 1]
        for j in range(N - d):
            i = j + d
            L[i * m:(i + 1) * m, j * q:(j + 1) * q] = blk
    return L


def feedback_map(w_hat, m: int, q: int, N: int) -> np.ndarray:
    """Matrix ``B(w)`` with ``toeplitz_expand(theta) @ w == B(w) @ theta``."""
    w_hat = np.asarray(w_hat, dtype=float).reshape(N, q)
    B = np.zeros((m * N, m * q * max(N - 1, 0)))
    eye = np.eye(m)
    for i in range(1, N):
        for d in range(1, i + 1):
            # rows of sample i, parameter block d, contracted with w_{i-d}
            cols = slice((d - 1) * m * q, d * m * q)
            B[i * m:(i + 1) * m, cols] += np.kron(eye, w_hat[i - d][None, :])
    return B


@dataclass
class DfPolicy:
    v: np.ndarray
    L_params: np.ndarray
    m: int
    q: int
    N: int

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.L_params = np.asarray(self.L_params, dtype=float).reshape(max(self.N - 1, 0), self.m, self.q)

    @property
    def n_params(self) -> int:
        return self.m * self.q * (self.N - 1)

    @property
    def L(self) -> np.ndarray:
        return toeplitz_expand(self.L_params, self.m, self.q, self.N)

    def inputs(self, w_hat) -> np.ndarray:
        return self.v + self.L @ np.asarray(w_hat, dtype=float).ravel()


@dataclass
class MinMaxConfig(DeePCConfig):
    """DeePC settings plus the disturbance box and robust-solver options."""

    box: Optional[DisturbanceBox] = None
    fix_x_to_zero: bool = True
    sigma_w_weight: Optional[float] = None
    robust_tol: float = 1e-6
    robust_max_iter: int = 200
    vertex_cap: int = VERTEX_CAP

    def __post_init__(self):
        super().__post_init__()
        if self.box is None:
            raise ValueError("MinMaxConfig needs a DisturbanceBox")
        if self.box.N != self.N:
            raise ValueError(f"box horizon N={self.box.N} differs from config N={self.N}")
        if self.sigma_w_weight is not None and self.sigma_w_weight <= 0:
            raise ValueError("sigma_w_weight must be > 0 when given")


@dataclass
class RobustProblem:
    """Family of vertex quadratics ``f(z; w) = ||rho(z, w)||^2`` plus robust linear constraints.

    ``rho(z, w) = J0 z + e0 + sum_k w_k (Jw[k] z + ew[k])`` and the constraints
    read ``(C0 + sum_k w_k Cw[k]) z <= d0 + sum_k w_k dw[k]`` for every vertex.
    ``Jw`` / ``Cw`` are None when the curvature / constraint matrix does not
    depend on ``w``.
    """

    J0: np.ndarray
    e0: np.ndarray
    ew: np.ndarray
    vertices: np.ndarray
    Jw: Optional[np.ndarray] = None
    C0: Optional[np.ndarray] = None
    d0: Optional[np.ndarray] = None
    Cw: Optional[np.ndarray] = None
    dw: Optional[np.ndarray] = None
    slices: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.J0 = np.atleast_2d(np.asarray(self.J0, dtype=float))
        nres, nz = self.J0.shape
        self.e0 = np.asarray(self.e0, dtype=float).ravel()
        self.vertices = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        n_r = self.vertices.shape[1]
        self.ew = np.asarray(self.ew, dtype=float).reshape(n_r, nres)
        if self.e0.size != nres:
            raise ShapeError("e0 does not match the residual dimension of J0")
        if self.Jw is not None:
            self.Jw = np.asarray(self.Jw, dtype=float).reshape(n_r, nres, nz)
        if self.C0 is None:
            self.C0 = np.zeros((0, nz))
            self.d0 = np.zeros(0)
        self.C0 = np.asarray(self.C0, dtype=float).reshape(-1, nz)
        nc = self.C0.shape[0]
        self.d0 = np.asarray(self.d0, dtype=float).ravel()
        if self.Cw is not None:
            self.Cw = np.asarray(self.Cw, dtype=float).reshape(n_r, nc, nz)
        self.dw = np.zeros((n_r, nc)) if self.dw is None else np.asarray(self.dw, dtype=float).reshape(n_r, nc)

    @property
    def nz(self) -> int:
        return self.J0.shape[1]

    @property
    def n_r(self) -> int:
        return self.vertices.shape[1]

    @property
    def shared_hessian(self) -> bool:
        return self.Jw is None or not np.any(self.Jw)

    def jacobian(self, w) -> np.ndarray:
        if self.Jw is None:
            return self.J0
        return self.J0 + np.tensordot(np.asarray(w, dtype=float), self.Jw, axes=1)

    def offset(self, w) -> np.ndarray:
        return self.e0 + np.asarray(w, dtype=float) @ self.ew

    def residual(self, z, w) -> np.ndarray:
        return self.jacobian(w) @ z + self.offset(w)

    def value(self, z, w) -> float:
        r = self.residual(z, w)
        return float(r @ r)

    def residuals_at(self, z, W: np.ndarray) -> np.ndarray:
        """Residuals for every row of ``W``, shape ``(nres, len(W))``."""
        base = self.J0 @ z + self.e0
        B = self.ew.T.copy()
        if self.Jw is not None:
            B += np.einsum("krz,z->rk", self.Jw, z)
        return base[:, None] + B @ np.atleast_2d(W).T

    def values_at(self, z, W: np.ndarray) -> np.ndarray:
        R = self.residuals_at(z, W)
        return np.einsum("rv,rv->v", R, R)

    def worst_case(self, z):
        f = self.values_at(z, self.vertices)
        i = int(np.argmax(f))
        return float(f[i]), i

    def constraint_rows(self, W: Optional[np.ndarray] = None):
        """Stack constraints over vertices, dropping infinite bounds and duplicates."""
        W = self.vertices if W is None else np.atleast_2d(W)
        if self.C0.shape[0] == 0:
            return np.zeros((0, self.nz)), np.zeros(0)
        Cs, ds = [], []
        for w in W:
            C = self.C0 if self.Cw is None else self.C0 + np.tensordot(w, self.Cw, axes=1)
            Cs.append(C)
            ds.append(self.d0 + w @ self.dw)
            if self.Cw is None and not np.any(self.dw):
                break
        C = np.vstack(Cs)
        d = np.concatenate(ds)
        keep = np.isfinite(d)
        C, d = C[keep], d[keep]
        if C.shape[0] > 1:
            _, idx = np.unique(np.hstack([C, d[:, None]]), axis=0, return_index=True)
            idx.sort()
            C, d = C[idx], d[idx]
        return C, d

    def max_violation(self, z) -> float:
        C, d = self.constraint_rows()
        return float(np.max(C @ z - d, initial=0.0))


@dataclass
class RobustResult:
    z: np.ndarray
    value: float
    vertex_index: int
    vertex: np.ndarray
    lower_bound: float
    iterations: int
    status: str
    problem: RobustProblem
    policy: Optional[DfPolicy] = None

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    @property
    def gap(self) -> float:
        return self.value - self.lower_bound

    def part(self, name: str) -> np.ndarray:
        return self.z[self.problem.slices[name]].copy()

    @property
    def u(self) -> np.ndarray:
        """Nominal input plan: ``u`` for Min-Max, ``v`` for the DF variant."""
        key = "u" if "u" in self.problem.slices else "v"
        return self.part(key)

    def first_inputs(self, k: int) -> np.ndarray:
        m = self.problem.info.get("m", 1)
        return self.u[: k * m]


def _qp_or_fail(solver: QpSolver, qp: QuadraticProgram, what: str):
    sol = solver.solve(qp)
    if sol.status == QpStatus.INFEASIBLE:
        return None
    if not sol.optimal:
        log.debug("%s QP returned %s", what, sol.status.value)
    return sol


def _robust_dual_bound(problem: RobustProblem, W: np.ndarray, lam: np.ndarray, C, d) -> float:
    """Lagrangian lower bound ``min_z sum_v lam_v f_v(z)`` over the linear constraints."""
    keep = lam > 1e-14
    lam = lam[keep] / lam[keep].sum()
    Hs = np.zeros((problem.nz, problem.nz))
    cs = np.zeros(problem.nz)
    const = 0.0
    for lv, w in zip(lam, W[keep]):
        J = problem.jacobian(w)
        e = problem.offset(w)
        Hs += lv * (J.T @ J)
        cs += lv * (J.T @ e)
        const += lv * float(e @ e)
    qp = QuadraticProgram(2 * (Hs + Hs.T) / 2, 2 * cs, G=C, h=d, constant=const)
    sol = QpSolver(tol=1e-9).solve(qp)
    if not sol.optimal:
        return -np.inf
    # the QP objective is exact only to its tolerance; keep the bound conservative
    return sol.objective - 1e-9 * max(1.0, abs(sol.objective))


def minmax_solve(problem: RobustProblem, tol: float = 1e-6, max_iter: int = 200,
                 z0: Optional[np.ndarray] = None) -> RobustResult:
    """Minimize ``max_v f_v(z)`` over the vertices subject to the robust linear constraints.

    Epigraph cutting planes: vertex cuts are added one at a time (the current
    worst vertex). When all vertex quadratics share their curvature the
    master problem is exact on the working set and its value is a lower
    bound. Otherwise each master is the SQP model ``t + 1/2 d'H d`` with
    linearized cuts and ``H`` the multiplier-weighted vertex curvature, and a
    line search on the true worst case keeps iterates monotone.
    """
    W = np.unique(problem.vertices, axis=0)
    C, d = problem.constraint_rows(W)
    if problem.shared_hessian:
        return _solve_shared(problem, W, C, d, tol, max_iter)
    return _solve_sqp(problem, W, C, d, tol, max_iter, z0)


def _finish(problem, W, z, lower, it, status, policy=None) -> RobustResult:
    f = problem.values_at(z, W)
    i = int(np.argmax(f))
    # map back to the index in the original (non-unique) vertex list
    orig = int(np.flatnonzero(np.all(problem.vertices == W[i], axis=1))[0])
    return RobustResult(z, float(f[i]), orig, W[i].copy(), lower, it, status, problem, policy)


def _solve_shared(problem, W, C, d, tol, max_iter):
    nz = problem.nz
    J = problem.J0
    A = J.T @ J
    E = problem.e0[:, None] + problem.ew.T @ W.T          # offsets per vertex
    lin = 2.0 * (J.T @ E)                                   # columns: linear terms
    const = np.einsum("rv,rv->v", E, E)
    ridge = 1e-12 * max(1.0, np.trace(A) / max(nz, 1))
    P = np.zeros((nz + 1, nz + 1))
    P[:nz, :nz] = 2.0 * A + 2.0 * ridge * np.eye(nz)
    cvec = np.zeros(nz + 1)
    cvec[-1] = 1.0
    Cz = np.hstack([C, np.zeros((C.shape[0], 1))])
    solver = QpSolver(tol=1e-10)

    if len(W) == 1:
        qp = QuadraticProgram(2.0 * A, lin[:, 0], G=C, h=d, constant=const[0])
        sol = solver.solve(qp)
        if sol.status == QpStatus.INFEASIBLE:
            return _finish(problem, W, np.zeros(nz), -np.inf, 1, "infeasible")
        z = sol.z
        val = problem.values_at(z, W)[0]
        return _finish(problem, W, z, val - 1e-9 * max(1, abs(val)), 1,
                       "optimal" if sol.optimal else "max-iterations")

    # start from the minimizer of the mean vertex cost
    sol = solver.solve(QuadraticProgram(2.0 * A, lin.mean(axis=1), G=C, h=d))
    if sol.status == QpStatus.INFEASIBLE:
        return _finish(problem, W, np.zeros(nz), -np.inf, 1, "infeasible")
    z = sol.z
    f = z @ A @ z + lin.T @ z + const
    S = [int(np.argmax(f))]
    c_act = sol.mu > 0
    cut_act = []
    lower = -np.inf
    status = "max-iterations"
    it = 0
    for it in range(1, max_iter + 1):
        G = np.vstack([Cz, np.hstack([lin[:, S].T, -np.ones((len(S), 1))])])
        h = np.concatenate([d, -const[S]])
        guess = np.concatenate([c_act, cut_act + [True] * (len(S) - len(cut_act))])
        sol = solver.solve(QuadraticProgram(P, cvec, G=G, h=h), active=guess)
        if sol.status == QpStatus.INFEASIBLE:
            return _finish(problem, W, z, -np.inf, it, "infeasible")
        z = sol.z[:nz]
        c_act = sol.mu[:C.shape[0]] > 0
        cut_act = list(sol.mu[C.shape[0]:] > 0)
        master = float(z @ A @ z + sol.z[-1])
        lower = max(lower, master - 1e-9 * max(1.0, abs(master)))
        f = z @ A @ z + lin.T @ z + const
        F = float(f.max())
        if F - master <= tol * max(1.0, abs(F)):
            status = "optimal"
            break
        order = [int(i) for i in np.argsort(-f) if int(i) not in S]
        S.append(order[0])
    return _finish(problem, W, z, min(lower, problem.values_at(z, W).max()), it, status)


def _solve_sqp(problem, W, C, d, tol, max_iter, z0):
    nz = problem.nz
    solver = QpSolver(tol=1e-10)
    Js = [problem.jacobian(w) for w in W]
    es = [problem.offset(w) for w in W]

    def values(z):
        return problem.values_at(z, W)

    if z0 is None:
        # curvature-averaged starting point; tiny ridge keeps it unique
        Hm = sum(J.T @ J for J in Js) / len(W)
        cm = sum(J.T @ e for J, e in zip(Js, es)) / len(W)
        ridge = 1e-9 * max(1.0, np.trace(Hm) / nz)
        sol = solver.solve(QuadraticProgram(2 * (Hm + ridge * np.eye(nz)), 2 * cm, G=C, h=d))
        if sol.status == QpStatus.INFEASIBLE:
            return _finish(problem, W, np.zeros(nz), -np.inf, 1, "infeasible")
        z = sol.z
    else:
        z = np.asarray(z0, dtype=float).copy()

    f = values(z)
    F = float(f.max())
    S = [int(np.argmax(f))]
    lam = {S[0]: 1.0}
    status = "max-iterations"
    it = 0
    curv = [2.0 * (J.T @ J) for J in Js]
    scale = max(1.0, max(np.trace(c) for c in curv) / nz)
    mu_floor = 1e-8 * scale
    mu = mu_floor
    c_act = np.zeros(C.shape[0], bool)
    for it in range(1, max_iter + 1):
        for j in np.flatnonzero(f >= F - 1e-12 * max(1.0, abs(F))):
            if int(j) not in S:
                S.append(int(j))
        H = mu * np.eye(nz)
        for v, lv in lam.items():
            H += lv * curv[v]
        grads = np.array([2.0 * Js[v].T @ (Js[v] @ z + es[v]) for v in S])
        P = np.zeros((nz + 1, nz + 1))
        P[:nz, :nz] = H
        cvec = np.zeros(nz + 1)
        cvec[-1] = 1.0
        G = np.vstack([np.hstack([C, np.zeros((C.shape[0], 1))]),
                       np.hstack([grads, -np.ones((len(S), 1))])])
        h = np.concatenate([d - C @ z, -f[S]])
        guess = np.concatenate([c_act, [lam.get(v, 0.0) > 0 or v == S[-1] for v in S]])
        sol = solver.solve(QuadraticProgram(P, cvec, G=G, h=h), active=guess)
        if sol.status == QpStatus.INFEASIBLE:
            return _finish(problem, W, z, -np.inf, it, "infeasible")
        dz, t = sol.z[:nz], sol.z[-1]
        decrease = F - float(t + 0.5 * dz @ H @ dz)
        duals = sol.mu[C.shape[0]:]
        c_act = sol.mu[:C.shape[0]] > 0
        log.debug("sqp it=%d F=%.10g decrease=%.3g |S|=%d mu=%.2g", it, F, decrease, len(S), mu)
        if decrease <= tol * max(1.0, abs(F)) and mu <= 1e3 * mu_floor:
            status = "optimal"
            break
        alpha = 1.0
        blocking = None
        while True:
            f_new = values(z + alpha * dz)
            if blocking is None:
                # the vertex that caps the full model step joins the working set
                blocking = int(np.argmax(f_new))
                if blocking not in S:
                    S.append(blocking)
            if f_new.max() <= F - 1e-4 * alpha * decrease or alpha < 1e-10:
                break
            alpha *= 0.5
        if alpha < 1e-10:
            if mu > 1e3 * mu_floor or decrease <= tol * max(1.0, abs(F)):
                status = "stalled"
                break
            mu *= 100.0
            continue
        # proximal weight: stiffen after backtracking, relax after full steps
        mu = max(mu_floor, mu / 10.0) if alpha == 1.0 else mu * 10.0
        z = z + alpha * dz
        f = f_new
        F = float(f.max())
        tot = duals.sum()
        lam = {v: float(mv / tot) for v, mv in zip(S, duals) if mv > 0} if tot > 0 else {S[0]: 1.0}
        worst = int(np.argmax(f))
        if worst not in S:
            S.append(worst)
    lam_vec = np.zeros(len(W))
    for v, lv in lam.items():
        lam_vec[v] = lv
    if lam_vec.sum() <= 0:
        lam_vec[int(np.argmax(f))] = 1.0
    lower = _robust_dual_bound(problem, W, lam_vec, C, d)
    return _finish(problem, W, z, lower, it, status)


def _sqrt_psd(M: np.ndarray) -> np.ndarray:
    """Square root factor ``S`` with ``S.T @ S == M`` for a PSD matrix."""
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)).T


def _check(blocks: DataBlocks, cfg: MinMaxConfig, ini: IniBuffer):
    if blocks.T_ini != cfg.T_ini or blocks.N != cfg.N:
        raise ShapeError("blocks were built for a different T_ini/N than the config")
    q = blocks.q
    if cfg.box.q != q:
        raise ShapeError(f"disturbance box has q={cfg.box.q} but the data has q={q}")
    if ini.m != blocks.m or ini.p != blocks.p or ini.q != q or ini.T_ini != cfg.T_ini:
        raise ShapeError("initial-trajectory buffer does not match the data dimensions")
    if not ini.ready:
        raise NotReadyError(f"initial trajectory holds {ini.count} of {ini.T_ini} samples")


def _formulate(blocks: DataBlocks, cfg: MinMaxConfig, ini: IniBuffer, feedback: bool) -> RobustProblem:
    _check(blocks, cfg, ini)
    m, p, q, N, T = blocks.m, blocks.p, blocks.q, cfg.N, cfg.T_ini
    box = cfg.box
    parts = [blocks.U_P] + ([blocks.W_P] if q else []) + [blocks.Y_P, blocks.U_F] + ([blocks.W_F] if q else [])
    H = np.vstack(parts)
    rank = numerical_rank(H)
    full = min(H.shape)
    if rank < H.shape[0]:
        log.info("data matrix H has numerical rank %d of %d rows", rank, H.shape[0])
    Hp = np.linalg.pinv(H, rcond=PINV_RTOL)
    sizes = [m * T] + ([q * T] if q else []) + [p * T, m * N] + ([q * N] if q else [])
    cols = np.split(Hp, np.cumsum(sizes)[:-1], axis=1)
    if q:
        G_up, G_wp, G_yp, G_u, G_w = cols
    else:
        G_up, G_yp, G_u = cols
        G_wp = np.zeros((H.shape[1], 0))
        G_w = np.zeros((H.shape[1], 0))

    w_ini = ini.w_ini
    g0 = G_up @ ini.u_ini + G_yp @ ini.y_ini + (G_wp @ w_ini if q else 0.0)
    W_vertices = enumerate_vertices(box, cfg.vertex_cap)
    n_r = box.n_r
    Iw = interpolation_matrix(q, N, box.M) if q else np.zeros((0, 0))
    Gwt = G_w @ Iw if q else np.zeros((H.shape[1], 0))

    # decision vector layout
    slices = {}
    offset = 0

    def add(name, size):
        nonlocal offset
        slices[name] = slice(offset, offset + size)
        offset += size

    n_theta = m * q * (N - 1)
    if feedback:
        add("v", m * N)
        add("theta", n_theta)
    else:
        add("u", m * N)
    add("sigma_y", p * T)
    if cfg.sigma_w_weight is not None and q:
        add("sigma_w", q * T)
    null_basis = None
    if not cfg.fix_x_to_zero:
        _, s, Vt = np.linalg.svd(H, full_matrices=True)
        null_basis = Vt[rank:].T
        add("x", null_basis.shape[1])
    nz = offset

    def select(name):
        S = np.zeros((slices[name].stop - slices[name].start, nz))
        S[:, slices[name]] = np.eye(S.shape[0])
        return S

    key_u = "v" if feedback else "u"
    Gz = G_u @ select(key_u) + G_yp @ select("sigma_y")
    if "sigma_w" in slices:
        Gz = Gz + G_wp @ select("sigma_w")
    if null_basis is not None:
        Gz = Gz + null_basis @ select("x")

    R, Q, r = cfg.weights(m, p)
    Rh, Qh = _sqrt_psd(R), _sqrt_psd(Q)
    lam_g = 0.0 if feedback else cfg.lambda_g

    YG = blocks.Y_F @ Gz
    rows_J = [Rh @ select(key_u), Qh @ YG]
    rows_e = [np.zeros(m * N), Qh @ (blocks.Y_F @ g0 - r)]
    rows_ew = [np.zeros((n_r, m * N)), (Qh @ blocks.Y_F @ Gwt).T]
    if lam_g > 0:
        rows_J.append(np.sqrt(lam_g) * Gz)
        rows_e.append(np.sqrt(lam_g) * g0)
        rows_ew.append(np.sqrt(lam_g) * Gwt.T)
    rows_J.append(np.sqrt(cfg.lambda_y) * select("sigma_y"))
    rows_e.append(np.zeros(p * T))
    rows_ew.append(np.zeros((n_r, p * T)))
    if "sigma_w" in slices:
        rows_J.append(np.sqrt(cfg.sigma_w_weight) * select("sigma_w"))
        rows_e.append(np.zeros(q * T))
        rows_ew.append(np.zeros((n_r, q * T)))
    J0 = np.vstack(rows_J)
    e0 = np.concatenate(rows_e)
    ew = np.hstack(rows_ew) if n_r else np.zeros((0, J0.shape[0]))

    # u at vertex: u = Su z + sum_k w_k Bk z  (Bk nonzero only with feedback)
    Su = select(key_u)
    Jw = None
    Cw = None
    Uk = None
    if feedback and n_r and n_theta:
        St = select("theta")
        Uk = np.array([feedback_map(Iw[:, k], m, q, N) @ St for k in range(n_r)])  # (n_r, mN, nz)
        Jw = np.array([np.vstack([np.zeros((m * N, nz)), Qh @ blocks.Y_F @ G_u @ Uk[k]]
                                 + [np.zeros((rr.shape[0], nz)) for rr in rows_J[2:]])
                       for k in range(n_r)])

    u_lo, u_hi = cfg.input_box(m)
    y_lo, y_hi = cfg.output_box(p)
    yg0 = blocks.Y_F @ g0
    ywt = blocks.Y_F @ Gwt
    C0 = np.vstack([Su, -Su, YG, -YG])
    d0 = np.concatenate([u_hi, -u_lo, y_hi - yg0, yg0 - y_lo])
    dw = np.hstack([np.zeros((n_r, 2 * m * N)), -ywt.T, ywt.T]) if n_r else None
    if Uk is not None:
        YU = np.array([blocks.Y_F @ G_u @ Uk[k] for k in range(n_r)])
        Cw = np.concatenate([Uk, -Uk, YU, -YU], axis=1)

    info = dict(m=m, p=p, q=q, N=N, T_ini=T, H_rank=rank, H_rows=H.shape[0], H_full=full,
                feedback=feedback, lambda_g=lam_g)
    return RobustProblem(J0, e0, ew, W_vertices, Jw, C0, d0, Cw, dw, slices, info)


def minmax_formulate(blocks: DataBlocks, cfg: MinMaxConfig, ini: IniBuffer) -> RobustProblem:
    """Vertex quadratics in ``z = (u, sigma_y[, sigma_w][, x])`` for the Min-Max problem."""
    return _formulate(blocks, cfg, ini, feedback=False)


def df_minmax_formulate(blocks: DataBlocks, cfg: MinMaxConfig, ini: IniBuffer) -> RobustProblem:
    """Vertex quadratics in ``z = (v, theta, sigma_y, ...)`` for ``u = v + L(theta) w_hat``.

    The regularization on ``g`` is dropped in this variant.
    """
    return _formulate(blocks, cfg, ini, feedback=True)


def minmax_step(blocks: DataBlocks, cfg: MinMaxConfig, ini: IniBuffer) -> RobustResult:
    problem = minmax_formulate(blocks, cfg, ini)
    res = minmax_solve(problem, cfg.robust_tol, cfg.robust_max_iter)
    if not res.optimal:
        raise SolverError(f"Min-Max solve ended with status {res.status}", res)
    return res


def df_minmax_solve(blocks: DataBlocks, cfg: MinMaxConfig, ini: IniBuffer) -> RobustResult:
    """Solve the disturbance-feedback problem; ``result.policy`` holds ``(v, L)``.

    The non-feedback optimum (with ``L = 0``) seeds the iteration, so the
    reported worst case never exceeds the open-loop one.
    """
    problem = df_minmax_formulate(blocks, cfg, ini)
    m, q, N = problem.info["m"], problem.info["q"], problem.info["N"]
    z0 = None
    if problem.Jw is not None:
        base = _formulate(blocks, _without_lambda_g(cfg), ini, feedback=False)
        res0 = minmax_solve(base, cfg.robust_tol, cfg.robust_max_iter)
        if res0.status != "infeasible":
            z0 = np.zeros(problem.nz)
            for name, sl in problem.slices.items():
                src = "u" if name == "v" else name
                if src in base.slices:
                    z0[sl] = res0.z[base.slices[src]]
    res = minmax_solve(problem, cfg.robust_tol, cfg.robust_max_iter, z0=z0)
    theta = res.z[problem.slices["theta"]] if "theta" in problem.slices else np.zeros(0)
    res.policy = DfPolicy(res.z[problem.slices["v"]], theta, m, q, N)
    if not res.optimal:
        raise SolverError(f"DF Min-Max solve ended with status {res.status}", res)
    return res


def _without_lambda_g(cfg: MinMaxConfig) -> MinMaxConfig:
    return replace(cfg, lambda_g=0.0)


class MinMaxController:
    def __init__(self, blocks: DataBlocks, cfg: MinMaxConfig):
        if not blocks.has_disturbance and cfg.box.q:
            raise ShapeError("Min-Max control needs disturbance data blocks")
        self.blocks, self.cfg = blocks, cfg
        self.m, self.p, self.q = blocks.m, blocks.p, blocks.q
        self.k = cfg.k
        self.last: Optional[RobustResult] = None

    def step(self, ini: IniBuffer) -> np.ndarray:
        self.last = minmax_step(self.blocks, self.cfg, ini)
        return self.last.first_inputs(self.k)


class DfMinMaxController(MinMaxController):
    def step(self, ini: IniBuffer) -> np.ndarray:
        self.last = df_minmax_solve(self.blocks, self.cfg, ini)
        return self.last.first_inputs(self.k)
