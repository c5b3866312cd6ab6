"""Regularized DeePC and the least-squares multi-step (PEM-MPC) baseline."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .datamat import HANKEL, PAGE, DataBlocks, as_trajectory, denoise_outputs, partition
from .errors import NotReadyError, ShapeError, SolverError
from .qp import QpSolution, QpSolver, QuadraticProgram

PINV_RTOL = 1e-10

Weight = Union[float, np.ndarray]


def block_weight(W, c: int, N: int) -> np.ndarray:
    """Expand a scalar, per-sample ``c x c`` or full ``cN x cN`` weight to ``cN x cN``."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        return float(W) * np.eye(c * N)
    if W.ndim == 1 and W.size == c:
        return np.kron(np.eye(N), np.diag(W))
    if W.shape == (c, c):
        return np.kron(np.eye(N), W)
    if W.shape == (c * N, c * N):
        return W.copy()
    raise ShapeError(f"weight of shape {W.shape} fits neither {c}x{c} nor {c * N}x{c * N}")


def expand_vector(v, c: int, N: int, name: str = "vector") -> np.ndarray:
    """Broadcast a scalar, per-sample ``c`` vector or full ``cN`` vector to length ``cN``."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 1:
        return np.full(c * N, v[0])
    if v.size == c:
        return np.tile(v, N)
    if v.size == c * N:
        return v.copy()
    raise ShapeError(f"{name} of length {v.size} fits neither {c} nor {c * N}")


@dataclass
class DeePCConfig:
    """DeePC hyperparameters.

    Weights and bounds may be scalars, per-sample arrays or full-horizon
    arrays; they are expanded once the channel counts are known.
    """

    T_ini: int
    N: int
    k: Optional[int] = None
    lambda_g: float = 20.0
    lambda_y: float = 2000.0
    Q: Weight = 400.0
    R: Weight = 1.0
    r: Optional[np.ndarray] = None
    u_min: Weight = -np.inf
    u_max: Weight = np.inf
    y_min: Weight = -np.inf
    y_max: Weight = np.inf
    kind: str = HANKEL
    sigma0: float = 0.0
    svd_on_hankel: bool = False
    delta_u_weight: float = 0.0

    def __post_init__(self):
        if self.k is None:
            self.k = self.N
        if self.T_ini < 1 or self.N < 1:
            raise ValueError(f"T_ini={self.T_ini} and N={self.N} must be >= 1")
        if not 1 <= self.k <= self.N:
            raise ValueError(f"control horizon k={self.k} must satisfy 1 <= k <= N={self.N}")
        if self.lambda_y <= 0:
            raise ValueError("lambda_y must be > 0")
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be >= 0")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if self.delta_u_weight < 0:
            raise ValueError("delta_u_weight must be >= 0")
        if self.kind not in (HANKEL, PAGE):
            raise ValueError(f"kind must be 'hankel' or 'page', got {self.kind!r}")
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)):
            raise ValueError("u_min must not exceed u_max")
        if np.any(np.asarray(self.y_min) > np.asarray(self.y_max)):
            raise ValueError("y_min must not exceed y_max")

    @property
    def L(self) -> int:
        return self.T_ini + self.N

    def weights(self, m: int, p: int):
        """Return ``(R, Q, r)`` expanded to horizon size."""
        R = block_weight(self.R, m, self.N)
        Q = block_weight(self.Q, p, self.N)
        r = np.zeros(p * self.N) if self.r is None else expand_vector(self.r, p, self.N, "r")
        return R, Q, r

    def input_box(self, m: int):
        return expand_vector(self.u_min, m, self.N, "u_min"), expand_vector(self.u_max, m, self.N, "u_max")

    def output_box(self, p: int):
        return expand_vector(self.y_min, p, self.N, "y_min"), expand_vector(self.y_max, p, self.N, "y_max")


class IniBuffer:
    """Ring buffer holding the ``T_ini`` most recent input/output (and disturbance) samples."""

    def __init__(self, T_ini: int, m: int, p: int, q: int = 0):
        if T_ini < 1:
            raise ValueError("T_ini must be >= 1")
        self.T_ini, self.m, self.p, self.q = T_ini, m, p, q
        self._u = deque(maxlen=T_ini)
        self._y = deque(maxlen=T_ini)
        self._w = deque(maxlen=T_ini)

    def copy(self) -> "IniBuffer":
        out = IniBuffer(self.T_ini, self.m, self.p, self.q)
        out._u.extend(self._u)
        out._y.extend(self._y)
        out._w.extend(self._w)
        return out

    def push(self, u, y, w=None) -> None:
        u = np.asarray(u, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if u.size != self.m or y.size != self.p:
            raise ShapeError(f"expected u of length {self.m} and y of length {self.p}, "
                             f"got {u.size} and {y.size}")
        if self.q:
            if w is None:
                raise ShapeError("this buffer tracks disturbances; w is required")
            w = np.asarray(w, dtype=float).ravel()
            if w.size != self.q:
                raise ShapeError(f"expected w of length {self.q}, got {w.size}")
            self._w.append(w.copy())
        self._u.append(u.copy())
        self._y.append(y.copy())

    def extend(self, u_block, y_block, w_block=None, k: Optional[int] = None) -> None:
        u_block = np.asarray(u_block, dtype=float).ravel()
        y_block = np.asarray(y_block, dtype=float).ravel()
        if u_block.size % self.m:
            raise ShapeError(f"input block of length {u_block.size} is not a multiple of m={self.m}")
        n = u_block.size // self.m
        if k is not None and n != k:
            raise ShapeError(f"block holds {n} samples, expected k={k}")
        if y_block.size != n * self.p:
            raise ShapeError(f"output block must hold {n * self.p} values, got {y_block.size}")
        if self.q:
            w_block = np.asarray(w_block, dtype=float).ravel() if w_block is not None else None
            if w_block is None or w_block.size != n * self.q:
                raise ShapeError(f"disturbance block must hold {n * self.q} values")
        for i in range(n):
            w = w_block[i * self.q:(i + 1) * self.q] if self.q else None
            self.push(u_block[i * self.m:(i + 1) * self.m], y_block[i * self.p:(i + 1) * self.p], w)

    @property
    def count(self) -> int:
        return len(self._u)

    @property
    def ready(self) -> bool:
        return len(self._u) == self.T_ini

    def _require(self):
        if not self.ready:
            raise NotReadyError(f"initial trajectory holds {len(self._u)} of {self.T_ini} samples")

    @property
    def u_ini(self) -> np.ndarray:
        self._require()
        return np.concatenate(self._u)

    @property
    def y_ini(self) -> np.ndarray:
        self._require()
        return np.concatenate(self._y)

    @property
    def w_ini(self) -> np.ndarray:
        self._require()
        return np.concatenate(self._w) if self.q else np.zeros(0)

    @property
    def last_u(self) -> np.ndarray:
        return self._u[-1].copy() if self._u else np.zeros(self.m)


def update_ini(ini: IniBuffer, u_block, y_block, w_block=None, k: Optional[int] = None) -> IniBuffer:
    """Return a copy of ``ini`` with the block of ``k`` new samples appended."""
    out = ini.copy()
    out.extend(u_block, y_block, w_block, k)
    return out


def build_blocks(u, y, cfg: DeePCConfig, w=None) -> DataBlocks:
    """Partition collected data as ``cfg`` asks, including Page truncation and SVD filtering.

    Page matrices need the record length to be a multiple of ``T_ini + N``;
    trailing samples beyond the last full segment are dropped.
    """
    u, y = as_trajectory(u), as_trajectory(y)
    if w is not None:
        w = as_trajectory(w)
    if cfg.kind == PAGE:
        T = (u.T // cfg.L) * cfg.L
        if T == 0:
            raise ShapeError(f"need at least T_ini + N = {cfg.L} samples for a Page matrix")
        u, y = u.segment(0, T), y.segment(0, T)
        w = w.segment(0, T) if w is not None else None
    blocks = partition(u, y, w, cfg.T_ini, cfg.N, cfg.kind)
    if cfg.sigma0 > 0:
        blocks = denoise_outputs(blocks, y, cfg.sigma0, allow_hankel=cfg.svd_on_hankel)
    return blocks


def _diff_operator(m: int, N: int) -> np.ndarray:
    """``S u`` gives ``(u_0, u_1 - u_0, ...)`` blockwise; the ``u_{-1}`` term enters the offset."""
    S = np.eye(m * N)
    S[m:, :-m] -= np.eye(m * (N - 1))
    return S


def _check_dims(blocks: DataBlocks, cfg: DeePCConfig, ini: IniBuffer):
    if blocks.T_ini != cfg.T_ini or blocks.N != cfg.N:
        raise ShapeError(f"blocks built for T_ini={blocks.T_ini}, N={blocks.N}; "
                         f"config has T_ini={cfg.T_ini}, N={cfg.N}")
    if ini.T_ini != cfg.T_ini or ini.m != blocks.m or ini.p != blocks.p:
        raise ShapeError("initial-trajectory buffer does not match the data dimensions")
    if not ini.ready:
        raise NotReadyError(f"initial trajectory holds {ini.count} of {ini.T_ini} samples")


def deepc_hessian(blocks: DataBlocks, cfg: DeePCConfig) -> np.ndarray:
    """Hessian of the DeePC QP in ``g``; it depends on the data only, not on the initial trajectory."""
    m, p, N = blocks.m, blocks.p, cfg.N
    R, Q, _ = cfg.weights(m, p)
    U_F, Y_F, Y_P = blocks.U_F, blocks.Y_F, blocks.Y_P
    P = U_F.T @ R @ U_F + Y_F.T @ (Q @ Y_F) + cfg.lambda_y * (Y_P.T @ Y_P)
    P[np.diag_indices_from(P)] += cfg.lambda_g
    if cfg.delta_u_weight > 0:
        S = _diff_operator(m, N) @ U_F
        P += cfg.delta_u_weight * (S.T @ S)
    return 2.0 * (0.5 * (P + P.T))


def deepc_formulate(blocks: DataBlocks, cfg: DeePCConfig, ini: IniBuffer,
                    w_future=None, hessian: Optional[np.ndarray] = None) -> QuadraticProgram:
    """QP in ``g`` with ``u = U_F g``, ``y = Y_F g`` and ``sigma_y = Y_P g - y_ini`` substituted.

    If the blocks carry disturbance rows, the disturbance is pinned to
    ``w_ini`` in the past and to ``w_future`` (zeros by default) in the future.
    ``hessian`` may pass a cached :func:`deepc_hessian`.
    """
    _check_dims(blocks, cfg, ini)
    m, p, N = blocks.m, blocks.p, cfg.N
    R, Q, r = cfg.weights(m, p)
    U_F, Y_F, Y_P = blocks.U_F, blocks.Y_F, blocks.Y_P
    y_ini = ini.y_ini

    P2 = deepc_hessian(blocks, cfg) if hessian is None else hessian
    c = -(Y_F.T @ (Q @ r)) - cfg.lambda_y * (Y_P.T @ y_ini)
    const = float(r @ Q @ r + cfg.lambda_y * y_ini @ y_ini)
    if cfg.delta_u_weight > 0:
        S = _diff_operator(m, N) @ U_F
        e = np.zeros(m * N)
        e[:m] = ini.last_u
        c -= cfg.delta_u_weight * (S.T @ e)
        const += cfg.delta_u_weight * float(e @ e)

    A_eq, b_eq = [blocks.U_P], [ini.u_ini]
    if blocks.has_disturbance:
        if ini.q != blocks.q:
            raise ShapeError(f"buffer tracks q={ini.q} disturbances, blocks have q={blocks.q}")
        wf = np.zeros(blocks.q * N) if w_future is None else expand_vector(w_future, blocks.q, N, "w_future")
        A_eq += [blocks.W_P, blocks.W_F]
        b_eq += [ini.w_ini, wf]

    u_lo, u_hi = cfg.input_box(m)
    y_lo, y_hi = cfg.output_box(p)
    G = np.vstack([U_F, -U_F, Y_F, -Y_F])
    h = np.concatenate([u_hi, -u_lo, y_hi, -y_lo])
    return QuadraticProgram(P2, 2.0 * c, np.vstack(A_eq), np.concatenate(b_eq), G, h, const)


@dataclass
class DeePCSolution:
    u: np.ndarray
    y: np.ndarray
    g: np.ndarray
    sigma_y: np.ndarray
    qp: QpSolution

    @property
    def cost(self) -> float:
        return self.qp.objective


def deepc_solve(blocks: DataBlocks, cfg: DeePCConfig, ini: IniBuffer,
                solver: Optional[QpSolver] = None, w_future=None,
                hessian: Optional[np.ndarray] = None) -> DeePCSolution:
    qp = deepc_formulate(blocks, cfg, ini, w_future, hessian)
    solver = solver or QpSolver()
    sol = solver.solve(qp)
    plan = DeePCSolution(blocks.U_F @ sol.z, blocks.Y_F @ sol.z, sol.z, blocks.Y_P @ sol.z - ini.y_ini, sol)
    if not sol.optimal:
        raise SolverError(f"DeePC QP ended with status {sol.status.value}", plan)
    return plan


def deepc_step(blocks: DataBlocks, cfg: DeePCConfig, ini: IniBuffer,
               solver: Optional[QpSolver] = None) -> np.ndarray:
    """First ``k`` optimal inputs (length ``k*m``) of the DeePC plan."""
    plan = deepc_solve(blocks, cfg, ini, solver)
    return plan.u[: cfg.k * blocks.m].copy()


@dataclass
class ArxPredictor:
    """Explicit multi-step predictor ``y = Phi @ col(u_ini, y_ini, u)``."""

    Phi: np.ndarray
    m: int
    p: int
    T_ini: int
    N: int

    @property
    def Phi_ini(self) -> np.ndarray:
        return self.Phi[:, : (self.m + self.p) * self.T_ini]

    @property
    def Phi_u(self) -> np.ndarray:
        return self.Phi[:, (self.m + self.p) * self.T_ini:]

    def predict(self, u_ini, y_ini, u) -> np.ndarray:
        return self.Phi @ np.concatenate([np.ravel(u_ini), np.ravel(y_ini), np.ravel(u)])


def pem_fit(blocks: DataBlocks) -> ArxPredictor:
    """Least-squares multi-step predictor ``Y_F pinv(col(U_P, Y_P, U_F))``."""
    Z = np.vstack([blocks.U_P, blocks.Y_P, blocks.U_F])
    if not np.any(Z):
        raise ValueError("col(U_P, Y_P, U_F) is identically zero")
    Phi = blocks.Y_F @ np.linalg.pinv(Z, rcond=PINV_RTOL)
    return ArxPredictor(Phi, blocks.m, blocks.p, blocks.T_ini, blocks.N)


def pem_mpc_formulate(pred: ArxPredictor, cfg: DeePCConfig, ini: IniBuffer) -> tuple:
    if pred.T_ini != cfg.T_ini or pred.N != cfg.N:
        raise ShapeError("predictor horizon does not match the config")
    if not ini.ready:
        raise NotReadyError(f"initial trajectory holds {ini.count} of {ini.T_ini} samples")
    m, p, N = pred.m, pred.p, cfg.N
    R, Q, r = cfg.weights(m, p)
    B = pred.Phi_u
    y0 = pred.Phi_ini @ np.concatenate([ini.u_ini, ini.y_ini])
    QB = Q @ B
    P = R + B.T @ QB
    c = QB.T @ (y0 - r)
    const = float((y0 - r) @ Q @ (y0 - r))
    if cfg.delta_u_weight > 0:
        S = _diff_operator(m, N)
        e = np.zeros(m * N)
        e[:m] = ini.last_u
        P = P + cfg.delta_u_weight * (S.T @ S)
        c = c - cfg.delta_u_weight * (S.T @ e)
        const += cfg.delta_u_weight * float(e @ e)
    P = 0.5 * (P + P.T)
    u_lo, u_hi = cfg.input_box(m)
    y_lo, y_hi = cfg.output_box(p)
    I = np.eye(m * N)
    G = np.vstack([I, -I, B, -B])
    h = np.concatenate([u_hi, -u_lo, y_hi - y0, y0 - y_lo])
    return QuadraticProgram(2.0 * P, 2.0 * c, G=G, h=h, constant=const), y0


def pem_mpc_solve(pred: ArxPredictor, cfg: DeePCConfig, ini: IniBuffer,
                  solver: Optional[QpSolver] = None):
    """Return ``(u_plan, y_plan, qp_solution)``."""
    qp, y0 = pem_mpc_formulate(pred, cfg, ini)
    sol = (solver or QpSolver()).solve(qp)
    y = y0 + pred.Phi_u @ sol.z
    if not sol.optimal:
        raise SolverError(f"PEM-MPC QP ended with status {sol.status.value}", sol)
    return sol.z, y, sol


def pem_mpc_step(pred: ArxPredictor, cfg: DeePCConfig, ini: IniBuffer,
                 solver: Optional[QpSolver] = None) -> np.ndarray:
    u, _, _ = pem_mpc_solve(pred, cfg, ini, solver)
    return u[: cfg.k * pred.m].copy()


def estimate_reference(y) -> np.ndarray:
    """Per-channel steady-state guess: midpoint of the recorded oscillation extremes."""
    data = as_trajectory(y).data
    return 0.5 * (data.max(axis=0) + data.min(axis=0))


class DeePCController:
    """Receding-horizon DeePC on fixed data blocks."""

    def __init__(self, blocks: DataBlocks, cfg: DeePCConfig, solver: Optional[QpSolver] = None):
        self.blocks = blocks
        self.cfg = cfg
        self.solver = solver or QpSolver()
        self.m, self.p, self.q = blocks.m, blocks.p, blocks.q
        self.k = cfg.k
        self.hessian = deepc_hessian(blocks, cfg)
        self.last: Optional[DeePCSolution] = None

    @classmethod
    def from_data(cls, u, y, cfg: DeePCConfig, w=None, solver=None) -> "DeePCController":
        return cls(build_blocks(u, y, cfg, w), cfg, solver)

    def step(self, ini: IniBuffer) -> np.ndarray:
        self.last = deepc_solve(self.blocks, self.cfg, ini, self.solver, hessian=self.hessian)
        return self.last.u[: self.k * self.m].copy()


class PemMpcController:
    """Receding-horizon certainty-equivalence MPC on the least-squares predictor."""

    def __init__(self, pred: ArxPredictor, cfg: DeePCConfig, solver: Optional[QpSolver] = None):
        self.pred = pred
        self.cfg = cfg
        self.solver = solver or QpSolver()
        self.m, self.p, self.q = pred.m, pred.p, 0
        self.k = cfg.k

    @classmethod
    def from_data(cls, u, y, cfg: DeePCConfig, solver=None) -> "PemMpcController":
        # the predictor is always fitted on raw data; matrix kind and filtering belong to DeePC
        plain = replace(cfg, sigma0=0.0)
        return cls(pem_fit(build_blocks(u, y, plain)), cfg, solver)

    def step(self, ini: IniBuffer) -> np.ndarray:
        return pem_mpc_step(self.pred, self.cfg, ini, self.solver)
