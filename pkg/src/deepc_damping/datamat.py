"""Trajectories, Hankel/Page data matrices and their rank and denoising tools.

Every multi-channel signal is stored time-major: sample ``t`` of channel ``r``
lives at flat index ``t * channels + r``. Block data matrices follow the same
convention, so block-row ``i`` of a depth-``L`` matrix holds the ``c`` channels
of the ``i``-th sample of each window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

RANK_RTOL = 1e-8

HANKEL = "hankel"
PAGE = "page"


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled multi-channel signal.

    ``data`` has shape ``(T, channels)``; ``Ts`` is only used for the time
    column of CSV exports.
    """

    data: np.ndarray
    Ts: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"trajectory data must be (T, c) with T, c >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1).copy()

    @classmethod
    def from_flat(cls, vec, channels: int, Ts: float = 1.0) -> "Trajectory":
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size % channels:
            raise ShapeError(f"{vec.size} samples cannot be split into {channels} channels")
        return cls(vec.reshape(-1, channels), Ts)

    @classmethod
    def zeros(cls, T: int, channels: int, Ts: float = 1.0) -> "Trajectory":
        return cls(np.zeros((T, channels)), Ts)

    def segment(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.data[start:stop], self.Ts)

    def to_csv(self, path) -> None:
        write_csv(path, self.data, self.Ts, [f"ch{i}" for i in range(self.channels)])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t":
            raise ShapeError(f"{path}: first CSV column must be 't'")
        arr = np.array([[float(v) for v in row] for row in body])
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ShapeError(f"{path}: no samples")
        Ts = float(arr[1, 0] - arr[0, 0]) if arr.shape[0] > 1 else 1.0
        return cls(arr[:, 1:], Ts)


def write_csv(path, data: np.ndarray, Ts: float, names: Sequence[str]) -> None:
    """Write a ``t,<names>`` CSV with LF line endings and ``repr`` floats."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", *names])
        for i, row in enumerate(np.asarray(data)):
            writer.writerow([repr(round(i * Ts, 12)), *(repr(float(v)) for v in row)])


def as_trajectory(x) -> Trajectory:
    return x if isinstance(x, Trajectory) else Trajectory(x)


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank counting singular values above ``rtol`` times the largest one."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0
    if max(M.shape) > 4 * min(M.shape):
        # long data matrices: the triangular QR factor has the same singular values
        M = scipy.linalg.qr(M.T if M.shape[1] > M.shape[0] else M, mode="r")[0]
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def hankel(traj, L: int) -> np.ndarray:
    """Block Hankel matrix of depth ``L``; column ``j`` is ``col(x_j, ..., x_{j+L-1})``."""
    data = as_trajectory(traj).data
    T, c = data.shape
    if not 1 <= L <= T:
        raise ShapeError(f"Hankel depth L={L} must satisfy 1 <= L <= T={T}")
    windows = sliding_window_view(data, L, axis=0)  # (T-L+1, c, L)
    return np.ascontiguousarray(windows.transpose(0, 2, 1).reshape(T - L + 1, L * c).T)


def page(traj, L: int) -> np.ndarray:
    """Block Page matrix of depth ``L``: disjoint consecutive length-``L`` segments."""
    data = as_trajectory(traj).data
    T, c = data.shape
    if L < 1 or T % L:
        raise ShapeError(f"Page depth L={L} must divide the trajectory length T={T}")
    return np.ascontiguousarray(data.reshape(T // L, L * c).T)


def is_persistently_exciting(u, L: int) -> bool:
    """True iff ``hankel(u, L)`` has full row rank (numerically)."""
    u = as_trajectory(u)
    m = u.channels
    if L < 1 or u.T < (m + 1) * L - 1:
        return False
    return numerical_rank(hankel(u, L)) == m * L


def check_identifiability_rank(u, y, L: int, n: int) -> bool:
    """True iff the stacked depth-``L`` Hankel matrix of ``(u, y)`` has rank ``mL + n``."""
    u, y = as_trajectory(u), as_trajectory(y)
    if u.T != y.T:
        raise ShapeError(f"u has {u.T} samples but y has {y.T}")
    if L > u.T:
        return False
    joint = np.vstack([hankel(u, L), hankel(y, L)])
    return numerical_rank(joint) == u.channels * L + n


@dataclass(frozen=True)
class DataBlocks:
    """Past/future partition of the input, output and (optional) disturbance data matrices."""

    U_P: np.ndarray
    U_F: np.ndarray
    Y_P: np.ndarray
    Y_F: np.ndarray
    T_ini: int
    N: int
    kind: str
    W_P: Optional[np.ndarray] = None
    W_F: Optional[np.ndarray] = None

    @property
    def H_c(self) -> int:
        return self.U_P.shape[1]

    @property
    def m(self) -> int:
        return self.U_P.shape[0] // self.T_ini

    @property
    def p(self) -> int:
        return self.Y_P.shape[0] // self.T_ini

    @property
    def q(self) -> int:
        return 0 if self.W_P is None else self.W_P.shape[0] // self.T_ini

    @property
    def has_disturbance(self) -> bool:
        return self.W_P is not None

    def replace_outputs(self, Y_P: np.ndarray, Y_F: np.ndarray) -> "DataBlocks":
        if Y_P.shape != self.Y_P.shape or Y_F.shape != self.Y_F.shape:
            raise ShapeError("replacement output blocks must keep their shapes")
        return DataBlocks(self.U_P, self.U_F, Y_P, Y_F, self.T_ini, self.N, self.kind,
                          self.W_P, self.W_F)

    def without_disturbance(self) -> "DataBlocks":
        return DataBlocks(self.U_P, self.U_F, self.Y_P, self.Y_F, self.T_ini, self.N, self.kind)


def _build(traj, L: int, kind: str) -> np.ndarray:
    if kind == HANKEL:
        return hankel(traj, L)
    if kind == PAGE:
        return page(traj, L)
    raise ValueError(f"unknown matrix kind {kind!r}; expected 'hankel' or 'page'")


def partition(u, y, w=None, T_ini: int = 1, N: int = 1, kind: str = HANKEL) -> DataBlocks:
    """Split depth-``T_ini + N`` data matrices into past (first T_ini block rows) and future."""
    u, y = as_trajectory(u), as_trajectory(y)
    trajs = [u, y] + ([as_trajectory(w)] if w is not None else [])
    if any(t.T != u.T for t in trajs):
        raise ShapeError("u, y (and w) must have the same length")
    if T_ini < 1 or N < 1:
        raise ShapeError(f"T_ini={T_ini} and N={N} must be >= 1")
    L = T_ini + N
    if kind == HANKEL and u.T < L:
        raise ShapeError(f"Hankel partition needs T >= T_ini + N = {L}, got T={u.T}")
    mats = [_build(t, L, kind) for t in trajs]

    def split(M, c):
        return M[: c * T_ini], M[c * T_ini:]

    U_P, U_F = split(mats[0], u.channels)
    Y_P, Y_F = split(mats[1], y.channels)
    W_P = W_F = None
    if w is not None:
        W_P, W_F = split(mats[2], trajs[2].channels)
    return DataBlocks(U_P, U_F, Y_P, Y_F, T_ini, N, kind, W_P, W_F)


def svd_denoise_page(M: np.ndarray, sigma0: float) -> np.ndarray:
    """Zero every singular value strictly below ``sigma0`` and rebuild the matrix."""
    if sigma0 < 0:
        raise ValueError(f"sigma0 must be >= 0, got {sigma0}")
    M = np.asarray(M, dtype=float)
    if sigma0 == 0:
        return M.copy()
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    s = np.where(s < sigma0, 0.0, s)
    return (U * s) @ Vt


def stack_denoised_outputs(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Interleave per-channel depth-L matrices into one block matrix.

    Row ``i * p + r`` of the result is row ``i`` of channel ``r``'s matrix.
    """
    mats = [np.asarray(M, dtype=float) for M in mats]
    if not mats:
        raise ShapeError("need at least one channel matrix")
    shape = mats[0].shape
    if any(M.shape != shape for M in mats):
        raise ShapeError(f"channel matrices differ in shape: {[M.shape for M in mats]}")
    L, H_c = shape
    return np.stack(mats, axis=1).reshape(L * len(mats), H_c)


def denoise_outputs(blocks: DataBlocks, y, sigma0: float, allow_hankel: bool = False) -> DataBlocks:
    """Replace ``Y_P``/``Y_F`` by their channel-wise SVD-thresholded versions.

    Hankel-kind blocks lose their structure under thresholding; that route is
    only available with ``allow_hankel=True`` for comparison studies.
    """
    if blocks.kind == HANKEL and not allow_hankel:
        raise ValueError("SVD denoising destroys Hankel structure; pass allow_hankel=True to force it")
    y = as_trajectory(y)
    L = blocks.T_ini + blocks.N
    H_c = blocks.H_c
    used = y.data[: L * H_c] if blocks.kind == PAGE else y.data[: H_c + L - 1]
    per_channel = [svd_denoise_page(_build(used[:, [r]], L, blocks.kind), sigma0)
                   for r in range(y.channels)]
    stacked = stack_denoised_outputs(per_channel)
    p = y.channels
    return blocks.replace_outputs(stacked[: p * blocks.T_ini], stacked[p * blocks.T_ini:])
