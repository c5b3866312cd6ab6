"""Discrete-time LTI plant engine and the reduced swing-equation grid surrogate."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .datamat import RANK_RTOL, Trajectory, as_trajectory, numerical_rank
from .errors import ObservabilityError, ShapeError


def _mat(a, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.zeros((rows, cols)) if a is None else np.array(a, dtype=float)
    if arr.ndim < 2:
        arr = arr.reshape(rows, cols) if arr.size == rows * cols else np.atleast_2d(arr)
    if arr.shape != (rows, cols):
        raise ShapeError(f"{name} must be {rows}x{cols}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _reshape(a, shape, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    try:
        return arr.reshape(shape)
    except ValueError:
        raise ShapeError(f"{name} of shape {arr.shape} does not fit {shape}") from None


@dataclass(frozen=True)
class ContinuousStateSpace:
    """``dx/dt = A x + B u + E w``, ``y = C x + D u + F w``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    F: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        n = A.shape[0]
        B = _reshape(self.B, (n, -1), "B")
        C = _reshape(self.C, (-1, n), "C")
        m, p = B.shape[1], C.shape[0]
        q = 0 if self.E is None else _reshape(self.E, (n, -1), "E").shape[1]
        for name, val in (("A", _mat(A, n, n, "A")), ("B", _mat(B, n, m, "B")),
                          ("C", _mat(C, p, n, "C")), ("D", _mat(self.D, p, m, "D")),
                          ("E", _mat(self.E, n, q, "E")), ("F", _mat(self.F, p, q, "F"))):
            object.__setattr__(self, name, val)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)


@dataclass(frozen=True)
class StateSpaceModel:
    """Discrete-time plant ``x+ = A x + B u + E w``, ``y = C x + D u + F w``.

    ``E``/``F`` may be omitted, giving ``q = 0`` disturbance channels. Arrays
    are frozen after construction so a model can be shared between runs.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    F: Optional[np.ndarray] = None
    Ts: float = 1.0

    def __post_init__(self):
        cont = ContinuousStateSpace(self.A, self.B, self.C, self.D, self.E, self.F)
        for name in "ABCDEF":
            object.__setattr__(self, name, getattr(cont, name))
        if not self.Ts > 0:
            raise ShapeError(f"sampling period must be positive, got {self.Ts}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def q(self) -> int:
        return self.E.shape[1]

    def markov_parameters(self, count: int) -> List[np.ndarray]:
        """``[D, CB, CAB, ..., CA^{count-2}B]``."""
        out = [self.D.copy()]
        Ak_B = self.B.copy()
        for _ in range(count - 1):
            out.append(self.C @ Ak_B)
            Ak_B = self.A @ Ak_B
        return out


@dataclass
class SimState:
    x: np.ndarray
    t: int = 0
    rngs: Dict[str, np.random.Generator] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).ravel()
        if self.t < 0:
            raise ShapeError("time index must be >= 0")


def _vec(v, size: int, name: str) -> np.ndarray:
    arr = np.zeros(size) if v is None else np.asarray(v, dtype=float).ravel()
    if arr.size != size:
        raise ShapeError(f"{name} must have length {size}, got {arr.size}")
    return arr


def step(model: StateSpaceModel, state: SimState, u, w=None) -> Tuple[np.ndarray, SimState]:
    """Advance one sample; returns the output at the current time and the next state."""
    if state.x.size != model.n:
        raise ShapeError(f"state has length {state.x.size}, model has n={model.n}")
    u = _vec(u, model.m, "u")
    w = _vec(w, model.q, "w")
    y = model.C @ state.x + model.D @ u + model.F @ w
    x_next = model.A @ state.x + model.B @ u + model.E @ w
    return y, SimState(x_next, state.t + 1, state.rngs)


def simulate(model: StateSpaceModel, x0, u_seq, w_seq=None, return_state: bool = False):
    """Run :func:`step` over a whole input record.

    With ``return_state=True`` the final :class:`SimState` is returned as well,
    so a long run can be split into pieces with the state carried across.
    """
    u = as_trajectory(u_seq)
    if u.channels != model.m:
        raise ShapeError(f"input has {u.channels} channels, model has m={model.m}")
    T = u.T
    if w_seq is None:
        w = np.zeros((T, model.q))
    else:
        w = np.asarray(as_trajectory(w_seq).data if model.q else np.zeros((T, 0)))
        if w.shape != (T, model.q):
            raise ShapeError(f"disturbance must be {T}x{model.q}, got {w.shape}")
    x = _vec(x0, model.n, "x0").copy()
    A, B, C, D, E, F = model.A, model.B, model.C, model.D, model.E, model.F
    ud = u.data
    Y = np.empty((T, model.p))
    for t in range(T):
        Y[t] = C @ x + D @ ud[t] + F @ w[t]
        x = A @ x + B @ ud[t] + E @ w[t]
    out = Trajectory(Y, model.Ts)
    if return_state:
        return out, SimState(x, T)
    return out


class DelayLine:
    """Constant ``d``-sample delay; output at step t is the input at t - d (zeros before)."""

    def __init__(self, d: int, channels: int):
        if d < 0:
            raise ValueError(f"delay must be >= 0 samples, got {d}")
        self.d = int(d)
        self.channels = channels
        self.buffer: deque = deque(np.zeros(channels) for _ in range(self.d))

    def push(self, sample) -> np.ndarray:
        sample = np.asarray(sample, dtype=float).ravel()
        if sample.size != self.channels:
            raise ShapeError(f"delay line carries {self.channels} channels, got {sample.size}")
        if self.d == 0:
            return sample.copy()
        self.buffer.append(sample.copy())
        return self.buffer.popleft()


def delay_sequence(data: np.ndarray, d: int) -> np.ndarray:
    """Apply a DelayLine to a whole ``(T, c)`` record at once."""
    data = np.asarray(data, dtype=float)
    if d == 0:
        return data.copy()
    out = np.zeros_like(data)
    out[d:] = data[:-d] if d < data.shape[0] else 0.0
    return out


def discretize(cont: ContinuousStateSpace, Ts: float) -> StateSpaceModel:
    """Exact zero-order-hold discretization of inputs and disturbances."""
    if not Ts > 0:
        raise ShapeError(f"sampling period must be positive, got {Ts}")
    n, m, q = cont.A.shape[0], cont.B.shape[1], cont.E.shape[1]
    aug = np.zeros((n + m + q, n + m + q))
    aug[:n, :n] = cont.A
    aug[:n, n:n + m] = cont.B
    aug[:n, n + m:] = cont.E
    Phi = scipy.linalg.expm(aug * Ts)
    return StateSpaceModel(Phi[:n, :n], Phi[:n, n:n + m], cont.C, cont.D,
                           Phi[:n, n + m:], cont.F, Ts)


def observability_matrix(A: np.ndarray, C: np.ndarray, ell: int) -> np.ndarray:
    blocks = [C]
    for _ in range(ell - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def compute_lag(model: StateSpaceModel) -> int:
    """Smallest ``l`` with ``rank col(C, CA, ..., CA^{l-1}) = n``."""
    n = model.n
    for ell in range(1, n + 1):
        if numerical_rank(observability_matrix(model.A, model.C, ell)) == n:
            return ell
    raise ObservabilityError(f"observability matrix has rank < n={n} at l=n; model unobservable")


def is_minimal(model: StateSpaceModel, rtol: float = RANK_RTOL) -> bool:
    n = model.n
    return (numerical_rank(controllability_matrix(model.A, model.B), rtol) == n
            and numerical_rank(observability_matrix(model.A, model.C, n), rtol) == n)


@dataclass(frozen=True)
class SwingNetworkSpec:
    """Linearized swing-equation network.

    Generator ``i``: ``d(delta_i)/dt = omega_s * omega_i`` and
    ``M_i d(omega_i)/dt = -D_i omega_i - sum_j b_ij (delta_i - delta_j) + injections``.
    Bus indices are 0-based. ``lines`` maps an undirected pair to its
    susceptance; ``outputs`` lists ordered pairs whose flow ``b_ij (delta_i - delta_j)``
    is measured. A zero-susceptance line (an open tie) is only accepted with
    ``allow_disconnected=True``; each island is then grounded at its first bus.
    """

    inertia: Tuple[float, ...]
    damping: Tuple[float, ...]
    lines: Tuple[Tuple[int, int, float], ...]
    inputs: Tuple[int, ...]
    outputs: Tuple[Tuple[int, int], ...]
    disturbances: Tuple[int, ...] = ()
    omega_s: float = 100.0
    allow_disconnected: bool = False

    def __post_init__(self):
        object.__setattr__(self, "inertia", tuple(float(v) for v in self.inertia))
        object.__setattr__(self, "damping", tuple(float(v) for v in self.damping))
        object.__setattr__(self, "lines", tuple((int(i), int(j), float(b)) for i, j, b in self.lines))
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        object.__setattr__(self, "outputs", tuple((int(i), int(j)) for i, j in self.outputs))
        object.__setattr__(self, "disturbances", tuple(int(i) for i in self.disturbances))

    @property
    def G(self) -> int:
        return len(self.inertia)

    def susceptance(self, i: int, j: int) -> float:
        for a, b, val in self.lines:
            if {a, b} == {i, j}:
                return val
        return 0.0

    def validate(self) -> None:
        G = self.G
        if G < 1 or len(self.damping) != G:
            raise ShapeError(f"need one damping per generator ({G}), got {len(self.damping)}")
        if any(M <= 0 for M in self.inertia):
            raise ValueError(f"inertias must be positive, got {self.inertia}")
        if any(D < 0 for D in self.damping):
            raise ValueError(f"dampings must be non-negative, got {self.damping}")
        buses = [i for i, j, _ in self.lines] + [j for i, j, _ in self.lines]
        buses += list(self.inputs) + list(self.disturbances) + [b for pair in self.outputs for b in pair]
        if any(not 0 <= b < G for b in buses):
            raise ShapeError(f"bus index out of range 0..{G - 1}")
        for i, j, b in self.lines:
            if i == j:
                raise ValueError(f"self-loop on bus {i}")
            if b < 0 or (b == 0 and not self.allow_disconnected):
                raise ValueError(f"line ({i}, {j}) susceptance must be positive, got {b}")
        if len(self.components()) > 1 and not self.allow_disconnected:
            raise ValueError("susceptance graph is disconnected")

    def components(self) -> List[List[int]]:
        parent = list(range(self.G))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j, b in self.lines:
            if b > 0:
                parent[find(i)] = find(j)
        groups: Dict[int, List[int]] = {}
        for g in range(self.G):
            groups.setdefault(find(g), []).append(g)
        return sorted(groups.values(), key=lambda c: c[0])

    def grounded_state(self, angles: Sequence[float], speeds: Optional[Sequence[float]] = None) -> np.ndarray:
        """Map per-generator angles and speeds to the grounded state vector."""
        angles = np.asarray(angles, dtype=float)
        speeds = np.zeros(self.G) if speeds is None else np.asarray(speeds, dtype=float)
        if angles.size != self.G or speeds.size != self.G:
            raise ShapeError(f"need {self.G} angles and speeds")
        diffs = [angles[g] - angles[comp[0]] for comp in self.components() for g in comp[1:]]
        return np.concatenate([diffs, speeds])


def default_four_machine_spec(b_tie: float = 1.0, omega_s: float = 100.0) -> SwingNetworkSpec:
    """Two weakly tied areas of two machines each; damping inputs at buses 1 and 2 (0-based)."""
    return SwingNetworkSpec(
        inertia=(10.0, 8.0, 10.0, 8.0),
        damping=(1.0, 1.0, 1.0, 1.0),
        lines=((0, 1, 10.0), (2, 3, 10.0), (1, 2, b_tie)),
        inputs=(1, 2),
        outputs=((0, 1), (2, 3), (1, 2)),
        disturbances=(0, 1, 2, 3),
        omega_s=omega_s,
        allow_disconnected=b_tie == 0,
    )


def swing_continuous(spec: SwingNetworkSpec) -> ContinuousStateSpace:
    """Continuous-time grounded swing model; state ``(angle differences, speeds)``."""
    spec.validate()
    G = spec.G
    comps = spec.components()
    free = [g for comp in comps for g in comp[1:]]
    ref_of = {g: comp[0] for comp in comps for g in comp}
    na = len(free)
    # delta = T_sel @ theta with every island's reference angle set to zero
    T_sel = np.zeros((G, na))
    S = np.zeros((na, G))
    for k, g in enumerate(free):
        T_sel[g, k] = 1.0
        S[k, g] = 1.0
        S[k, ref_of[g]] -= 1.0
    Lap = np.zeros((G, G))
    for i, j, b in spec.lines:
        Lap[i, i] += b
        Lap[j, j] += b
        Lap[i, j] -= b
        Lap[j, i] -= b
    Minv = np.diag(1.0 / np.asarray(spec.inertia))
    A = np.zeros((na + G, na + G))
    A[:na, na:] = spec.omega_s * S
    A[na:, :na] = -Minv @ Lap @ T_sel
    A[na:, na:] = -Minv @ np.diag(spec.damping)

    def incidence(buses):
        inc = np.zeros((G, len(buses)))
        for k, b in enumerate(buses):
            inc[b, k] = 1.0
        return np.vstack([np.zeros((na, len(buses))), Minv @ inc])

    C = np.zeros((len(spec.outputs), na + G))
    for r, (i, j) in enumerate(spec.outputs):
        C[r, :na] = spec.susceptance(i, j) * (T_sel[i] - T_sel[j])
    return ContinuousStateSpace(A, incidence(spec.inputs), C, None, incidence(spec.disturbances), None)


def build_swing_surrogate(spec: SwingNetworkSpec, Ts: float = 0.02) -> StateSpaceModel:
    return discretize(swing_continuous(spec), Ts)


def modal_summary(eigs: np.ndarray, Ts: Optional[float] = None) -> List[Tuple[float, float]]:
    """(frequency in Hz, damping ratio) for each oscillatory eigenpair.

    Discrete eigenvalues are mapped back through ``log(z) / Ts`` when ``Ts`` is given.
    """
    lam = np.log(eigs.astype(complex)) / Ts if Ts else eigs.astype(complex)
    out = [(float(abs(l.imag) / (2 * np.pi)), float(-l.real / abs(l))) for l in lam if l.imag > 1e-9]
    return sorted(out)
