"""Closed-loop experiment engine: excitation, receding-horizon loop, costs, batches.

All signals are deviations from the operating point. A run has four phases on
one sample clock::

    [0, excitation)          white-noise excitation on every input, data recorded
    [excitation, activation) idle, zero input; the off-equilibrium kick lands at ``event``
    [activation, total)      controller active, re-solved every k samples

Every random stream (excitation, measurement noise, load noise) is drawn up
front from its own counter-based generator keyed by ``(seed, stream)``, so two
scenarios that differ only in the controller see identical noise.
"""

from __future__ import annotations

import logging
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datamat import hankel, is_persistently_exciting, numerical_rank, write_csv
from .errors import PersistencyError, ScenarioError, SolverError
from .plant import StateSpaceModel, SwingNetworkSpec, build_swing_surrogate, default_four_machine_spec
from .predictive import DeePCConfig, DeePCController, IniBuffer, PemMpcController, block_weight, build_blocks
from .robust import DfMinMaxController, MinMaxConfig, MinMaxController

log = logging.getLogger(__name__)

CONTROLLER_KINDS = ("none", "deepc", "pem-mpc", "minmax", "df-minmax")
STREAMS = {"excitation": 0, "measurement": 1, "load": 2}
SIGNAL_PREFIXES = ("y", "u", "w")


@dataclass(frozen=True)
class Subsystem:
    """One local controller's view of the plant.

    ``inputs``/``outputs`` index the plant's u and y channels. ``disturbances``
    names the measured signals treated as w: ``"y2"`` is measured output 2,
    ``"u1"`` applied input 1, ``"w0"`` load channel 0.
    """

    inputs: Tuple[int, ...]
    outputs: Tuple[int, ...]
    disturbances: Tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        object.__setattr__(self, "outputs", tuple(int(i) for i in self.outputs))
        object.__setattr__(self, "disturbances", tuple(str(s) for s in self.disturbances))
        for s in self.disturbances:
            if len(s) < 2 or s[0] not in SIGNAL_PREFIXES or not s[1:].isdigit():
                raise ScenarioError(f"bad disturbance signal name {s!r}; use e.g. 'y2', 'u1' or 'w0'")


def default_partition() -> Tuple[Subsystem, Subsystem]:
    """Two areas of the four-machine surrogate, each seeing the tie flow and the other station."""
    return (Subsystem((0,), (0,), ("y2", "u1"), "area1"),
            Subsystem((1,), (1,), ("y2", "u0"), "area2"))


@dataclass
class Scenario:
    """Complete description of one closed-loop experiment.

    At sample ``event`` (default: end of excitation) the plant state is set to
    ``event_state`` or, for swing plants, to the state built from
    ``event_angles``/``event_speeds``. Whatever the excitation left behind is
    discarded, so runs that differ only in their data length start the event
    from the same point.
    ``activation`` and ``total`` default to 500 and 1500 samples after the
    excitation ends. Noise levels are powers; the per-sample variance is
    ``power / Ts``.
    """

    plant: Union[SwingNetworkSpec, StateSpaceModel] = field(default_factory=default_four_machine_spec)
    Ts: float = 0.02
    controller: str = "none"
    config: Optional[DeePCConfig] = None
    excitation_samples: int = 1500
    excitation_power: float = 1e-4
    seed: int = 0
    total: Optional[int] = None
    activation: Optional[int] = None
    event: Optional[int] = None
    event_angles: Optional[Sequence[float]] = None
    event_speeds: Optional[Sequence[float]] = None
    event_state: Optional[Sequence[float]] = None
    measurement_noise: float = 0.0
    load_noise: float = 0.0
    delay: int = 0
    partition: Optional[Tuple[Subsystem, ...]] = None
    n_assumed: int = 10
    cost_Q: object = 400.0
    cost_R: object = 1.0
    cost_window: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.total is None:
            self.total = self.excitation_samples + 1500
        if self.activation is None:
            self.activation = self.excitation_samples + 500
        if self.event is None:
            self.event = self.excitation_samples
        if self.partition is not None:
            self.partition = tuple(self.partition)
        self.validate()

    def validate(self) -> None:
        if self.controller not in CONTROLLER_KINDS:
            raise ScenarioError(f"unknown controller kind {self.controller!r}; expected one of {CONTROLLER_KINDS}")
        if self.controller != "none" and self.config is None:
            raise ScenarioError(f"controller {self.controller!r} needs a config")
        if self.controller in ("minmax", "df-minmax") and not isinstance(self.config, MinMaxConfig):
            raise ScenarioError("Min-Max controllers need a MinMaxConfig")
        if self.Ts <= 0:
            raise ScenarioError("Ts must be > 0")
        if self.excitation_samples < 0 or self.excitation_power < 0:
            raise ScenarioError("excitation duration and power must be >= 0")
        if min(self.measurement_noise, self.load_noise) < 0:
            raise ScenarioError("noise powers must be >= 0")
        if self.delay < 0:
            raise ScenarioError("delay must be >= 0 samples")
        if not self.excitation_samples <= self.activation <= self.total:
            raise ScenarioError(f"need excitation ({self.excitation_samples}) <= activation "
                                f"({self.activation}) <= total ({self.total})")
        if not 0 <= self.event < self.total:
            raise ScenarioError(f"event sample {self.event} outside [0, {self.total})")
        if self.config is not None and self.controller != "none":
            if self.activation < self.excitation_samples + self.config.T_ini:
                raise ScenarioError(f"activation {self.activation} must be >= excitation end + T_ini = "
                                    f"{self.excitation_samples + self.config.T_ini}")
        if self.event_state is not None and (self.event_angles is not None or self.event_speeds is not None):
            raise ScenarioError("give either event_state or event_angles/event_speeds, not both")
        if (self.event_angles is not None or self.event_speeds is not None) and not isinstance(
                self.plant, SwingNetworkSpec):
            raise ScenarioError("event_angles/event_speeds need a swing-network plant")
        model = self.model()
        if self.partition is not None:
            self._check_partition(model)
        if self.cost_window is not None:
            a, b = self.cost_window
            if not 0 <= a <= b <= self.total:
                raise ScenarioError(f"cost window {self.cost_window} outside [0, {self.total}]")

    def _check_partition(self, model: StateSpaceModel) -> None:
        if not self.partition:
            raise ScenarioError("partition must list at least one subsystem")
        used_u: List[int] = []
        for sub in self.partition:
            if not sub.inputs or not sub.outputs:
                raise ScenarioError(f"subsystem {sub.name or '?'} needs at least one input and output")
            if any(not 0 <= i < model.m for i in sub.inputs) or any(not 0 <= i < model.p for i in sub.outputs):
                raise ScenarioError(f"subsystem {sub.name or '?'} indexes a channel the plant lacks")
            limits = {"y": model.p, "u": model.m, "w": model.q}
            for s in sub.disturbances:
                if int(s[1:]) >= limits[s[0]]:
                    raise ScenarioError(f"signal {s!r} does not exist on this plant")
            used_u.extend(sub.inputs)
        if len(set(used_u)) != len(used_u):
            raise ScenarioError("an input channel is assigned to more than one subsystem")

    def model(self) -> StateSpaceModel:
        if isinstance(self.plant, SwingNetworkSpec):
            return build_swing_surrogate(self.plant, self.Ts)
        if not math.isclose(self.plant.Ts, self.Ts):
            raise ScenarioError(f"plant sampled at {self.plant.Ts}, scenario Ts is {self.Ts}")
        return self.plant

    def initial_state(self, n: int) -> Optional[np.ndarray]:
        """State the plant is put into at sample ``event``, or None for no event."""
        if self.event_state is not None:
            x = np.asarray(self.event_state, dtype=float).ravel()
            if x.size != n:
                raise ScenarioError(f"event_state has {x.size} entries, plant has n={n}")
            return x
        if self.event_angles is not None or self.event_speeds is not None:
            G = self.plant.G
            angles = np.zeros(G) if self.event_angles is None else self.event_angles
            return self.plant.grounded_state(angles, self.event_speeds)
        return None

    def window(self) -> Tuple[int, int]:
        return self.cost_window if self.cost_window is not None else (self.activation, self.total)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class Signals:
    """Pre-drawn random streams for one run."""

    excitation: np.ndarray  # (excitation_samples, m)
    measurement: np.ndarray  # (total, p)
    load: np.ndarray  # (total, q)


def stream_rng(seed: int, stream: str, phase: int = 0) -> np.random.Generator:
    """Independent Philox generator for ``(seed, stream, phase)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream], phase))
    return np.random.Generator(np.random.Philox(ss))


def _gauss(seed: int, stream: str, power: float, Ts: float, T_exc: int, total: int, c: int) -> np.ndarray:
    # the collection phase and the rest of the run come from separate streams, so runs with
    # different amounts of data still share the closed-loop noise sample for sample
    scale = math.sqrt(power / Ts)
    first = stream_rng(seed, stream, 0).standard_normal((min(T_exc, total), c))
    rest = stream_rng(seed, stream, 1).standard_normal((max(total - T_exc, 0), c))
    return scale * np.vstack([first, rest]) + 0.0  # no negative zeros at zero power


def draw_signals(scenario: Scenario, model: Optional[StateSpaceModel] = None) -> Signals:
    model = model or scenario.model()
    sc = scenario
    Te = sc.excitation_samples
    return Signals(
        excitation=_gauss(sc.seed, "excitation", sc.excitation_power, sc.Ts, Te, Te, model.m),
        measurement=_gauss(sc.seed, "measurement", sc.measurement_noise, sc.Ts, Te, sc.total, model.p),
        load=_gauss(sc.seed, "load", sc.load_noise, sc.Ts, Te, sc.total, model.q),
    )


@dataclass
class Dataset:
    """Offline data recorded during excitation, plus the persistency report."""

    u: np.ndarray
    y: np.ndarray
    w: Optional[np.ndarray]
    order: int
    persistently_exciting: bool
    joint_rank: Optional[int] = None
    joint_full: Optional[bool] = None

    def report(self) -> dict:
        out = {"samples": int(self.u.shape[0]), "order": self.order,
               "persistently_exciting": bool(self.persistently_exciting)}
        if self.joint_rank is not None:
            out["joint_uw_rank"] = int(self.joint_rank)
            out["joint_uw_full"] = bool(self.joint_full)
        return out


def _signal(name: str, u_t: np.ndarray, y_t: np.ndarray, w_t: np.ndarray) -> float:
    src = {"u": u_t, "y": y_t, "w": w_t}[name[0]]
    return float(src[int(name[1:])])


def _views(scenario: Scenario, model: StateSpaceModel) -> List[Subsystem]:
    if scenario.partition is not None:
        return list(scenario.partition)
    return [Subsystem(tuple(range(model.m)), tuple(range(model.p)), (), "plant")]


def _local_config(cfg: DeePCConfig, q: int) -> DeePCConfig:
    if isinstance(cfg, MinMaxConfig) and cfg.box.q != q:
        return replace(cfg, box=replace(cfg.box, q=q))
    return cfg


def _check_data(scenario: Scenario, u: np.ndarray, y: np.ndarray, w: Optional[np.ndarray]) -> Dataset:
    cfg = scenario.config
    order = cfg.L + scenario.n_assumed
    need = (u.shape[1] + 1) * order - 1
    if u.shape[0] < need:
        raise PersistencyError(f"excitation of {u.shape[0]} samples is too short for order {order}; "
                               f"use at least {need} samples")
    pe = is_persistently_exciting(u, order)
    if not pe:
        raise PersistencyError(f"excitation is not persistently exciting of order {order}; "
                               f"lengthen the excitation or raise its power")
    ds = Dataset(u, y, w, order, pe)
    if w is not None and w.shape[1]:
        uw = np.hstack([u, w])
        L = cfg.L
        ds.joint_rank = numerical_rank(hankel(uw, L))
        ds.joint_full = ds.joint_rank == uw.shape[1] * L
        if not ds.joint_full:
            log.info("joint (u, w) data has rank %d of %d", ds.joint_rank, uw.shape[1] * L)
    return ds


@dataclass
class _Log:
    u: np.ndarray
    y: np.ndarray
    y_meas: np.ndarray
    x: np.ndarray  # state at sample ``stop``
    stop: int


def _open_loop(scenario: Scenario, model: StateSpaceModel, sig: Signals, stop: int) -> _Log:
    """Zero-input response plus excitation over ``[0, stop)``; logs are sized for the full run."""
    sc = scenario
    T = sc.total
    u = np.zeros((T, model.m))
    Te = min(sc.excitation_samples, stop)
    u[:Te] = sig.excitation[:Te]
    # computed over the full length so the samples do not depend on ``stop``
    drive = u @ model.B.T + sig.load @ model.E.T
    feed = u @ model.D.T + sig.load @ model.F.T
    x_event = sc.initial_state(model.n)
    A, C = model.A, model.C
    y = np.zeros((T, model.p))
    x = np.zeros(model.n)
    for t in range(stop):
        if t == sc.event and x_event is not None:
            x = x_event.copy()
        y[t] = C @ x
        x = A @ x + drive[t]
    y[:stop] += feed[:stop]
    y_meas = np.zeros((T, model.p))
    d = sc.delay
    y_meas[d:stop] = y[: max(stop - d, 0)]
    y_meas[:stop] += sig.measurement[:stop]
    return _Log(u, y, y_meas, x, stop)


def _closed_loop(scenario: Scenario, model: StateSpaceModel, sig: Signals, log_: _Log, controllers):
    """Continue ``log_`` from activation to the end with ``controllers`` = [(view, controller), ...]."""
    sc = scenario
    cfg = sc.config
    k = cfg.k
    start, T, d = log_.stop, sc.total, sc.delay
    u, y, y_meas, x = log_.u, log_.y, log_.y_meas, log_.x.copy()
    A, B, C, D, E, F = model.A, model.B, model.C, model.D, model.E, model.F
    x_event = sc.initial_state(model.n)

    buffers = []
    for view, _ in controllers:
        buf = IniBuffer(cfg.T_ini, len(view.inputs), len(view.outputs), len(view.disturbances))
        for t in range(start - cfg.T_ini, start):
            buf.push(u[t, list(view.inputs)], y_meas[t, list(view.outputs)],
                     [_signal(s, u[t], y_meas[t], sig.load[t]) for s in view.disturbances] or None)
        buffers.append(buf)
    plans = [np.zeros((k, len(view.inputs))) for view, _ in controllers]
    solve_times: List[float] = []
    status: Counter = Counter()
    failed: List[int] = []

    for t in range(start, T):
        if t == sc.event and x_event is not None:
            x = x_event.copy()
        j = (t - start) % k
        if j == 0:
            for i, ((view, ctrl), buf) in enumerate(zip(controllers, buffers)):
                t0 = time.perf_counter()
                try:
                    plans[i] = np.asarray(ctrl.step(buf), dtype=float).reshape(k, len(view.inputs))
                    status["optimal"] += 1
                except (SolverError, np.linalg.LinAlgError) as exc:
                    plans[i] = np.zeros((k, len(view.inputs)))
                    status[type(exc).__name__] += 1
                    failed.append(t)
                    log.warning("solve at t=%d (%s) failed: %s", t, view.name, exc)
                solve_times.append(time.perf_counter() - t0)
        u_t = u[t]
        for (view, _), plan in zip(controllers, plans):
            u_t[list(view.inputs)] += plan[j]
        w_t = sig.load[t]
        y[t] = C @ x + D @ u_t + F @ w_t
        y_meas[t] = (y[t - d] if t >= d else 0.0) + sig.measurement[t]
        for (view, _), buf in zip(controllers, buffers):
            w_loc = [_signal(s, u_t, y_meas[t], w_t) for s in view.disturbances]
            buf.push(u_t[list(view.inputs)], y_meas[t, list(view.outputs)], w_loc or None)
        x = A @ x + B @ u_t + E @ w_t
    return solve_times, status, sorted(set(failed))


def local_signals(view: Subsystem, u: np.ndarray, y_meas: np.ndarray, w: np.ndarray) -> np.ndarray:
    """The ``(T, q_local)`` record of a subsystem's disturbance signals."""
    cols = []
    for s in view.disturbances:
        src = {"u": u, "y": y_meas, "w": w}[s[0]]
        cols.append(src[:, int(s[1:])])
    return np.column_stack(cols) if cols else np.zeros((u.shape[0], 0))


def collect_data(scenario: Scenario, signals: Optional[Signals] = None) -> List[Dataset]:
    """Run the excitation phase and return one dataset per subsystem (one if centralized).

    Raises :class:`PersistencyError` when the recorded input is not
    persistently exciting of order ``T_ini + N + n_assumed``.
    """
    if scenario.config is None:
        raise ScenarioError("collect_data needs a controller config for the persistency order")
    model = scenario.model()
    sig = signals or draw_signals(scenario, model)
    return _datasets(scenario, model, sig, _open_loop(scenario, model, sig, scenario.excitation_samples))


def _datasets(scenario: Scenario, model: StateSpaceModel, sig: Signals, log_: _Log) -> List[Dataset]:
    Te = scenario.excitation_samples
    u, y_meas, w = log_.u[:Te], log_.y_meas[:Te], sig.load[:Te]
    out = []
    for view in _views(scenario, model):
        w_loc = local_signals(view, u, y_meas, w) if view.disturbances else None
        out.append(_check_data(scenario, u[:, list(view.inputs)], y_meas[:, list(view.outputs)], w_loc))
    return out


def make_controller(kind: str, cfg: DeePCConfig, data: Dataset):
    if kind == "deepc":
        return DeePCController.from_data(data.u, data.y, cfg)
    if kind == "pem-mpc":
        return PemMpcController.from_data(data.u, data.y, cfg)
    if kind in ("minmax", "df-minmax"):
        q = 0 if data.w is None else data.w.shape[1]
        cfg = _local_config(cfg, q)
        blocks = build_blocks(data.u, data.y, cfg, data.w if q else None)
        cls = MinMaxController if kind == "minmax" else DfMinMaxController
        return cls(blocks, cfg)
    raise ScenarioError(f"no controller for kind {kind!r}")


@dataclass
class RunResult:
    """Logged trajectories and statistics of one run.

    ``y`` is the true plant output and drives the cost; ``y_meas`` is the
    delayed, noisy stream the controllers saw. ``w`` is the load disturbance.
    """

    u: np.ndarray
    y: np.ndarray
    y_meas: np.ndarray
    w: np.ndarray
    r: np.ndarray
    Ts: float
    controller: str
    seed: int
    window: Tuple[int, int]
    cost: float
    solve_times: List[float]
    status_counts: Dict[str, int]
    failed_steps: List[int]
    data: List[Dataset] = field(default_factory=list)
    Q: object = 400.0
    R: object = 1.0

    @property
    def flagged(self) -> bool:
        return bool(self.failed_steps)

    @property
    def T(self) -> int:
        return self.u.shape[0]

    def cost_over(self, a: int, b: int) -> float:
        return closed_loop_cost(self, (a, b))

    def to_csv(self, path) -> None:
        names = ([f"u{i}" for i in range(self.u.shape[1])] + [f"y{i}" for i in range(self.y.shape[1])]
                 + [f"w{i}" for i in range(self.w.shape[1])])
        write_csv(path, np.hstack([self.u, self.y, self.w]), self.Ts, names)

    def summary(self) -> dict:
        st = np.asarray(self.solve_times)
        return {
            "controller": self.controller,
            "seed": self.seed,
            "closed_loop_cost": float(self.cost),
            "cost_window": list(self.window),
            "samples": self.T,
            "flagged": self.flagged,
            "failed_steps": list(self.failed_steps),
            "solver": {
                "solves": int(st.size),
                "status_counts": dict(self.status_counts),
                "wall_time_mean_s": float(st.mean()) if st.size else 0.0,
                "wall_time_max_s": float(st.max()) if st.size else 0.0,
                "wall_time_total_s": float(st.sum()) if st.size else 0.0,
            },
            "data": [d.report() for d in self.data],
        }


def _weight(W, c: int) -> np.ndarray:
    return block_weight(W, c, 1)


def closed_loop_cost(result: RunResult, window: Optional[Tuple[int, int]] = None,
                     Q=None, R=None) -> float:
    """``sum_{t in [a, b)} |u_t|_R^2 + |y_t - r_t|_Q^2`` with per-sample weight blocks.

    The window is half-open, so adjacent windows add up exactly.
    """
    a, b = result.window if window is None else window
    T = result.T
    if not 0 <= a <= b <= T:
        raise ValueError(f"window [{a}, {b}) outside the log range [0, {T}]")
    Qb = _weight(result.Q if Q is None else Q, result.y.shape[1])
    Rb = _weight(result.R if R is None else R, result.u.shape[1])
    e = result.y[a:b] - result.r[a:b]
    u = result.u[a:b]
    return float(np.einsum("ti,ij,tj->", u, Rb, u) + np.einsum("ti,ij,tj->", e, Qb, e))


def _reference(scenario: Scenario, p: int, T: int) -> np.ndarray:
    cfg = scenario.config
    if cfg is None or cfg.r is None:
        return np.zeros((T, p))
    r = np.asarray(cfg.r, dtype=float).ravel()
    if r.size == p:
        return np.tile(r, (T, 1))
    if r.size == 1:
        return np.full((T, p), float(r[0]))
    # a full-horizon reference is treated as its first sample held constant
    return np.tile(r[:p], (T, 1))


def run_closed_loop(scenario: Scenario, signals: Optional[Signals] = None) -> RunResult:
    """Simulate the whole timeline, solving the controller(s) every k samples after activation."""
    model = scenario.model()
    sig = signals or draw_signals(scenario, model)
    kind = scenario.controller
    data: List[Dataset] = []
    times, status, failed = [], {}, []
    if kind == "none":
        ol = _open_loop(scenario, model, sig, scenario.total)
    else:
        if scenario.partition is None and kind in ("minmax", "df-minmax") and scenario.config.box.q:
            raise ScenarioError("centralized Min-Max needs a partition naming the disturbance signals")
        ol = _open_loop(scenario, model, sig, scenario.activation)
        data = _datasets(scenario, model, sig, ol)
        controllers = [(view, make_controller(kind, scenario.config, ds))
                       for view, ds in zip(_views(scenario, model), data)]
        times, status, failed = _closed_loop(scenario, model, sig, ol, controllers)
    u, y, y_meas = ol.u, ol.y, ol.y_meas
    res = RunResult(u=u, y=y, y_meas=y_meas, w=sig.load.copy(), r=_reference(scenario, model.p, scenario.total),
                    Ts=scenario.Ts, controller=kind, seed=scenario.seed, window=scenario.window(), cost=0.0,
                    solve_times=times, status_counts=dict(status), failed_steps=failed, data=data,
                    Q=scenario.cost_Q, R=scenario.cost_R)
    res.cost = closed_loop_cost(res)
    return res


def run_decentralized(scenario: Scenario, signals: Optional[Signals] = None) -> RunResult:
    """Closed loop with one controller per subsystem of ``scenario.partition``.

    Controllers share the plant and the solve instants; they are solved in
    partition order at each instant.
    """
    if scenario.partition is None:
        scenario = replace(scenario, partition=default_partition())
    return run_closed_loop(scenario, signals)


@dataclass
class BatchResult:
    seeds: np.ndarray
    costs: np.ndarray
    flagged: np.ndarray
    bins: int = 10

    @property
    def n_failed(self) -> int:
        return int(self.flagged.sum())

    @property
    def median(self) -> float:
        ok = self.costs[~self.flagged]
        return float(np.median(ok)) if ok.size else float("nan")

    @property
    def histogram(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.costs[~self.flagged], bins=self.bins)

    def summary(self) -> dict:
        counts, edges = self.histogram
        return {"trials": int(self.costs.size), "median_cost": self.median,
                "min_cost": float(self.costs.min()), "max_cost": float(self.costs.max()),
                "failed": self.n_failed, "seeds": self.seeds.tolist(), "costs": self.costs.tolist(),
                "histogram": {"counts": counts.tolist(), "edges": edges.tolist()}}


def worker_count(default: int = 1) -> int:
    env = os.environ.get("DEEPC_THREADS")
    if env is None:
        return default
    try:
        return max(1, int(env))
    except ValueError:
        raise ScenarioError(f"DEEPC_THREADS must be an integer, got {env!r}") from None


def _trial(scenario: Scenario) -> Tuple[float, bool]:
    res = run_closed_loop(scenario)
    return res.cost, res.flagged


def monte_carlo(template: Scenario, trials: int, seed_base: int = 0,
                workers: Optional[int] = None) -> BatchResult:
    """Repeat ``template`` with seeds ``seed_base + i``; flagged trials are left out of the median."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seeds = np.arange(seed_base, seed_base + trials)
    scens = [template.with_seed(int(s)) for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=min(workers, trials)) as pool:
            out = list(pool.map(_trial, scens))
    else:
        out = [_trial(s) for s in scens]
    costs = np.array([c for c, _ in out])
    flagged = np.array([f for _, f in out], dtype=bool)
    return BatchResult(seeds, costs, flagged)


@dataclass(frozen=True)
class DampingEstimate:
    frequency_hz: float
    decay_rate: float  # 1/s, negative when decaying
    damping_ratio: float
    peaks: int


def dominant_frequency(signal, Ts: float) -> float:
    x = np.asarray(signal, dtype=float).ravel()
    x = x - x.mean()
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    freqs = np.fft.rfftfreq(x.size, Ts)
    spec[0] = 0.0
    return float(freqs[int(np.argmax(spec))])


def estimate_damping(signal, Ts: float, frequency_hz: Optional[float] = None) -> DampingEstimate:
    """Damping of the dominant oscillation from a log-peak fit of the rectified signal.

    The signal is cut into half-period windows of the dominant frequency; the
    largest |x| in each window is one envelope sample and a straight line is
    fitted to the log of those peaks.
    """
    x = np.abs(np.asarray(signal, dtype=float).ravel())
    f = dominant_frequency(signal, Ts) if frequency_hz is None else frequency_hz
    if f <= 0:
        raise ValueError("no oscillation found in the signal")
    half = max(1, int(round(0.5 / (f * Ts))))
    n_win = x.size // half
    if n_win < 3:
        raise ValueError("signal shorter than three half periods")
    win = x[: n_win * half].reshape(n_win, half)
    idx = win.argmax(axis=1) + np.arange(n_win) * half
    peaks = x[idx]
    keep = peaks > 1e-12 * peaks.max()
    if keep.sum() < 3:
        raise ValueError("too few non-zero peaks for a fit")
    slope = float(np.polyfit(idx[keep] * Ts, np.log(peaks[keep]), 1)[0])
    w = 2 * math.pi * f
    zeta = -slope / math.hypot(slope, w)
    return DampingEstimate(f, slope, zeta, int(keep.sum()))
