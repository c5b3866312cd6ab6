"""Command-line front end.

Exit codes: 0 success, 2 invalid scenario file or arguments, 3 at least one
solver failure was flagged (the run still completes with zero input on the
failed steps).

Scenario files are JSON with the sections ``plant``, ``controller``,
``excitation``, ``timeline``, ``noise``, ``delay`` and ``partition``; unknown
keys are rejected. Powers are per-unit, times are samples unless a key says
otherwise. The summary printed to stdout contains a ``scenario`` entry that is
itself a valid scenario file reproducing the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import PersistencyError, ScenarioError, ShapeError
from .harness import (BatchResult, Scenario, Subsystem, monte_carlo, run_closed_loop, worker_count)
from .plant import StateSpaceModel, SwingNetworkSpec, default_four_machine_spec
from .predictive import DeePCConfig
from .robust import DisturbanceBox, MinMaxConfig

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3
SWEEP_PARAMS = ("N", "Tini", "T", "lambda_g")

log = logging.getLogger(__name__)

FloatOrList = Union[float, List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FourMachinePlant(_Strict):
    model: Literal["four-machine"] = "four-machine"
    b_tie: float = Field(1.0, ge=0, description="inter-area tie susceptance b_23 (p.u.)")
    omega_s: float = Field(100.0, gt=0, description="synchronous speed scaling of the angle equations")
    Ts: float = Field(0.02, gt=0, description="sampling period (s)")
    initial_angles: Optional[List[float]] = Field(None, description="rotor angles set at the event sample (rad)")
    initial_speeds: Optional[List[float]] = None


class SwingPlant(_Strict):
    model: Literal["swing"]
    inertia: List[float]
    damping: List[float]
    lines: List[Tuple[int, int, float]]
    inputs: List[int]
    outputs: List[Tuple[int, int]]
    disturbances: List[int] = []
    omega_s: float = Field(100.0, gt=0)
    allow_disconnected: bool = False
    Ts: float = Field(0.02, gt=0)
    initial_angles: Optional[List[float]] = None
    initial_speeds: Optional[List[float]] = None


class StateSpacePlant(_Strict):
    model: Literal["state-space"]
    A: List[List[float]]
    B: List[List[float]]
    C: List[List[float]]
    D: Optional[List[List[float]]] = None
    E: Optional[List[List[float]]] = None
    F: Optional[List[List[float]]] = None
    Ts: float = Field(0.02, gt=0)
    initial_state: Optional[List[float]] = None


class BoxSection(_Strict):
    w_min: float = Field(-0.3, description="lower disturbance bound")
    w_max: float = Field(0.3, description="upper disturbance bound")
    M: int = Field(40, ge=1, description="downsampling factor of the future disturbance")
    sigma_w_weight: Optional[float] = Field(None, gt=0, description="slack weight on w_ini; None pins it")
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(200, ge=1)


class ControllerSection(_Strict):
    kind: Literal["none", "deepc", "pem-mpc", "minmax", "df-minmax"] = "deepc"
    T_ini: int = Field(30, ge=1)
    N: int = Field(60, ge=1)
    k: Optional[int] = Field(None, ge=1, description="control horizon; defaults to N")
    lambda_g: float = Field(20.0, ge=0)
    lambda_y: float = Field(2000.0, gt=0)
    Q: FloatOrList = 400.0
    R: FloatOrList = 1.0
    r: Optional[List[float]] = Field(None, description="per-channel output reference; zeros if omitted")
    u_min: Optional[FloatOrList] = Field(None, description="input lower bound; None is unbounded")
    u_max: Optional[FloatOrList] = None
    y_min: Optional[FloatOrList] = None
    y_max: Optional[FloatOrList] = None
    matrix: Literal["hankel", "page"] = "hankel"
    sigma0: float = Field(0.0, ge=0, description="singular-value threshold for Page denoising; 0 disables")
    delta_u_weight: float = Field(0.0, ge=0)
    n_assumed: int = Field(10, ge=0, description="state dimension assumed for the persistency order")
    box: Optional[BoxSection] = None


class ExcitationSection(_Strict):
    samples: int = Field(1500, ge=0)
    power: float = Field(1e-4, ge=0)
    seed: int = Field(0, ge=0)


class TimelineSection(_Strict):
    total: Optional[int] = Field(None, ge=1, description="defaults to excitation + 1500")
    activation: Optional[int] = Field(None, ge=0, description="defaults to excitation + 500")
    event: Optional[int] = Field(None, ge=0, description="defaults to the end of excitation")
    cost_window: Optional[Tuple[int, int]] = Field(None, description="half-open [start, stop); defaults to activation..total")


class NoiseSection(_Strict):
    measurement: float = Field(0.0, ge=0)
    load: float = Field(0.0, ge=0)


class SubsystemSection(_Strict):
    name: str = ""
    inputs: List[int]
    outputs: List[int]
    disturbances: List[str] = []


class ScenarioFile(_Strict):
    plant: Union[FourMachinePlant, SwingPlant, StateSpacePlant] = Field(
        default_factory=FourMachinePlant, discriminator="model")
    controller: ControllerSection = Field(default_factory=ControllerSection)
    excitation: ExcitationSection = Field(default_factory=ExcitationSection)
    timeline: TimelineSection = Field(default_factory=TimelineSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    delay: int = Field(0, ge=0, description="constant measurement delay (samples)")
    partition: Optional[List[SubsystemSection]] = None
    cost_Q: FloatOrList = 400.0
    cost_R: FloatOrList = 1.0

    @model_validator(mode="after")
    def _timeline(self):
        Te = self.excitation.samples
        act = self.timeline.activation
        if act is not None and act < Te:
            raise ValueError(f"timeline.activation={act} lies inside the excitation (ends at {Te})")
        if self.controller.kind in ("minmax", "df-minmax") and self.controller.box is None:
            raise ValueError("Min-Max controllers need a controller.box section")
        return self


def _arr(v):
    return np.asarray(v, dtype=float)


def _plant(sec):
    if sec.model == "four-machine":
        return default_four_machine_spec(sec.b_tie, sec.omega_s)
    if sec.model == "swing":
        return SwingNetworkSpec(tuple(sec.inertia), tuple(sec.damping), tuple(sec.lines), tuple(sec.inputs),
                                tuple(sec.outputs), tuple(sec.disturbances), sec.omega_s, sec.allow_disconnected)
    return StateSpaceModel(_arr(sec.A), _arr(sec.B), _arr(sec.C),
                           None if sec.D is None else _arr(sec.D), None if sec.E is None else _arr(sec.E),
                           None if sec.F is None else _arr(sec.F), sec.Ts)


def _config(c: ControllerSection):
    inf = np.inf
    kw = dict(T_ini=c.T_ini, N=c.N, k=c.k, lambda_g=c.lambda_g, lambda_y=c.lambda_y, Q=_arr(c.Q), R=_arr(c.R),
              r=None if c.r is None else _arr(c.r), u_min=-inf if c.u_min is None else _arr(c.u_min), u_max=inf if c.u_max is None else _arr(c.u_max),
              y_min=-inf if c.y_min is None else _arr(c.y_min), y_max=inf if c.y_max is None else _arr(c.y_max),
              kind=c.matrix, sigma0=c.sigma0, delta_u_weight=c.delta_u_weight)
    if c.kind in ("minmax", "df-minmax"):
        b = c.box
        # q is fixed per subsystem once the partition is known
        box = DisturbanceBox(0, b.w_min, b.w_max, c.N, b.M)
        return MinMaxConfig(**kw, box=box, sigma_w_weight=b.sigma_w_weight, robust_tol=b.tol,
                            robust_max_iter=b.max_iter)
    return DeePCConfig(**kw)


def build_scenario(doc: ScenarioFile) -> Scenario:
    """Map a validated scenario file onto a :class:`Scenario`."""
    p = doc.plant
    ev = {}
    if p.model == "state-space":
        if p.initial_state is not None:
            ev["event_state"] = _arr(p.initial_state)
    else:
        ev["event_angles"] = None if p.initial_angles is None else tuple(p.initial_angles)
        ev["event_speeds"] = None if p.initial_speeds is None else tuple(p.initial_speeds)
    c = doc.controller
    part = None
    if doc.partition is not None:
        part = tuple(Subsystem(tuple(s.inputs), tuple(s.outputs), tuple(s.disturbances), s.name)
                     for s in doc.partition)
    t = doc.timeline
    return Scenario(plant=_plant(p), Ts=p.Ts, controller=c.kind, config=_config(c),
                    excitation_samples=doc.excitation.samples, excitation_power=doc.excitation.power,
                    seed=doc.excitation.seed, total=t.total, activation=t.activation, event=t.event,
                    measurement_noise=doc.noise.measurement, load_noise=doc.noise.load, delay=doc.delay,
                    partition=part, n_assumed=c.n_assumed, cost_Q=_arr(doc.cost_Q), cost_R=_arr(doc.cost_R),
                    cost_window=t.cost_window, **ev)


def load_scenario_file(path) -> ScenarioFile:
    """Parse and validate; raises ``ValueError`` with line or field diagnostics."""
    path = Path(path)
    text = path.read_text() if path.exists() else _bundled(path.name)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return ScenarioFile.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{path}: {exc.error_count()} validation error(s)"]
        for err in exc.errors():
            loc = ".".join(str(v) for v in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ValueError("\n".join(lines)) from None


def _bundled(name: str) -> str:
    res = resources.files("deepc_damping").joinpath("scenarios").joinpath(name)
    if not res.is_file():
        raise ValueError(f"no such scenario file: {name}")
    return res.read_text()


def bundled_scenarios() -> List[str]:
    return sorted(p.name for p in resources.files("deepc_damping").joinpath("scenarios").iterdir()
                  if p.name.endswith(".json"))


def _shift_timeline(doc: ScenarioFile, delta: int) -> ScenarioFile:
    t = doc.timeline
    moved = {k: (None if getattr(t, k) is None else getattr(t, k) + delta) for k in ("total", "activation", "event")}
    win = None if t.cost_window is None else (t.cost_window[0] + delta, t.cost_window[1] + delta)
    return doc.model_copy(update={"timeline": t.model_copy(update={**moved, "cost_window": win}),
                                  "excitation": doc.excitation.model_copy(
                                      update={"samples": doc.excitation.samples + delta})})


def _with_controller(doc: ScenarioFile, **update) -> ScenarioFile:
    return doc.model_copy(update={"controller": doc.controller.model_copy(update=update)})


def _revalidate(doc: ScenarioFile) -> ScenarioFile:
    return ScenarioFile.model_validate(doc.model_dump(mode="json"))


def sweep_variant(doc: ScenarioFile, param: str, value: float) -> ScenarioFile:
    """Scenario file with one hyperparameter replaced.

    Sweeping ``N`` also caps ``k`` at ``N // 2`` (at least 1); sweeping ``T``
    sets the excitation length and shifts the rest of the timeline with it.
    """
    c = doc.controller
    if param == "N":
        N = int(value)
        k = max(1, min(c.k if c.k is not None else N, N // 2))
        return _revalidate(_with_controller(doc, N=N, k=k))
    if param == "Tini":
        return _revalidate(_with_controller(doc, T_ini=int(value)))
    if param == "lambda_g":
        return _revalidate(_with_controller(doc, lambda_g=float(value)))
    if param == "T":
        return _revalidate(_shift_timeline(doc, int(value) - doc.excitation.samples))
    raise ValueError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")


def controller_variant(doc: ScenarioFile, name: str) -> ScenarioFile:
    """Scenario file for a ``kind[:matrix[+svd]]`` name such as ``deepc:page+svd``.

    A Page variant of a Hankel scenario gets ``L * H_c`` excitation samples so
    that both data matrices have the same number of columns. ``+svd`` uses
    the file's ``sigma0`` or 1.0 if that is zero.
    """
    kind, _, variant = name.partition(":")
    if kind not in ("none", "deepc", "pem-mpc", "minmax", "df-minmax"):
        raise ValueError(f"unknown controller {name!r}")
    out = _with_controller(doc, kind=kind)
    if variant:
        matrix, _, extra = variant.partition("+")
        if matrix not in ("hankel", "page") or extra not in ("", "svd"):
            raise ValueError(f"unknown controller variant {name!r}; use e.g. deepc:page+svd")
        c = doc.controller
        sigma0 = (c.sigma0 or 1.0) if extra == "svd" else 0.0
        out = _with_controller(out, matrix=matrix, sigma0=sigma0)
        if matrix == "page" and c.matrix == "hankel":
            L = c.T_ini + c.N
            H_c = doc.excitation.samples - L + 1
            out = _shift_timeline(out, L * H_c - doc.excitation.samples)
    return _revalidate(out)


def _summary_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=float)


def _write_table(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def cmd_simulate(args) -> int:
    doc = load_scenario_file(args.scenario)
    if args.seed is not None:
        doc = doc.model_copy(update={"excitation": doc.excitation.model_copy(update={"seed": args.seed})})
    res = run_closed_loop(build_scenario(doc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "run.csv")
    summary = {**res.summary(), "scenario": doc.model_dump(mode="json")}
    (out / "summary.json").write_text(_summary_json(summary) + "\n")
    print(_summary_json(summary))
    return EXIT_SOLVER if res.flagged else EXIT_OK


def _batch(doc: ScenarioFile, trials: int, seed_base: int) -> BatchResult:
    return monte_carlo(build_scenario(doc), trials, seed_base, workers=worker_count())


def _parse_values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--values must be a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {args.param!r}; expected one of {SWEEP_PARAMS}")
    doc = load_scenario_file(args.scenario)
    values = _parse_values(args.values)
    if not values:
        raise ValueError("--values is empty")
    seed_base = doc.excitation.seed if args.seed_base is None else args.seed_base
    rows, table, failed = [], [], 0
    for v in values:
        batch = _batch(sweep_variant(doc, args.param, v), args.trials, seed_base)
        failed += batch.n_failed
        rows.append({"value": v, **batch.summary()})
        table.append([v, batch.median, float(batch.costs.min()), float(batch.costs.max()), batch.n_failed])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "sweep.csv", ["value", "median_cost", "min_cost", "max_cost", "failed"], table)
    summary = {"param": args.param, "trials": args.trials, "seed_base": seed_base, "rows": rows,
               "scenario": doc.model_dump(mode="json")}
    (out / "summary.json").write_text(_summary_json(summary) + "\n")
    print(_summary_json(summary))
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_compare(args) -> int:
    doc = load_scenario_file(args.scenario)
    names = [n.strip() for n in args.controllers.split(",") if n.strip()]
    if not names:
        raise ValueError("--controllers is empty")
    variants = [(n, controller_variant(doc, n)) for n in names]
    seed_base = doc.excitation.seed if args.seed_base is None else args.seed_base
    table, medians, failed = [], {}, 0
    for name, variant in variants:
        batch = _batch(variant, args.trials, seed_base)
        failed += batch.n_failed
        medians[name] = batch.median
        for i, (s, c, f) in enumerate(zip(batch.seeds, batch.costs, batch.flagged)):
            table.append([name, i, int(s), float(c), bool(f)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "compare.csv", ["controller", "trial", "seed", "cost", "flagged"], table)
    summary = {"controllers": names, "trials": args.trials, "seed_base": seed_base, "median_cost": medians,
               "failed": failed, "scenario": doc.model_dump(mode="json")}
    (out / "summary.json").write_text(_summary_json(summary) + "\n")
    print(_summary_json(summary))
    return EXIT_SOLVER if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepc-damping", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver warnings to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one closed-loop experiment")
    s.add_argument("scenario", help="scenario JSON file (or the name of a bundled one)")
    s.add_argument("--out", default="out", help="output directory for run.csv and summary.json")
    s.add_argument("--seed", type=int, default=None, help="override excitation.seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="Monte-Carlo cost over a grid of one hyperparameter")
    s.add_argument("scenario")
    s.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    s.add_argument("--values", required=True, help="comma-separated grid")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed-base", type=int, default=None)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare", help="paired Monte-Carlo comparison of controllers")
    s.add_argument("scenario")
    s.add_argument("--controllers", required=True, help="e.g. deepc,pem-mpc or deepc:hankel,deepc:page+svd")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed-base", type=int, default=None)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_compare)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "trials", 1) < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ValueError, ScenarioError, PersistencyError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
