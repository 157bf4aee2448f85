"""Scenario configuration, arrival schedules, and results serialization.

Scenario files are JSON; every absent field falls back to the default
lane-drop experiment: a 3000 m road whose last 2100 m (7 cells of 300 m) form
the coordination zone, free speed 33.33 m/s, jam density 0.12 veh/m, three
upstream lanes merging to two, inflow 2000 veh/h against a downstream supply
of (W-1)/W of capacity (2400 veh/h), 15% CAV penetration, controls in
[5, 33.33] m/s, horizon 7, contraction factor 0.6.  The default initial
condition is congested: a dense wedge at the zone entrance plus a backlog in
the virtual upstream queue, so the run covers throttled inflow, queue release
and recovery.

Flow values in config files are veh/h (converted to veh/s internally); field
names carry units.  All randomness flows from the single scenario seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FundamentalDiagram, Grid, check_cfl
from .coordinator import PlannerConfig, RunInputs, RunResult
from .mpc import Boundaries
from .plant import Arrival, average_travel_metrics

DEFAULT_INITIAL_DENSITY = [0.08, 0.06, 0.05, 0.04, 0.03, 0.02, 0.02]
DEFAULT_QUEUE_VEH = 60.0


class ScenarioError(ValueError):
    """Configuration problem; message carries the offending field path."""


@dataclass
class ScenarioConfig:
    num_cells: int = 7
    dx_m: float = 300.0
    dt_s: float = 1.0
    road_length_m: float = 3000.0
    free_speed_mps: float = 33.33
    jam_density_veh_m: float = 0.12
    lanes_upstream: int = 3
    inflow_veh_h: list = field(default_factory=lambda: [[0, 2000.0]])
    outflow_veh_h: list = field(default_factory=lambda: [[0, 2400.0]])
    initial_density_veh_m: list = field(
        default_factory=lambda: list(DEFAULT_INITIAL_DENSITY))
    initial_queue_veh: float = DEFAULT_QUEUE_VEH
    penetration: float = 0.15
    arrival_mode: str = "deterministic"      # or "bernoulli"
    seed: int = 0
    entry_position_m: float | None = None    # default: zone start
    explicit_schedule: list | None = None    # [[step, position, command], ...]
    total_steps: int = 300
    flux_mode: str = "consistent"            # or "paper-literal"
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    # -- assembly ------------------------------------------------------------

    def diagram(self) -> FundamentalDiagram:
        return FundamentalDiagram(free_speed=self.free_speed_mps,
                                  jam_density=self.jam_density_veh_m,
                                  lanes_upstream=self.lanes_upstream)

    def grid(self) -> Grid:
        return Grid.checked(self.diagram(), self.num_cells, self.dx_m,
                            self.dt_s, self.road_length_m)

    def boundaries(self) -> Boundaries:
        return Boundaries(
            f_in=_profile_array(self.inflow_veh_h, self.total_steps) / 3600.0,
            f_out=_profile_array(self.outflow_veh_h, self.total_steps) / 3600.0)

    def initial_density(self) -> np.ndarray:
        vals = self.initial_density_veh_m
        if np.isscalar(vals):
            return np.full(self.num_cells, float(vals))
        arr = np.asarray(vals, dtype=float)
        if arr.size == 1:
            return np.full(self.num_cells, float(arr[0]))
        if arr.size != self.num_cells:
            raise ScenarioError(
                f"initial.density_veh_m: expected {self.num_cells} values, "
                f"got {arr.size}")
        return arr

    def schedule(self) -> list[Arrival]:
        if self.explicit_schedule is not None:
            return [Arrival(step=int(s), position=float(p), command=float(c))
                    for s, p, c in self.explicit_schedule]
        entry = (self.grid().zone_start if self.entry_position_m is None
                 else self.entry_position_m)
        f_in = self.boundaries().f_in
        if self.arrival_mode == "deterministic":
            return thinned_schedule(f_in, self.dt_s, self.penetration,
                                    self.total_steps, entry)
        return bernoulli_schedule(f_in, self.dt_s, self.penetration,
                                  self.total_steps, entry, self.seed)

    def run_inputs(self) -> RunInputs:
        return RunInputs(fd=self.diagram(), grid=self.grid(),
                         boundaries=self.boundaries(),
                         schedule=self.schedule(),
                         rho0=self.initial_density(),
                         queue0=self.initial_queue_veh,
                         total_steps=self.total_steps,
                         consistent_flux=self.flux_mode == "consistent")

    def to_dict(self) -> dict:
        p = self.planner
        return {
            "grid": {"num_cells": self.num_cells, "dx_m": self.dx_m,
                     "dt_s": self.dt_s, "road_length_m": self.road_length_m},
            "diagram": {"free_speed_mps": self.free_speed_mps,
                        "jam_density_veh_m": self.jam_density_veh_m,
                        "lanes_upstream": self.lanes_upstream},
            "demand": {"inflow_veh_h": self.inflow_veh_h,
                       "outflow_veh_h": self.outflow_veh_h},
            "initial": {"density_veh_m": list(self.initial_density_veh_m)
                        if not np.isscalar(self.initial_density_veh_m)
                        else self.initial_density_veh_m,
                        "upstream_queue_veh": self.initial_queue_veh},
            "cavs": {"penetration": self.penetration,
                     "mode": self.arrival_mode, "seed": self.seed,
                     "entry_position_m": self.entry_position_m,
                     "schedule": self.explicit_schedule},
            "total_steps": self.total_steps,
            "flux_mode": self.flux_mode,
            "planner": {"N": p.N, "M_min": p.M_min, "S": p.S,
                        "lambda": p.lam, "epsilon": p.epsilon,
                        "P_max": p.P_max, "ordering": p.ordering,
                        "truncation": p.truncation,
                        "controller": p.controller_kind,
                        "u_min_mps": p.u_min, "u_max_mps": p.u_max,
                        "q": p.q, "r": p.r, "delta_q": p.delta_q,
                        "enum_budget": p.enum_budget,
                        "beam_width": p.beam_width,
                        "terminal_eps": (None if math.isinf(p.terminal_eps)
                                         else p.terminal_eps),
                        "centralized_budget": p.centralized_budget},
        }


def _profile_array(profile, total_steps: int) -> np.ndarray:
    """Piecewise-constant [[start_step, value], ...] (or scalar) to a (T,) array."""
    if np.isscalar(profile):
        return np.full(max(total_steps, 1), float(profile))
    pairs = sorted((int(s), float(v)) for s, v in profile)
    if not pairs or pairs[0][0] != 0:
        raise ScenarioError("profile must start at step 0")
    out = np.empty(max(total_steps, 1))
    for i, (start, value) in enumerate(pairs):
        end = pairs[i + 1][0] if i + 1 < len(pairs) else len(out)
        if start >= len(out):
            break
        out[start:end] = value
    return out


def thinned_schedule(f_in: np.ndarray, dt: float, penetration: float,
                     total_steps: int, entry: float) -> list[Arrival]:
    """Deterministic thinning: a CAV whenever the p-weighted vehicle count
    crosses an integer (exact rate p * inflow)."""
    schedule = []
    acc = 0.0
    for k in range(total_steps):
        acc += penetration * float(f_in[min(k, len(f_in) - 1)]) * dt
        while acc >= 1.0:
            acc -= 1.0
            schedule.append(Arrival(step=k, position=entry, command=0.0))
    return schedule


def bernoulli_schedule(f_in: np.ndarray, dt: float, penetration: float,
                       total_steps: int, entry: float, seed: int) -> list[Arrival]:
    """Each whole arriving vehicle is a CAV with probability p (seeded)."""
    rng = np.random.default_rng(seed)
    schedule = []
    acc = 0.0
    for k in range(total_steps):
        acc += float(f_in[min(k, len(f_in) - 1)]) * dt
        while acc >= 1.0:
            acc -= 1.0
            if rng.random() < penetration:
                schedule.append(Arrival(step=k, position=entry, command=0.0))
    return schedule


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _get(section: dict, key: str, default, path: str, kind=None):
    if key not in section:
        return default
    value = section[key]
    if kind is not None and not isinstance(value, kind):
        raise ScenarioError(f"{path}.{key}: expected {kind}, got {type(value)}")
    return value


def load_scenario_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ScenarioError("top level: expected a JSON object")
    known = {"grid", "diagram", "demand", "initial", "cavs", "total_steps",
             "flux_mode", "planner"}
    for key in doc:
        if key not in known:
            raise ScenarioError(f"{key}: unknown section")
    g = doc.get("grid", {})
    d = doc.get("diagram", {})
    dem = doc.get("demand", {})
    init = doc.get("initial", {})
    cavs = doc.get("cavs", {})
    pl = doc.get("planner", {})
    defaults = ScenarioConfig()

    total_steps = int(doc.get("total_steps", defaults.total_steps))
    if total_steps < 0:
        raise ScenarioError("total_steps: must be >= 0")
    flux_mode = doc.get("flux_mode", defaults.flux_mode)
    if flux_mode not in ("consistent", "paper-literal"):
        raise ScenarioError(f"flux_mode: unknown mode {flux_mode!r}")

    init_density = _get(init, "density_veh_m", None, "initial")
    if init_density is None:
        init_density = list(DEFAULT_INITIAL_DENSITY)
        if int(_get(g, "num_cells", defaults.num_cells, "grid")) != len(
                DEFAULT_INITIAL_DENSITY):
            init_density = 0.0

    penetration = float(_get(cavs, "penetration", defaults.penetration, "cavs"))
    if not (0.0 <= penetration <= 1.0):
        raise ScenarioError(f"cavs.penetration: {penetration} outside [0, 1]")
    mode = _get(cavs, "mode", defaults.arrival_mode, "cavs")
    if mode not in ("deterministic", "bernoulli"):
        raise ScenarioError(f"cavs.mode: unknown mode {mode!r}")

    planner_kwargs = {}
    mapping = {"N": "N", "M_min": "M_min", "S": "S", "lambda": "lam",
               "epsilon": "epsilon", "P_max": "P_max", "ordering": "ordering",
               "truncation": "truncation", "controller": "controller_kind",
               "u_min_mps": "u_min", "u_max_mps": "u_max", "q": "q", "r": "r",
               "delta_q": "delta_q", "enum_budget": "enum_budget",
               "beam_width": "beam_width",
               "centralized_budget": "centralized_budget"}
    for key, attr in mapping.items():
        if key in pl and pl[key] is not None:
            planner_kwargs[attr] = pl[key]
    if pl.get("terminal_eps") is not None:
        planner_kwargs["terminal_eps"] = float(pl["terminal_eps"])
    try:
        planner = PlannerConfig(**planner_kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"planner: {exc}") from exc

    cfg = ScenarioConfig(
        num_cells=int(_get(g, "num_cells", defaults.num_cells, "grid")),
        dx_m=float(_get(g, "dx_m", defaults.dx_m, "grid")),
        dt_s=float(_get(g, "dt_s", defaults.dt_s, "grid")),
        road_length_m=float(_get(g, "road_length_m", defaults.road_length_m,
                                 "grid")),
        free_speed_mps=float(_get(d, "free_speed_mps",
                                  defaults.free_speed_mps, "diagram")),
        jam_density_veh_m=float(_get(d, "jam_density_veh_m",
                                     defaults.jam_density_veh_m, "diagram")),
        lanes_upstream=int(_get(d, "lanes_upstream", defaults.lanes_upstream,
                                "diagram")),
        inflow_veh_h=_get(dem, "inflow_veh_h", defaults.inflow_veh_h, "demand"),
        outflow_veh_h=_get(dem, "outflow_veh_h", defaults.outflow_veh_h,
                           "demand"),
        initial_density_veh_m=init_density,
        initial_queue_veh=float(_get(init, "upstream_queue_veh",
                                     defaults.initial_queue_veh, "initial")),
        penetration=penetration,
        arrival_mode=mode,
        seed=int(_get(cavs, "seed", defaults.seed, "cavs")),
        entry_position_m=cavs.get("entry_position_m"),
        explicit_schedule=cavs.get("schedule"),
        total_steps=total_steps,
        flux_mode=flux_mode,
        planner=planner,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ScenarioConfig) -> None:
    try:
        fd = cfg.diagram()
    except ValueError as exc:
        raise ScenarioError(f"diagram: {exc}") from exc
    try:
        grid = cfg.grid()
    except ValueError as exc:
        raise ScenarioError(f"grid: {exc}") from exc
    check_cfl(fd, grid)
    try:
        cfg.boundaries()
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(f"demand: {exc}") from exc
    rho0 = cfg.initial_density()
    if rho0.min() < 0 or rho0.max() > fd.jam_density:
        raise ScenarioError("initial.density_veh_m: outside [0, jam density]")
    if cfg.initial_queue_veh < 0:
        raise ScenarioError("initial.upstream_queue_veh: must be >= 0")
    if cfg.explicit_schedule is not None:
        for i, row in enumerate(cfg.explicit_schedule):
            if len(row) != 3:
                raise ScenarioError(
                    f"cavs.schedule[{i}]: expected [step, position, command]")
            if not (0.0 <= float(row[1]) < grid.road_length):
                raise ScenarioError(
                    f"cavs.schedule[{i}]: position {row[1]} outside "
                    f"[0, {grid.road_length})")


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return load_scenario_dict(doc)


# ---------------------------------------------------------------------------
# Results serialization
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".12g")


def write_results(result: RunResult, controller: str, out_dir: str | Path,
                  scenario: ScenarioConfig, extra_rows=()) -> None:
    """Emit summary.csv, trace.csv, steps.csv and a scenario echo.

    extra_rows: additional (controller, RunResult) pairs appended to
    summary.csv (used by `compare`).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = [(controller, result)] + list(extra_rows)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "J_t_veh_s", "avg_travel_time_s",
                    "avg_speed_mps", "throughput_veh", "eval_count"])
        for name, res in rows:
            avg_tt, avg_speed = average_travel_metrics(res.metrics)
            w.writerow([name, _fmt(res.metrics.total_vehicle_time),
                        "" if avg_tt is None else _fmt(avg_tt),
                        "" if avg_speed is None else _fmt(avg_speed),
                        _fmt(res.metrics.throughput),
                        res.metrics.eval_count])

    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "record", "index", "density_veh_m", "position_m",
                    "command_mps"])
        cav_rows = {}
        for k, cav_id, y, cmd in result.cav_trace:
            cav_rows.setdefault(k, []).append((cav_id, y, cmd))
        for k in range(result.density_trace.shape[0]):
            for j in range(result.density_trace.shape[1]):
                w.writerow([k, "cell", j, _fmt(result.density_trace[k, j]),
                            "", ""])
            for cav_id, y, cmd in cav_rows.get(k, ()):
                w.writerow([k, "cav", cav_id, "", _fmt(y), _fmt(cmd)])

    with open(out / "steps.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "p", "cav", "M_V", "M_J", "J_veh_s", "V", "delta"])
        for report in result.reports:
            for rec in report.records:
                delta = (report.deltas[rec.p - 1]
                         if 1 <= rec.p <= len(report.deltas) else "")
                w.writerow([report.k, rec.p, rec.cav, rec.M_V, rec.M_J,
                            _fmt(rec.J), _fmt(rec.V),
                            "" if delta == "" else _fmt(delta)])

    (out / "scenario_echo.json").write_text(
        json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
