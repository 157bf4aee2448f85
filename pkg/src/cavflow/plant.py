"""Closed-loop ground-truth simulation state and stepping.

The plant advances the zone densities with the bottleneck-aware transition
step, moves CAVs along the road, manages entry/exit, and accumulates run
metrics.  Inflow demand beyond what the entry interface can absorb waits in a
virtual upstream point queue (not counted in zone travel time) and is
released when supply allows.

A CAV's effective speed is min(commanded, v(rho downstream of y)) for a
nonzero command, and v(rho downstream of y) otherwise (no control = follow
the traffic).  "Downstream of y" is the density of the cell containing y,
except in the last metre of a cell where the next cell's density applies;
upstream of the zone the road is free except in the last metre before the
zone entrance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import FundamentalDiagram, Grid, equilibrium_speed, ghost_density
from .bottleneck import SystemStep, density_step

#: Within this distance of a cell's downstream edge the next cell's density
#: governs the CAV's speed (avoids a CAV being blocked by its own queue).
CELL_EDGE_BAND = 1.0


@dataclass(frozen=True)
class CavState:
    """One CAV: identity, position (m), command (m/s), derived speed, activity."""

    id: int
    y: float
    commanded_u: float = 0.0
    effective_speed: float = 0.0
    active: bool = True


@dataclass
class Metrics:
    """Cumulative run metrics (all nonnegative and nondecreasing)."""

    total_vehicle_time: float = 0.0   # J_t, veh*s, over zone cells
    vehicle_distance: float = 0.0     # veh*m
    throughput: float = 0.0           # veh out of the downstream boundary
    inflow_served: float = 0.0        # veh through the upstream boundary
    eval_count: int = 0               # candidate control sequences evaluated
    per_step_M: list = field(default_factory=list)
    retired_cavs: int = 0
    spawned_cavs: int = 0


@dataclass
class SimulationState:
    """Plant state at step k: densities, CAV fleet, upstream queue, metrics."""

    k: int
    rho: np.ndarray
    cavs: list[CavState]
    upstream_queue: float = 0.0
    metrics: Metrics = field(default_factory=Metrics)

    def active_cavs(self) -> list[CavState]:
        return [c for c in self.cavs if c.active]


@dataclass(frozen=True)
class Arrival:
    step: int
    position: float
    command: float = 0.0


def downstream_density(rho: np.ndarray, y: float, f_out: float,
                       fd: FundamentalDiagram, grid: Grid) -> float:
    """Density governing a CAV's kinematic speed limit at position y."""
    if y >= grid.zone_end:
        return ghost_density(f_out, fd)
    if y < grid.zone_start:
        return float(rho[0]) if grid.zone_start - y <= CELL_EDGE_BAND else 0.0
    j = grid.cell_index(y)
    edge = grid.zone_start + (j + 1) * grid.dx
    if edge - y <= CELL_EDGE_BAND:
        if j == grid.num_cells - 1:
            return ghost_density(f_out, fd)
        return float(rho[j + 1])
    return float(rho[j])


def cav_speed(commanded: float, rho_down: float, fd: FundamentalDiagram) -> float:
    v = equilibrium_speed(rho_down, fd)
    return min(commanded, v) if commanded > 0.0 else v


def validate_control(u: float, u_min: float, u_max: float) -> None:
    if u == 0.0:
        return
    if not (u_min <= u <= u_max):
        raise ValueError(f"control {u} outside U=[{u_min}, {u_max}] and not 0")


def advance(state: SimulationState, joint_controls: dict[int, float],
            f_in: float, f_out: float, fd: FundamentalDiagram, grid: Grid,
            u_bounds: tuple[float, float], consistent_flux: bool = True,
            ) -> tuple[SimulationState, SystemStep]:
    """One plant step: metrics, densities, queue, CAV positions, deactivation."""
    u_min, u_max = u_bounds
    controls: dict[int, float] = {}
    for cav in state.cavs:
        u = joint_controls.get(cav.id, 0.0) if cav.active else 0.0
        validate_control(u, u_min, u_max)
        controls[cav.id] = u

    metrics = state.metrics
    metrics.total_vehicle_time += float(state.rho.sum()) * grid.dt * grid.dx

    demand_rate = f_in + state.upstream_queue / grid.dt
    positions = [(c.id, c.y) for c in state.cavs if c.active]
    rho_next, step = density_step(state.rho, positions, controls, demand_rate,
                                  f_out, fd, grid, consistent_flux)

    served = step.interface_flux[0]
    queue_next = max(state.upstream_queue + (f_in - served) * grid.dt, 0.0)
    metrics.inflow_served += served * grid.dt
    metrics.throughput += step.interface_flux[-1] * grid.dt
    metrics.vehicle_distance += float(step.interface_flux[1:].sum()) * grid.dt * grid.dx

    new_cavs = []
    for cav in state.cavs:
        if not cav.active:
            new_cavs.append(cav)
            continue
        rho_down = downstream_density(state.rho, cav.y, f_out, fd, grid)
        speed = cav_speed(controls[cav.id], rho_down, fd)
        y_new = cav.y + speed * grid.dt
        new_cavs.append(CavState(id=cav.id, y=y_new, commanded_u=controls[cav.id],
                                 effective_speed=speed,
                                 active=y_new <= grid.zone_end))

    return SimulationState(k=state.k + 1, rho=rho_next, cavs=new_cavs,
                           upstream_queue=queue_next, metrics=metrics), step


def spawn_and_retire(state: SimulationState, schedule: list[Arrival],
                     grid: Grid) -> SimulationState:
    """Append CAVs scheduled for step k; drop CAVs that left the zone."""
    kept = []
    for cav in state.cavs:
        if cav.active:
            kept.append(cav)
        else:
            state.metrics.retired_cavs += 1
    next_id = state.metrics.spawned_cavs
    for arr in schedule:
        if arr.step != state.k:
            continue
        if not (0.0 <= arr.position < grid.road_length):
            raise ValueError(
                f"arrival position {arr.position} outside [0, {grid.road_length})")
        kept.append(CavState(id=next_id, y=arr.position, commanded_u=arr.command))
        next_id += 1
        state.metrics.spawned_cavs += 1
    return replace(state, cavs=kept)


def average_travel_metrics(metrics: Metrics) -> tuple[float | None, float | None]:
    """(avg travel time s, avg speed m/s) over the zone; None when undefined."""
    avg_speed = (metrics.vehicle_distance / metrics.total_vehicle_time
                 if metrics.total_vehicle_time > 0 else None)
    avg_tt = (metrics.total_vehicle_time / metrics.throughput
              if metrics.throughput > 0 else None)
    return avg_tt, avg_speed
