"""Greenshields fundamental diagram, grid bookkeeping and supply-demand fluxes.

Unit conventions (used consistently across the package):

  density rho     veh/m   (aggregate over all upstream lanes)
  speed           m/s
  flow            veh/s
  length          m
  time            s

The flow function is f(rho) = V * rho * (1 - rho/R), maximal at the critical
density rho_star = R/2 where it equals V*R/4.  Interface flow between two
cells is min(demand(upstream), supply(downstream)) with

  demand(rho) = f(min(rho, rho_star))
  supply(rho) = f(max(rho, rho_star))

Densities are carried unnormalised; with the default jam density R = 0.12
veh/m every admissible density is < 1, which downstream travel-time bounds
rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Absolute tolerance for floating-point drift outside [0, R] that is clamped
# rather than rejected.
DENSITY_DRIFT_TOL = 1e-12

# CFL safety factor: V * dt <= CFL_FACTOR * dx.
CFL_FACTOR = 0.9


class DomainError(ValueError):
    """Raised when a density or speed argument is outside its physical domain."""


class CflError(ValueError):
    """Raised when a grid/time-step pair violates the CFL condition."""


@dataclass(frozen=True)
class FundamentalDiagram:
    """Greenshields diagram for a W-lane road upstream of a lane drop.

    free_speed      V, m/s
    jam_density     R, veh/m
    lanes_upstream  W (> 1); the capacity-reduction factor is alpha = (W-1)/W
    """

    free_speed: float
    jam_density: float
    lanes_upstream: int

    def __post_init__(self):
        if self.free_speed <= 0:
            raise ValueError(f"free_speed must be > 0, got {self.free_speed}")
        if self.jam_density <= 0:
            raise ValueError(f"jam_density must be > 0, got {self.jam_density}")
        if int(self.lanes_upstream) != self.lanes_upstream or self.lanes_upstream <= 1:
            raise ValueError(
                f"lanes_upstream must be an integer > 1, got {self.lanes_upstream}"
            )

    @property
    def rho_star(self) -> float:
        """Critical density R/2 (argmax of the flow function)."""
        return self.jam_density / 2.0

    @property
    def alpha(self) -> float:
        """Capacity-reduction factor (W-1)/W, in (0, 1)."""
        return (self.lanes_upstream - 1) / self.lanes_upstream

    @property
    def capacity(self) -> float:
        """Maximum flow V*R/4 (veh/s)."""
        return self.free_speed * self.jam_density / 4.0


@dataclass(frozen=True)
class Grid:
    """Uniform cell grid over the coordination zone.

    The zone has num_cells cells of length dx and occupies the *last*
    num_cells*dx metres of the modelled road; positions upstream of
    zone_start are a free-drive approach with no density state.
    """

    num_cells: int
    dx: float
    dt: float
    road_length: float

    def __post_init__(self):
        if self.num_cells < 1:
            raise ValueError(f"num_cells must be >= 1, got {self.num_cells}")
        if self.dx <= 0 or self.dt <= 0:
            raise ValueError("dx and dt must be positive")
        if self.road_length < self.num_cells * self.dx:
            raise ValueError(
                "road_length must cover the coordination zone "
                f"({self.num_cells * self.dx} m), got {self.road_length}"
            )

    @property
    def zone_length(self) -> float:
        return self.num_cells * self.dx

    @property
    def zone_start(self) -> float:
        return self.road_length - self.zone_length

    @property
    def zone_end(self) -> float:
        return self.road_length

    @classmethod
    def checked(cls, fd: FundamentalDiagram, num_cells: int, dx: float, dt: float,
                road_length: float) -> "Grid":
        """Construct a grid, rejecting any (V, dt, dx) with V*dt > 0.9*dx."""
        grid = cls(num_cells=num_cells, dx=dx, dt=dt, road_length=road_length)
        check_cfl(fd, grid)
        return grid

    def cell_index(self, y: float) -> int | None:
        """Zone cell containing position y, or None if y is outside the zone."""
        if y < self.zone_start or y >= self.zone_end:
            return None
        return min(int((y - self.zone_start) // self.dx), self.num_cells - 1)


def check_cfl(fd: FundamentalDiagram, grid: Grid) -> None:
    if fd.free_speed * grid.dt > CFL_FACTOR * grid.dx:
        raise CflError(
            f"CFL violated: V*dt = {fd.free_speed * grid.dt:.6g} > "
            f"{CFL_FACTOR}*dx = {CFL_FACTOR * grid.dx:.6g}"
        )


def _check_density(rho: float, fd: FundamentalDiagram) -> float:
    """Clamp sub-tolerance drift outside [0, R]; reject anything larger."""
    if rho < 0.0:
        if rho >= -DENSITY_DRIFT_TOL:
            return 0.0
        raise DomainError(f"density {rho} < 0")
    if rho > fd.jam_density:
        if rho <= fd.jam_density + DENSITY_DRIFT_TOL:
            return fd.jam_density
        raise DomainError(f"density {rho} > jam density {fd.jam_density}")
    return rho


def clamp_density_field(rho: np.ndarray, fd: FundamentalDiagram) -> np.ndarray:
    """Absorb <=1e-12 drift after a transition step; raise on larger violations."""
    lo, hi = rho.min(), rho.max()
    if lo < -DENSITY_DRIFT_TOL:
        j = int(np.argmin(rho))
        raise DomainError(f"density {lo} < 0 in cell {j}")
    if hi > fd.jam_density + DENSITY_DRIFT_TOL:
        j = int(np.argmax(rho))
        raise DomainError(f"density {hi} > jam density in cell {j}")
    return np.clip(rho, 0.0, fd.jam_density)


def flux(rho: float, fd: FundamentalDiagram) -> float:
    """Flow f(rho) = V*rho*(1 - rho/R), veh/s."""
    rho = _check_density(rho, fd)
    return fd.free_speed * rho * (1.0 - rho / fd.jam_density)


def equilibrium_speed(rho: float, fd: FundamentalDiagram) -> float:
    """Speed v(rho) = V*(1 - rho/R), m/s; monotone decreasing in rho."""
    rho = _check_density(rho, fd)
    return fd.free_speed * (1.0 - rho / fd.jam_density)


def demand(rho: float, fd: FundamentalDiagram) -> float:
    """Sending flow f(min(rho, rho_star))."""
    rho = _check_density(rho, fd)
    return flux(min(rho, fd.rho_star), fd)


def supply(rho: float, fd: FundamentalDiagram) -> float:
    """Receiving flow f(max(rho, rho_star))."""
    rho = _check_density(rho, fd)
    return flux(max(rho, fd.rho_star), fd)


def standard_interface_flux(rho_up: float, rho_down: float,
                            fd: FundamentalDiagram) -> float:
    """min(demand(rho_up), supply(rho_down))."""
    return min(demand(rho_up, fd), supply(rho_down, fd))


# Vectorised forms used by the batched horizon solver.  They assume inputs
# already within [0, R] (the transition step maintains that invariant).

def flux_arr(rho: np.ndarray, fd: FundamentalDiagram) -> np.ndarray:
    return fd.free_speed * rho * (1.0 - rho / fd.jam_density)


def demand_arr(rho: np.ndarray, fd: FundamentalDiagram) -> np.ndarray:
    return flux_arr(np.minimum(rho, fd.rho_star), fd)


def supply_arr(rho: np.ndarray, fd: FundamentalDiagram) -> np.ndarray:
    return flux_arr(np.maximum(rho, fd.rho_star), fd)


def ghost_density(flow: float, fd: FundamentalDiagram) -> float:
    """Boundary ghost density flow/V, clamped into [0, R]."""
    return min(max(flow / fd.free_speed, 0.0), fd.jam_density)


def inflow_demand(f_in: float, fd: FundamentalDiagram) -> float:
    """Upstream boundary demand: the inflow, capped at capacity V*R/4."""
    if f_in < 0 or not math.isfinite(f_in):
        raise DomainError(f"inflow {f_in} must be finite and >= 0")
    return min(f_in, fd.capacity)
