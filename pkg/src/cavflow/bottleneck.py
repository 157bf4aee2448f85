"""Moving-bottleneck flux reconstruction and the full density transition step.

A CAV commanding speed u in a cell of density rho acts as a moving bottleneck
when the capacity-reduction inequality is violated, i.e. when

    f(rho) - u*rho > (alpha*R / 4V) * (V - u)^2                      (strict)

which is equivalent to gamma_1(rho) < u < gamma_2(rho) with

    gamma_1 = V - (2*V*rho/(alpha*R)) * (1 + sqrt(1-alpha))
    gamma_2 = V - (2*V*rho/(alpha*R)) * (1 - sqrt(1-alpha))

and equally to rho lying strictly between the two reconstructed densities

    rho_hat   = R*(V-u)*(1 + sqrt(1-alpha)) / (2V)   (upstream of the CAV)
    rho_check = R*(V-u)*(1 - sqrt(1-alpha)) / (2V)   (downstream of the CAV)

both roots of (alpha*R/4V)*(V-u)^2 = f(rho) - u*rho.  While the condition
holds, the host cell's interface flows are replaced by

    F_up      = min(demand(rho_prev), supply(rho_hat))
    dt*F_down = min(dt_i, dt)*f(rho_check) + max(dt - dt_i, 0)*f(rho_hat)

with dt_i = (1-d)*dx/u and d = (rho - rho_hat)/(rho_check - rho_hat), d
clamped to [0, 1].

The per-cell update is assembled as rho^{k+1} = rho^k + A*O + B + C_u where
B[j] is the plain supply-demand update f1, and for owned cells the
replacement f2 + f3 enters through A*O + C_u.

Two flux-consistency modes exist.  The default ("consistent") uses one flux
value per interface, taken as the minimum of every applicable proposal, so
discrete mass conservation holds exactly and boundary profiles remain hard
caps; "paper-literal" applies the reconstructed flows to the host cell only,
mirroring the transition equation verbatim at the cost of conservation at
shared interfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DomainError,
    FundamentalDiagram,
    Grid,
    clamp_density_field,
    demand,
    flux,
    inflow_demand,
    supply,
)

#: Sentinel passage time when a Gamma-true CAV has zero commanded speed.
INFINITE_PASSAGE = math.inf


@dataclass(frozen=True)
class BottleneckReconstruction:
    """Reconstructed Riemann state around one moving bottleneck."""

    rho_hat: float
    rho_check: float
    d_frac: float
    passage_time: float
    heaviside_a: int
    heaviside_b: int
    heaviside_c: int
    heaviside_d: int


@dataclass
class SystemStep:
    """Assembled transition ingredients for one step.

    A_diag, B, C_u and O follow the paper-literal decomposition regardless of
    the applied flux mode; interface_flux holds the J+2 fluxes that produced
    the returned field (index 0 = upstream boundary, J+1 = downstream).
    """

    A_diag: np.ndarray
    B: np.ndarray
    C_u: np.ndarray
    O: np.ndarray
    bottleneck_owner: dict[int, int] = field(default_factory=dict)
    interface_flux: np.ndarray | None = None


def _check_speed(u: float, fd: FundamentalDiagram) -> float:
    if u < 0.0 or u > fd.free_speed:
        raise DomainError(f"speed {u} outside [0, {fd.free_speed}]")
    return u


def reconstruct_densities(u: float, fd: FundamentalDiagram) -> tuple[float, float]:
    """Upstream/downstream densities (rho_hat, rho_check) around a bottleneck."""
    u = _check_speed(u, fd)
    root = math.sqrt(1.0 - fd.alpha)
    base = fd.jam_density * (fd.free_speed - u) / (2.0 * fd.free_speed)
    return base * (1.0 + root), base * (1.0 - root)


def gamma_bounds(rho: float, fd: FundamentalDiagram) -> tuple[float, float]:
    """Speed window (gamma_1, gamma_2) violating the capacity constraint."""
    if rho < 0.0 or rho > fd.jam_density:
        raise DomainError(f"density {rho} outside [0, {fd.jam_density}]")
    root = math.sqrt(1.0 - fd.alpha)
    scale = 2.0 * fd.free_speed * rho / (fd.alpha * fd.jam_density)
    return fd.free_speed - scale * (1.0 + root), fd.free_speed - scale * (1.0 - root)


def is_moving_bottleneck(u: float, rho: float, fd: FundamentalDiagram) -> bool:
    """Predicate Gamma: strict gamma_1(rho) < u < gamma_2(rho)."""
    u = _check_speed(u, fd)
    g1, g2 = gamma_bounds(rho, fd)
    return g1 < u < g2


def passage_fraction(rho_cell: float, u: float, rho_hat: float, rho_check: float,
                     grid: Grid) -> tuple[float, float]:
    """Inferred cell fraction d (clamped to [0,1]) and passage time dt_i.

    u == 0 yields an infinite passage time; the dt_i > dt branch then applies.
    """
    denom = rho_check - rho_hat
    if denom == 0.0:
        raise DomainError("degenerate reconstruction: rho_hat == rho_check")
    d = (rho_cell - rho_hat) / denom
    d = min(max(d, 0.0), 1.0)
    if u == 0.0:
        return d, INFINITE_PASSAGE
    return d, (1.0 - d) * grid.dx / u


def reconstruction_for(rho_prev: float, rho_cell: float, u: float,
                       fd: FundamentalDiagram, grid: Grid) -> BottleneckReconstruction:
    """Full reconstruction record (densities, d, dt_i, Heaviside switches)."""
    rho_hat, rho_check = reconstruct_densities(u, fd)
    d, dt_i = passage_fraction(rho_cell, u, rho_hat, rho_check, grid)
    return BottleneckReconstruction(
        rho_hat=rho_hat,
        rho_check=rho_check,
        d_frac=d,
        passage_time=dt_i,
        heaviside_a=int(flux(rho_prev, fd) <= flux(rho_hat, fd)),
        heaviside_b=int(rho_hat <= fd.rho_star),
        heaviside_c=int(rho_prev <= fd.rho_star),
        heaviside_d=int(dt_i <= grid.dt),
    )


def _fluxes_from_demand(demand_up: float, rho_cell: float, u: float,
                        fd: FundamentalDiagram, grid: Grid) -> tuple[float, float]:
    rho_hat, rho_check = reconstruct_densities(u, fd)
    f_up = min(demand_up, supply(rho_hat, fd))
    _, dt_i = passage_fraction(rho_cell, u, rho_hat, rho_check, grid)
    if dt_i <= grid.dt:
        f_down = (min(dt_i, grid.dt) * flux(rho_check, fd)
                  + max(grid.dt - dt_i, 0.0) * flux(rho_hat, fd)) / grid.dt
    else:
        f_down = flux(rho_check, fd)
    return f_up, f_down


def bottleneck_fluxes(rho_prev: float, rho_cell: float, u: float,
                      fd: FundamentalDiagram, grid: Grid) -> tuple[float, float]:
    """Reconstructed (F_up, F_down) for a cell hosting a Gamma-true CAV."""
    if not is_moving_bottleneck(u, rho_cell, fd):
        raise DomainError(
            f"bottleneck fluxes undefined: Gamma false for u={u}, rho={rho_cell}"
        )
    return _fluxes_from_demand(demand(rho_prev, fd), rho_cell, u, fd, grid)


def select_bottleneck_cav(cavs_in_cell, rho_cell: float,
                          fd: FundamentalDiagram) -> int | None:
    """Owner CAV id for a cell: downstream-most Gamma-true nonzero command.

    cavs_in_cell: iterable of (id, y, u).  Ties on identical position break
    toward the lower id.
    """
    best = None
    for cav_id, y, u in cavs_in_cell:
        if u == 0.0 or not is_moving_bottleneck(u, rho_cell, fd):
            continue
        if best is None or y > best[1] or (y == best[1] and cav_id < best[0]):
            best = (cav_id, y)
    return None if best is None else best[0]


def _standard_fluxes(rho: np.ndarray, f_in: float, f_out: float,
                     fd: FundamentalDiagram) -> np.ndarray:
    n = rho.shape[0]
    fl = np.empty(n + 1)
    fl[0] = min(inflow_demand(f_in, fd), supply(rho[0], fd))
    for j in range(1, n):
        fl[j] = min(demand(rho[j - 1], fd), supply(rho[j], fd))
    fl[n] = min(demand(rho[n - 1], fd), f_out)
    return fl


def density_step(rho: np.ndarray, cavs, controls, f_in: float, f_out: float,
                 fd: FundamentalDiagram, grid: Grid,
                 consistent_flux: bool = True) -> tuple[np.ndarray, SystemStep]:
    """One transition step rho^{k+1} = rho^k + A*O + B + C_u.

    cavs: iterable of (id, y) positions; controls: mapping id -> commanded
    speed (0 = no control action).  Returns the new field and the assembled
    SystemStep.
    """
    rho = np.asarray(rho, dtype=float)
    n = grid.num_cells
    if rho.shape != (n,):
        raise ValueError(f"density field must have shape ({n},), got {rho.shape}")

    std = _standard_fluxes(rho, f_in, f_out, fd)

    by_cell: dict[int, list] = {}
    for cav_id, y in cavs:
        j = grid.cell_index(y)
        if j is None:
            continue
        by_cell.setdefault(j, []).append((cav_id, y, controls.get(cav_id, 0.0)))

    owners: dict[int, int] = {}
    owner_flux: dict[int, tuple[float, float]] = {}
    owner_recon: dict[int, BottleneckReconstruction] = {}
    for j in sorted(by_cell):
        owner = select_bottleneck_cav(by_cell[j], rho[j], fd)
        if owner is None:
            continue
        u = next(u for cid, _, u in by_cell[j] if cid == owner)
        demand_up = demand(rho[j - 1], fd) if j > 0 else inflow_demand(f_in, fd)
        owners[j] = owner
        owner_flux[j] = _fluxes_from_demand(demand_up, rho[j], u, fd, grid)
        owner_recon[j] = reconstruction_for(
            rho[j - 1] if j > 0 else min(f_in / fd.free_speed, fd.jam_density),
            rho[j], u, fd, grid)

    dt_dx = grid.dt / grid.dx
    B = -dt_dx * (std[1:] - std[:-1])
    O = np.zeros(n)
    A_diag = np.zeros(n)
    C_u = np.zeros(n)
    # Paper-literal split of the replacement update into f2 + f3: f2 carries
    # the upstream flow and the d*rho_j term, f3 the reconstruction terms.
    for j, (f_up, f_down) in owner_flux.items():
        O[j] = 1.0
        d_h = owner_recon[j].heaviside_d
        f2 = d_h * rho[j] + dt_dx * f_up
        f3 = -dt_dx * f_down - d_h * rho[j]  # so that f2 + f3 == -dt_dx*(f_down - f_up)
        A_diag[j] = f2 - B[j]
        C_u[j] = f3

    if consistent_flux:
        fl = std.copy()
        for j, (f_up, f_down) in owner_flux.items():
            fl[j] = min(fl[j], f_up)
            fl[j + 1] = min(fl[j + 1], f_down)
        rho_next = rho - dt_dx * (fl[1:] - fl[:-1])
        applied = fl
    else:
        rho_next = rho + B
        applied = std
        for j, (f_up, f_down) in owner_flux.items():
            rho_next[j] = rho[j] - dt_dx * (f_down - f_up)

    if np.isnan(rho_next).any():
        j = int(np.argmax(np.isnan(rho_next)))
        raise DomainError(f"NaN density after update in cell {j}")
    rho_next = clamp_density_field(rho_next, fd)

    step = SystemStep(A_diag=A_diag, B=B, C_u=C_u, O=O,
                      bottleneck_owner=owners, interface_flux=applied)
    return rho_next, step
