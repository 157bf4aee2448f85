"""Test-only brute-force oracles.

Deliberately naive re-implementations used by the test suite and for frozen
expected values: scalar loop-per-case dynamics, exhaustive joint enumeration,
finite-difference Jacobians, and a mass-balance audit.  Nothing here imports
from the production modules; every function takes plain floats/arrays, so
equality checks against the production code are meaningful.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _f(rho, V, R):
    return V * rho * (1.0 - rho / R)


def _dem(rho, V, R):
    return _f(min(rho, R / 2.0), V, R)


def _sup(rho, V, R):
    return _f(max(rho, R / 2.0), V, R)


def _recon(u, V, R, alpha):
    s = math.sqrt(1.0 - alpha)
    hat = R * (V - u) * (1.0 + s) / (2.0 * V)
    chk = R * (V - u) * (1.0 - s) / (2.0 * V)
    return hat, chk


def _gamma_true(u, rho, V, R, alpha):
    if u == 0.0:
        return False
    g1 = V - (2.0 * V * rho / (alpha * R)) * (1.0 + math.sqrt(1.0 - alpha))
    g2 = V - (2.0 * V * rho / (alpha * R)) * (1.0 - math.sqrt(1.0 - alpha))
    return g1 < u < g2


def straightline_step(rho, cavs, controls, f_in, f_out, V, R, alpha, dx, dt,
                      zone_start, return_fluxes=False):
    """Naive consistent-flux transition step.

    rho: list/array of cell densities; cavs: list of (id, y); controls: dict
    id -> commanded speed.  Mirrors the production semantics: one flux per
    interface, minimum over standard supply-demand and any host-cell
    reconstruction proposals, boundary profiles as hard caps, inflow demand
    capped at V*R/4.
    """
    rho = [float(x) for x in rho]
    n = len(rho)

    # Standard interface fluxes, one per interface 0..n.
    fl = [0.0] * (n + 1)
    fl[0] = min(min(f_in, V * R / 4.0), _sup(rho[0], V, R))
    for j in range(1, n):
        fl[j] = min(_dem(rho[j - 1], V, R), _sup(rho[j], V, R))
    fl[n] = min(_dem(rho[n - 1], V, R), f_out)

    # Owner CAV per cell: downstream-most Gamma-true with nonzero command;
    # ties on equal position resolve toward the lower id.
    owner_id = {}
    owner_u = {}
    owner_y = {}
    for cav_id, y in cavs:
        if y < zone_start or y >= zone_start + n * dx:
            continue
        j = min(int((y - zone_start) // dx), n - 1)
        u = controls.get(cav_id, 0.0)
        if u == 0.0 or not _gamma_true(u, rho[j], V, R, alpha):
            continue
        take = (j not in owner_y or y > owner_y[j]
                or (y == owner_y[j] and cav_id < owner_id[j]))
        if take:
            owner_y[j] = y
            owner_u[j] = u
            owner_id[j] = cav_id

    for j, u in owner_u.items():
        hat, chk = _recon(u, V, R, alpha)
        if j == 0:
            dem_up = min(f_in, V * R / 4.0)
        else:
            dem_up = _dem(rho[j - 1], V, R)
        f_up = min(dem_up, _sup(hat, V, R))
        d = (rho[j] - hat) / (chk - hat)
        d = min(max(d, 0.0), 1.0)
        if u > 0.0:
            dt_i = (1.0 - d) * dx / u
        else:
            dt_i = math.inf
        if dt_i <= dt:
            f_down = (min(dt_i, dt) * _f(chk, V, R)
                      + max(dt - dt_i, 0.0) * _f(hat, V, R)) / dt
        else:
            f_down = _f(chk, V, R)
        fl[j] = min(fl[j], f_up)
        fl[j + 1] = min(fl[j + 1], f_down)

    out = []
    for j in range(n):
        out.append(rho[j] - (dt / dx) * (fl[j + 1] - fl[j]))
    if return_fluxes:
        return np.array(out), fl
    return np.array(out)


def heaviside_cell_update(rho_prev, rho_cell, u, V, R, alpha, dx, dt,
                          inflow_demand=None):
    """Bottleneck host-cell update f2 + f3 in corrected Heaviside form.

    The printed compact coefficient of f(rho_hat) is inconsistent with the
    underlying case table when dt_i > dt, rho_hat > rho_star and
    rho_prev <= rho_star; the faithful compaction used here is
    c(1-b)(1-a-d) - b*d + (1-b)(1-c)(1-d).  inflow_demand, when given,
    replaces the upstream demand f(min(rho_prev, rho_star)) (boundary cell).
    """
    hat, chk = _recon(u, V, R, alpha)
    rho_star = R / 2.0
    a = 1 if _f(rho_prev, V, R) <= _f(hat, V, R) else 0
    b = 1 if hat <= rho_star else 0
    c = 1 if rho_prev <= rho_star else 0
    d_frac = min(max((rho_cell - hat) / (chk - hat), 0.0), 1.0)
    dt_i = (1.0 - d_frac) * dx / u if u > 0 else math.inf
    d = 1 if dt_i <= dt else 0

    coef_prev = b * c + a * (1 - b) * c
    coef_star = b * (1 - c)
    coef_hat = c * (1 - b) * (1 - a - d) - b * d + (1 - b) * (1 - c) * (1 - d)

    up_prev = inflow_demand if inflow_demand is not None else _f(rho_prev, V, R)
    upd = (d * rho_cell
           + coef_prev * (dt / dx) * up_prev
           + coef_star * (dt / dx) * _f(rho_star, V, R)
           + coef_hat * (dt / dx) * _f(hat, V, R)
           - d * chk
           - (1 - d) * (dt / dx) * _f(chk, V, R))
    return upd


def exhaustive_joint(rho, cavs, N, actions, f_in, f_out, V, R, alpha, dx, dt,
                     zone_start, queue0=0.0, budget=10 ** 6):
    """Global optimum of the joint travel objective by full enumeration.

    cavs: list of (id, y); actions: the per-step action list (index 0 first in
    tie-breaks).  Enumerates len(actions)^(N*I) joint sequences in
    lexicographic order (CAV-major by ascending id, then step), evaluating
    J = sum_t sum_j rho_j^{k+t} * dt * dx for t = 0..N-1 with the
    straight-line dynamics; HDV-style position updates for commanded 0,
    virtual upstream queue carried along.  Returns (best joint plan as a dict
    id -> tuple, best value).
    """
    ids = [cav_id for cav_id, _ in cavs]
    n_seq = len(actions) ** N
    total = n_seq ** len(ids)
    if total > budget:
        raise ValueError(f"joint enumeration {total} exceeds budget {budget}")

    per_cav = list(itertools.product(actions, repeat=N))
    best_val = None
    best = None
    for combo in itertools.product(per_cav, repeat=len(ids)):
        plans = dict(zip(ids, combo))
        val = _rollforward_J(rho, cavs, plans, N, f_in, f_out, V, R, alpha,
                             dx, dt, zone_start, queue0)
        if best_val is None or val < best_val:
            best_val = val
            best = plans
    return best, best_val


def _rollforward_J(rho0, cavs, plans, N, f_in, f_out, V, R, alpha, dx, dt,
                   zone_start, queue0=0.0):
    rho = np.array(rho0, dtype=float)
    n = len(rho)
    ys = {cav_id: float(y) for cav_id, y in cavs}
    zone_end = zone_start + n * dx
    queue = queue0
    J = 0.0
    for t in range(N):
        J += float(np.sum(rho)) * dt * dx
        fin = f_in(t) if callable(f_in) else f_in
        fout = f_out(t) if callable(f_out) else f_out
        controls = {}
        for cav_id in ys:
            u = plans[cav_id][t]
            if ys[cav_id] > zone_end:
                u = 0.0
            controls[cav_id] = u
        positions = [(cav_id, ys[cav_id]) for cav_id in ys]
        new_rho, fl = straightline_step(rho, positions, controls,
                                        fin + queue / dt, fout, V, R,
                                        alpha, dx, dt, zone_start,
                                        return_fluxes=True)
        queue = max(queue + (fin - fl[0]) * dt, 0.0)
        for cav_id in ys:
            y = ys[cav_id]
            u = controls[cav_id]
            v_down = _downstream_speed(rho, y, fout, V, R, dx, zone_start, n)
            speed = min(u, v_down) if u > 0 else v_down
            ys[cav_id] = y + speed * dt
        rho = np.clip(new_rho, 0.0, R)
    return J


def _downstream_speed(rho, y, f_out, V, R, dx, zone_start, n):
    zone_end = zone_start + n * dx
    if y >= zone_end:
        return V * (1.0 - min(max(f_out / V, 0.0), R) / R)
    if y < zone_start:
        if zone_start - y <= 1.0:
            return V * (1.0 - rho[0] / R)
        return V
    j = min(int((y - zone_start) // dx), n - 1)
    if zone_start + (j + 1) * dx - y <= 1.0:
        if j == n - 1:
            ghost = min(max(f_out / V, 0.0), R)
            return V * (1.0 - ghost / R)
        return V * (1.0 - rho[j + 1] / R)
    return V * (1.0 - rho[j] / R)


def fd_jacobian(step_fn, point, h=1e-7):
    """Forward-difference Jacobian of step_fn at point (independent scheme)."""
    point = np.asarray(point, dtype=float)
    base = np.asarray(step_fn(point), dtype=float)
    jac = np.empty((base.size, point.size))
    for i in range(point.size):
        pert = point.copy()
        pert[i] += h
        jac[:, i] = (np.asarray(step_fn(pert)) - base) / h
    return jac


def conservation_audit(masses, inflows, outflows, dt):
    """Max relative mass-balance violation over a run.

    masses: zone vehicle counts per step (length T+1); inflows/outflows: the
    applied boundary fluxes per step (length T).
    """
    worst = 0.0
    for k in range(len(inflows)):
        expected = masses[k] + dt * (inflows[k] - outflows[k])
        err = abs(masses[k + 1] - expected) / max(abs(masses[k]), 1.0)
        worst = max(worst, err)
    return worst
