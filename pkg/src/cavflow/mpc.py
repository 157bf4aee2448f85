"""Per-CAV finite-horizon optimization.

Each CAV solves two problems over an N-step horizon by enumerating a
discretized action set U_S = {0} u {u_min + s*(u_max-u_min)/(S-1)}:

  stability problem   minimize V = sum_t (q*||rho_t||^2 + r*u_t^2) + rho_N' H rho_N
  cost problem        minimize J = sum_t sum_j rho_t[j] * dt * dx
                      subject to V <= eta

with eta = V_v + lambda*(V_prev_star - V_v) coupling the two.  The terminal
weight H solves the discrete Lyapunov equation Z'HZ - H = -(Q* + dQ) for the
closed-loop linearization Z around the empty-road origin.

Truncation fixes the tail of the incumbent sequence and enumerates only the
first M steps; when the exhaustive candidate count (S+1)^M exceeds a budget,
a beam search (width >= S^2) explores the prefix space instead, with the
incumbent plan and the stability solution always evaluated so the
policy-improvement and upper-bound guarantees survive pruning.

Predictions roll the same transition step as the plant: committed CAVs
follow their announced sequences, uncommitted ones ride at equilibrium speed
with no bottleneck effect (indistinguishable from a zero command), the CAV
set is frozen over the horizon, and a CAV leaving the zone mid-horizon has
zero command thereafter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FundamentalDiagram, Grid, check_cfl
from .plant import CELL_EDGE_BAND, SimulationState

#: Convergence threshold for the Lyapunov series term norm.
LYAPUNOV_TERM_TOL = 1e-12
#: Acceptable residual of the solved Lyapunov equation (inf-norm).
LYAPUNOV_RESIDUAL_TOL = 1e-8
#: Finite-difference step for the origin linearization.
LINEARIZE_FD_STEP = 1e-6


@dataclass(frozen=True)
class Boundaries:
    """Inflow/outflow profiles by absolute step, clamped beyond the last entry."""

    f_in: np.ndarray
    f_out: np.ndarray

    def inflow(self, k: int) -> float:
        return float(self.f_in[min(k, len(self.f_in) - 1)])

    def outflow(self, k: int) -> float:
        return float(self.f_out[min(k, len(self.f_out) - 1)])


@dataclass(frozen=True)
class Weights:
    """Uniform-diagonal stage weights plus the Lyapunov terminal matrix."""

    q: float
    r: float
    delta_q: float
    H: np.ndarray
    h: float  # largest eigenvalue of H

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0 or self.delta_q <= 0:
            raise ValueError("q, r and delta_q must all be positive")


@dataclass(frozen=True)
class LinearizedSystem:
    psi: np.ndarray
    delta: np.ndarray
    K: np.ndarray
    Z: np.ndarray
    spectral_radius_Z: float


@dataclass
class PlanResult:
    """Outcome of one solve: the sequence, its trajectory and both objectives."""

    mu: np.ndarray          # (N,) scalar commands, post-exit steps forced to 0
    xi: np.ndarray          # (N+1, J+1) density trajectory incl. rho^k
    J_value: float
    V_value: float
    feasible: bool
    evals: int = 0
    beam_used: bool = False


def build_action_set(u_min: float, u_max: float, S: int) -> np.ndarray:
    """{0} plus S uniformly spaced speeds in [u_min, u_max], slowest first."""
    if S < 1:
        raise ValueError("S must be >= 1")
    if S == 1:
        speeds = np.array([u_min])
    else:
        speeds = u_min + np.arange(S) * (u_max - u_min) / (S - 1)
    return np.concatenate(([0.0], speeds))


def travel_cost(xi: np.ndarray, grid: Grid) -> float:
    """J = sum_{t=0}^{N-1} sum_j rho_j^{k+t} * dt * dx (terminal row excluded)."""
    return float(xi[:-1].sum()) * grid.dt * grid.dx


def stability_cost(xi: np.ndarray, mu: np.ndarray, weights: Weights) -> float:
    """V = sum_t (q*||rho_t||^2 + r*u_t^2) + terminal quadratic form."""
    stages = float((xi[:-1] ** 2).sum()) * weights.q + float((mu ** 2).sum()) * weights.r
    terminal = float(xi[-1] @ weights.H @ xi[-1])
    return stages + terminal


def contraction_eta(v_now_v: float, v_prev_star: float | None, lam: float) -> float:
    """eta = V_v + lambda*(V_prev* - V_v); inactive (inf) without a prior plan."""
    if not (0.0 <= lam < 1.0):
        raise ValueError(f"lambda must be in [0, 1), got {lam}")
    if v_prev_star is None:
        return math.inf
    return v_now_v + lam * (v_prev_star - v_now_v)


# ---------------------------------------------------------------------------
# Linearization and the Lyapunov terminal weight
# ---------------------------------------------------------------------------

def _raw_ctm_step(rho: np.ndarray, fd: FundamentalDiagram, grid: Grid) -> np.ndarray:
    """Closed-form CTM step without domain guards (smooth near the origin).

    Boundary conditions of the linearization point: zero inflow, free outflow.
    """
    V, R, rs = fd.free_speed, fd.jam_density, fd.rho_star
    f = lambda x: V * x * (1.0 - x / R)
    D = f(np.minimum(rho, rs))
    S = f(np.maximum(rho, rs))
    fl = np.empty(rho.size + 1)
    fl[0] = 0.0
    fl[1:-1] = np.minimum(D[:-1], S[1:])
    fl[-1] = min(D[-1], fd.capacity)
    return rho - (grid.dt / grid.dx) * (fl[1:] - fl[:-1])


def stabilizing_gain(psi: np.ndarray, delta: np.ndarray, q: float,
                     r: float) -> np.ndarray:
    """Discrete-time LQR gain for (psi, delta) with weights (qI, rI)."""
    from scipy.linalg import solve_discrete_are

    n = psi.shape[0]
    try:
        P = solve_discrete_are(psi, delta, q * np.eye(n), r * np.eye(n))
    except Exception as exc:
        raise ValueError(f"no stabilizing feedback gain found: {exc}") from exc
    K = -np.linalg.solve(delta.T @ P @ delta + r * np.eye(n), delta.T @ P @ psi)
    if np.max(np.abs(np.linalg.eigvals(psi + delta @ K))) >= 1.0:
        raise ValueError("LQR gain failed to stabilize the linearized system")
    return K


def linearize(fd: FundamentalDiagram, grid: Grid, q: float = 0.5,
              r: float = 1.0) -> LinearizedSystem:
    """Central finite-difference Jacobians at the empty-road origin."""
    check_cfl(fd, grid)
    n = grid.num_cells
    h = LINEARIZE_FD_STEP
    psi = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        psi[:, j] = (_raw_ctm_step(e, fd, grid) - _raw_ctm_step(-e, fd, grid)) / (2 * h)
    # The Gamma window is empty at rho = 0, so input perturbations leave the
    # transition untouched: the input Jacobian is exactly zero.
    delta = np.zeros((n, n))
    rad_psi = float(np.max(np.abs(np.linalg.eigvals(psi))))
    if rad_psi < 1.0:
        K = np.zeros((n, n))
    else:
        K = stabilizing_gain(psi, delta, q, r)
    Z = psi + delta @ K
    rad = float(np.max(np.abs(np.linalg.eigvals(Z))))
    if rad >= 1.0:
        raise ValueError(f"closed-loop matrix not Schur stable (radius {rad:.6f})")
    return LinearizedSystem(psi=psi, delta=delta, K=K, Z=Z, spectral_radius_Z=rad)


def lyapunov_terminal(Z: np.ndarray, q: float, r: float, K: np.ndarray,
                      delta_q: float, max_terms: int = 10 ** 6) -> np.ndarray:
    """H = sum_m (Z')^m (Q* + dQ) Z^m with Q* = qI + K'(rI)K, term-truncated."""
    n = Z.shape[0]
    M = q * np.eye(n) + K.T @ (r * np.eye(n)) @ K + delta_q * np.eye(n)
    H = np.zeros((n, n))
    term = M.copy()
    power = np.eye(n)
    for _ in range(max_terms):
        H += term
        power = power @ Z
        term = power.T @ M @ power
        if np.abs(term).max() < LYAPUNOV_TERM_TOL:
            H += term
            break
    else:
        raise ValueError("Lyapunov series did not converge")
    residual = np.abs(Z.T @ H @ Z - H + M).max()
    if residual > LYAPUNOV_RESIDUAL_TOL:
        raise ValueError(f"Lyapunov residual {residual:.3e} above tolerance")
    return H


def make_weights(fd: FundamentalDiagram, grid: Grid, q: float = 0.5,
                 r: float = 1.0, delta_q: float = 0.05) -> Weights:
    lin = linearize(fd, grid, q, r)
    H = lyapunov_terminal(lin.Z, q, r, lin.K, delta_q)
    h = float(np.linalg.eigvalsh(H)[-1])
    return Weights(q=q, r=r, delta_q=delta_q, H=H, h=h)


# ---------------------------------------------------------------------------
# Batched horizon simulation
# ---------------------------------------------------------------------------

class HorizonSim:
    """Vectorised N-step rollout of the prediction model for C candidates.

    All tracked CAVs (the solving agent plus every committed/uncommitted
    fleet member) carry per-candidate positions because the agent's actions
    perturb the densities every other position update depends on.
    """

    def __init__(self, snapshot: SimulationState, me: int,
                 committed: dict[int, np.ndarray], horizon: int,
                 fd: FundamentalDiagram, grid: Grid, boundaries: Boundaries,
                 weights: Weights, consistent_flux: bool = True):
        self.fd = fd
        self.grid = grid
        self.boundaries = boundaries
        self.weights = weights
        self.consistent = consistent_flux
        self.N = horizon
        self.k0 = snapshot.k
        self.rho0 = np.asarray(snapshot.rho, dtype=float)
        self.queue0 = float(snapshot.upstream_queue)
        # Hot-loop scalars.
        self._V = fd.free_speed
        self._R = fd.jam_density
        self._rs = fd.rho_star
        self._cap = fd.capacity
        self._alpha = fd.alpha
        self._root = math.sqrt(1.0 - fd.alpha)
        self._zs = grid.zone_start
        self._ze = grid.zone_end
        self._dx = grid.dx
        self._dt = grid.dt
        self._n = grid.num_cells

        fleet = sorted(snapshot.active_cavs(), key=lambda c: c.id)
        self.ids = [c.id for c in fleet]
        self.y0 = np.array([c.y for c in fleet])
        if me not in self.ids:
            raise ValueError(f"agent {me} not in the active fleet")
        self.me_col = self.ids.index(me)
        # (m, N) matrix of committed commands; the agent's own column is zero
        # here and overwritten by the candidate matrix each step.
        self.seq_mat = np.zeros((len(fleet), horizon))
        for i, c in enumerate(fleet):
            if c.id == me:
                continue
            if c.id in committed:
                seq = np.asarray(committed[c.id], dtype=float)
                if seq.shape != (horizon,):
                    raise ValueError(
                        f"committed sequence for CAV {c.id} must have length "
                        f"{horizon}, got {seq.shape}")
                self.seq_mat[i] = seq
            # Uncommitted CAVs keep the zero (car-following) sequence,
            # behaviourally identical to HDV traffic in this model.

    # -- vectorised pieces ---------------------------------------------------

    def _commands(self, t: int, actions_t: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """(C, m) command matrix at step t with post-exit forcing to zero."""
        u = np.empty((actions_t.shape[0], len(self.ids)))
        u[:] = self.seq_mat[:, t]
        u[:, self.me_col] = actions_t
        u[ys > self._ze] = 0.0
        return u

    def _step(self, rho, queue, ys, u, k_abs):
        n = self._n
        C = rho.shape[0]
        f_in = self.boundaries.inflow(k_abs)
        f_out = self.boundaries.outflow(k_abs)
        V, R, rs, root = self._V, self._R, self._rs, self._root

        d_arg = np.minimum(rho, rs)
        D = V * d_arg * (1.0 - d_arg / R)
        s_arg = np.maximum(rho, rs)
        S = V * s_arg * (1.0 - s_arg / R)
        demand_rate = np.minimum(f_in + queue / self._dt, self._cap)
        fl = np.empty((C, n + 1))
        fl[:, 0] = np.minimum(demand_rate, S[:, 0])
        fl[:, 1:n] = np.minimum(D[:, :-1], S[:, 1:])
        fl[:, n] = np.minimum(D[:, -1], f_out)

        # Per-(candidate, CAV) cell indices and Gamma activity in one pass.
        in_zone = (ys >= self._zs) & (ys < self._ze)
        cells = np.clip(((ys - self._zs) // self._dx).astype(int), 0, n - 1)
        flat = rho.ravel()
        row_off = (np.arange(C) * n)[:, None]
        rho_at = flat[cells + row_off]
        scale = (2.0 * V / (self._alpha * R)) * rho_at
        g_lo = V - scale * (1.0 + root)
        g_hi = V - scale * (1.0 - root)
        active = in_zone & (u > 0.0) & (g_lo < u) & (u < g_hi)

        host_extra = None
        if active.any():
            # Owner per cell: ascending id with strict position improvement,
            # so the downstream-most Gamma-true CAV wins, ties to lower id.
            owner_y = np.full((C, n), -np.inf)
            owner_u = np.zeros((C, n))
            for i in range(len(self.ids)):
                col = active[:, i]
                if not col.any():
                    continue
                rr = col.nonzero()[0]
                cc = cells[rr, i]
                yy = ys[rr, i]
                better = yy > owner_y[rr, cc]
                rr, cc = rr[better], cc[better]
                owner_y[rr, cc] = yy[better]
                owner_u[rr, cc] = u[rr, i]
            host_extra = (np.zeros((C, n)) if not self.consistent else None)
            for j in range(n):
                mask = owner_y[:, j] > -np.inf
                if not mask.any():
                    continue
                uo = owner_u[mask, j]
                base = R * (V - uo) / (2.0 * V)
                hat = base * (1.0 + root)
                chk = base * (1.0 - root)
                if j == 0:
                    dem_up = demand_rate[mask]
                else:
                    up = np.minimum(rho[mask, j - 1], rs)
                    dem_up = V * up * (1.0 - up / R)
                s_arg = np.maximum(hat, rs)
                f_up = np.minimum(dem_up, V * s_arg * (1.0 - s_arg / R))
                d = np.clip((rho[mask, j] - hat) / (chk - hat), 0.0, 1.0)
                dt_i = (1.0 - d) * self._dx / uo
                f_chk = V * chk * (1.0 - chk / R)
                f_hat = V * hat * (1.0 - hat / R)
                f_down = np.where(
                    dt_i <= self._dt,
                    (np.minimum(dt_i, self._dt) * f_chk
                     + np.maximum(self._dt - dt_i, 0.0) * f_hat) / self._dt,
                    f_chk)
                if self.consistent:
                    fl[mask, j] = np.minimum(fl[mask, j], f_up)
                    fl[mask, j + 1] = np.minimum(fl[mask, j + 1], f_down)
                else:
                    host_extra[mask, j] = -(self._dt / self._dx) * (f_down - f_up)

        dt_dx = self._dt / self._dx
        rho_next = rho - dt_dx * (fl[:, 1:] - fl[:, :-1])
        if host_extra is not None:
            rho_next = np.where(owner_y > -np.inf, rho + host_extra, rho_next)
        np.clip(rho_next, 0.0, R, out=rho_next)
        queue_next = np.maximum(queue + (f_in - fl[:, 0]) * self._dt, 0.0)

        # Kinematics from the pre-step densities, all CAVs at once.
        ghost = min(max(f_out / V, 0.0), R)
        edge_near = (self._zs + (cells + 1) * self._dx - ys) <= CELL_EDGE_BAND
        nxt = flat[np.minimum(cells + 1, n - 1) + row_off]
        rho_down = np.where(edge_near & (cells < n - 1), nxt, rho_at)
        rho_down = np.where(edge_near & (cells == n - 1), ghost, rho_down)
        before = ys < self._zs
        rho_down = np.where(before, np.where(self._zs - ys <= CELL_EDGE_BAND,
                                             rho[:, :1], 0.0), rho_down)
        rho_down = np.where(ys >= self._ze, ghost, rho_down)
        v = V * (1.0 - rho_down / R)
        speed = np.where(u > 0.0, np.minimum(u, v), v)
        ys_next = ys + speed * self._dt
        return rho_next, queue_next, ys_next

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, action_matrix: np.ndarray, keep_traj: bool = False):
        """(J, V, E) for every row of a (C, N) matrix; optionally trajectories.

        With keep_traj the return gains (xi (C, N+1, n), eff (C, N)) where eff
        holds the agent's effective (post-exit-forced) commands.
        """
        C = action_matrix.shape[0]
        state = (np.broadcast_to(self.rho0, (C, self.rho0.size)).copy(),
                 np.full(C, self.queue0),
                 np.broadcast_to(self.y0, (C, self.y0.size)).copy())
        J = np.zeros(C)
        V = np.zeros(C)
        xi = np.empty((C, self.N + 1, self.rho0.size)) if keep_traj else None
        eff = np.empty((C, self.N)) if keep_traj else None
        J, V, state = _finish_tail(self, action_matrix, 0, state, J, V, xi, eff)
        rho = state[0]
        E = np.einsum("cj,jk,ck->c", rho, self.weights.H, rho)
        if keep_traj:
            xi[:, self.N] = rho
            return J, V + E, E, xi, eff
        return J, V + E, E

    def evaluate_joint(self, matrices: dict[int, np.ndarray]) -> np.ndarray:
        """Shared travel objective for per-CAV (C, N) candidate matrices.

        CAVs absent from `matrices` ride as uncommitted (zero commands).
        """
        C = next(iter(matrices.values())).shape[0]
        grid = self.grid
        rho = np.broadcast_to(self.rho0, (C, self.rho0.size)).copy()
        queue = np.full(C, self.queue0)
        ys = np.broadcast_to(self.y0, (C, self.y0.size)).copy()
        J = np.zeros(C)
        for t in range(self.N):
            u = np.zeros((C, len(self.ids)))
            for i, cav_id in enumerate(self.ids):
                if cav_id in matrices:
                    u[:, i] = matrices[cav_id][:, t]
            u[ys > grid.zone_end] = 0.0
            J += rho.sum(axis=1) * grid.dt * grid.dx
            rho, queue, ys = self._step(rho, queue, ys, u, self.k0 + t)
        return J

    def trajectory(self, actions: np.ndarray):
        """(xi, effective mu, position traces) for one candidate sequence."""
        actions = np.asarray(actions, dtype=float).reshape(1, -1)
        rho = self.rho0.reshape(1, -1).copy()
        queue = np.full(1, self.queue0)
        ys = self.y0.reshape(1, -1).copy()
        xi = np.empty((self.N + 1, self.rho0.size))
        traj_y = np.empty((self.N + 1, self.y0.size))
        eff = np.empty(self.N)
        for t in range(self.N):
            xi[t] = rho[0]
            traj_y[t] = ys[0]
            u = self._commands(t, actions[:, t], ys)
            eff[t] = u[0, self.me_col]
            rho, queue, ys = self._step(rho, queue, ys, u, self.k0 + t)
        xi[self.N] = rho[0]
        traj_y[self.N] = ys[0]
        return xi, eff, traj_y


def predict_horizon(snapshot: SimulationState, me: int, my_mu: np.ndarray,
                    committed: dict[int, np.ndarray], horizon: int,
                    fd: FundamentalDiagram, grid: Grid, boundaries: Boundaries,
                    weights: Weights, consistent_flux: bool = True):
    """Density trajectory (N+1, J+1) and per-CAV position traces for one plan."""
    my_mu = np.asarray(my_mu, dtype=float)
    if my_mu.shape != (horizon,):
        raise ValueError(f"sequence length {my_mu.shape} != horizon {horizon}")
    for cav_id, seq in committed.items():
        if np.asarray(seq).shape != (horizon,):
            raise ValueError(f"committed sequence for CAV {cav_id} has wrong length")
    sim = HorizonSim(snapshot, me, committed, horizon, fd, grid, boundaries,
                     weights, consistent_flux)
    xi, eff, traj_y = sim.trajectory(my_mu)
    return xi, eff, {cav_id: traj_y[:, i] for i, cav_id in enumerate(sim.ids)}


def command_vectors(mu: np.ndarray, positions: np.ndarray, grid: Grid) -> np.ndarray:
    """Expand scalar commands to the cell-indexed (N, J+1) input vectors."""
    N = len(mu)
    out = np.zeros((N, grid.num_cells))
    for t in range(N):
        j = grid.cell_index(float(positions[t]))
        if j is not None and mu[t] != 0.0:
            out[t, j] = mu[t]
    return out


# ---------------------------------------------------------------------------
# Enumerative solvers
# ---------------------------------------------------------------------------

def _exhaustive_matrix(actions: np.ndarray, m_free: int,
                       tail: np.ndarray) -> np.ndarray:
    """All (S+1)^M prefixes (step 0 most significant) joined with the tail."""
    n_act = len(actions)
    idx = np.arange(n_act ** m_free)
    cols = [actions[(idx // (n_act ** (m_free - 1 - t))) % n_act]
            for t in range(m_free)]
    prefix = np.stack(cols, axis=1)
    tail_mat = np.broadcast_to(tail, (prefix.shape[0], tail.size))
    return np.hstack([prefix, tail_mat])


def _beam_candidates(sim: HorizonSim, actions: np.ndarray, m_free: int,
                     tail: np.ndarray, width: int, rank_by: str):
    """Beam search over prefixes, completed through the fixed tail.

    Returns (matrix, J, V, E, xi, eff, evals) for the surviving candidates.
    """
    w = sim.weights
    area = sim._dt * sim._dx
    rho = sim.rho0.reshape(1, -1).copy()
    queue = np.full(1, sim.queue0)
    ys = sim.y0.reshape(1, -1).copy()
    prefix = np.empty((1, 0))
    traj = [np.broadcast_to(sim.rho0, (1, sim.rho0.size))]
    effs = []
    J = np.zeros(1)
    V = np.zeros(1)
    evals = 0
    n_act = len(actions)
    for t in range(m_free):
        F = prefix.shape[0]
        rho = np.repeat(rho, n_act, axis=0)
        queue = np.repeat(queue, n_act, axis=0)
        ys = np.repeat(ys, n_act, axis=0)
        J = np.repeat(J, n_act)
        V = np.repeat(V, n_act)
        traj = [np.repeat(row, n_act, axis=0) for row in traj]
        effs = [np.repeat(col, n_act) for col in effs]
        prefix = np.hstack([np.repeat(prefix, n_act, axis=0),
                            np.tile(actions, F).reshape(-1, 1)])
        evals += prefix.shape[0]
        u = sim._commands(t, prefix[:, -1], ys)
        effs.append(u[:, sim.me_col])
        J += rho.sum(axis=1) * area
        V += w.q * (rho ** 2).sum(axis=1) + w.r * u[:, sim.me_col] ** 2
        rho, queue, ys = sim._step(rho, queue, ys, u, sim.k0 + t)
        traj.append(rho)
        if prefix.shape[0] > width:
            keep = np.argsort(J if rank_by == "J" else V, kind="stable")[:width]
            keep.sort()  # preserve enumeration order among survivors
            prefix, rho, queue, ys = prefix[keep], rho[keep], queue[keep], ys[keep]
            J, V = J[keep], V[keep]
            traj = [row[keep] for row in traj]
            effs = [col[keep] for col in effs]
    C = prefix.shape[0]
    matrix = np.hstack([prefix, np.broadcast_to(tail, (C, tail.size))])
    xi = np.empty((C, sim.N + 1, sim.rho0.size))
    eff = np.empty((C, sim.N))
    for t, row in enumerate(traj):
        xi[:, t] = row
    for t, col in enumerate(effs):
        eff[:, t] = col
    if m_free < sim.N:
        J, V, (rho, queue, ys) = _finish_tail(sim, matrix, m_free,
                                              (rho, queue, ys), J, V, xi, eff)
    xi[:, sim.N] = rho
    E = np.einsum("cj,jk,ck->c", rho, w.H, rho)
    return matrix, J, V + E, E, xi, eff, evals


def _finish_tail(sim, matrix, t0, state, J, V, xi=None, eff=None):
    """Advance candidates through steps t0..N-1, accumulating stage costs."""
    rho, queue, ys = state
    w = sim.weights
    area = sim._dt * sim._dx
    for t in range(t0, sim.N):
        u = sim._commands(t, matrix[:, t], ys)
        if xi is not None:
            xi[:, t] = rho
            eff[:, t] = u[:, sim.me_col]
        J = J + rho.sum(axis=1) * area
        V = V + w.q * (rho ** 2).sum(axis=1) + w.r * u[:, sim.me_col] ** 2
        rho, queue, ys = sim._step(rho, queue, ys, u, sim.k0 + t)
    return J, V, (rho, queue, ys)


def _enumerate(sim: HorizonSim, actions: np.ndarray, m_free: int,
               prior_mu: np.ndarray, enum_budget: int, beam_width: int,
               rank_by: str, extra_plans: list[np.ndarray]):
    """Candidates with (J, V, E) and trajectories, eval count, beam flag.

    extra_plans are appended after the enumerated candidates, so they win
    ties only by strictly better objective.
    """
    tail = prior_mu[m_free:]
    if len(actions) ** m_free <= enum_budget:
        matrix = _exhaustive_matrix(actions, m_free, tail)
        J, V, E, xi, eff = sim.evaluate(matrix, keep_traj=True)
        beam_used = False
        evals = matrix.shape[0]
    else:
        matrix, J, V, E, xi, eff, evals = _beam_candidates(
            sim, actions, m_free, tail, beam_width, rank_by)
        beam_used = True
    if extra_plans:
        extra = np.vstack([p.reshape(1, -1) for p in extra_plans])
        J2, V2, E2, xi2, eff2 = sim.evaluate(extra, keep_traj=True)
        matrix = np.vstack([matrix, extra])
        J = np.concatenate([J, J2])
        V = np.concatenate([V, V2])
        E = np.concatenate([E, E2])
        xi = np.concatenate([xi, xi2])
        eff = np.concatenate([eff, eff2])
        evals += len(extra_plans)
    return matrix, J, V, E, xi, eff, evals, beam_used


def solve_stability(snapshot: SimulationState, me: int,
                    committed: dict[int, np.ndarray], weights: Weights,
                    m_free: int, prior_mu: np.ndarray,
                    actions: np.ndarray, fd: FundamentalDiagram, grid: Grid,
                    boundaries: Boundaries, enum_budget: int = 400,
                    beam_width: int | None = None,
                    consistent_flux: bool = True,
                    terminal_eps: float = math.inf) -> PlanResult:
    """Minimize the stability objective over the first m_free steps."""
    horizon = len(prior_mu)
    if not (1 <= m_free <= horizon):
        raise ValueError(f"m_free {m_free} outside [1, {horizon}]")
    sim = HorizonSim(snapshot, me, committed, horizon, fd, grid, boundaries,
                     weights, consistent_flux)
    width = beam_width if beam_width is not None else (len(actions)) ** 2
    matrix, J, V, E, xi, eff, evals, beam_used = _enumerate(
        sim, actions, m_free, np.asarray(prior_mu, dtype=float), enum_budget,
        width, "V", [np.asarray(prior_mu, dtype=float)])
    ok = E <= terminal_eps ** 2 if math.isfinite(terminal_eps) else \
        np.ones(matrix.shape[0], dtype=bool)
    if not ok.any():
        best = int(np.argmin(V))
        feasible = False
    else:
        best = int(np.argmin(np.where(ok, V, np.inf)))
        feasible = True
    return PlanResult(mu=eff[best].copy(), xi=xi[best].copy(),
                      J_value=float(J[best]), V_value=float(V[best]),
                      feasible=feasible, evals=evals, beam_used=beam_used)


def solve_control(snapshot: SimulationState, me: int,
                  committed: dict[int, np.ndarray], weights: Weights,
                  eta: float, m_free: int, prior_mu: np.ndarray,
                  stability_plan: PlanResult, actions: np.ndarray,
                  fd: FundamentalDiagram, grid: Grid, boundaries: Boundaries,
                  enum_budget: int = 400, beam_width: int | None = None,
                  consistent_flux: bool = True,
                  terminal_eps: float = math.inf) -> PlanResult:
    """Minimize the travel objective subject to V <= eta.

    The incumbent prior plan and the stability solution are always evaluated
    and always admissible (the stability solution doubles as the fallback),
    so the accepted J never exceeds J(stability solution) and never worsens
    across iterations.
    """
    horizon = len(prior_mu)
    if not (1 <= m_free <= horizon):
        raise ValueError(f"m_free {m_free} outside [1, {horizon}]")
    prior_mu = np.asarray(prior_mu, dtype=float)
    sim = HorizonSim(snapshot, me, committed, horizon, fd, grid, boundaries,
                     weights, consistent_flux)
    width = beam_width if beam_width is not None else (len(actions)) ** 2
    extras = [prior_mu, np.asarray(stability_plan.mu, dtype=float)]
    matrix, J, V, E, xi, eff, evals, beam_used = _enumerate(
        sim, actions, m_free, prior_mu, enum_budget, width, "J", extras)
    grandfathered = np.zeros(matrix.shape[0], dtype=bool)
    grandfathered[matrix.shape[0] - len(extras):] = True
    ok = (V <= eta) | grandfathered
    if math.isfinite(terminal_eps):
        ok &= (E <= terminal_eps ** 2) | grandfathered
    best = int(np.argmin(np.where(ok, J, np.inf)))
    return PlanResult(mu=eff[best].copy(), xi=xi[best].copy(),
                      J_value=float(J[best]), V_value=float(V[best]),
                      feasible=bool(V[best] <= eta), evals=evals,
                      beam_used=beam_used)
