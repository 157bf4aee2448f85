"""Per-step multiagent coordination and full closed-loop runs.

Each time step runs the sequential scheme: build a decision order (greedy
lowest-cost-first by default, ascending id otherwise) together with initial
plans, then iterate agent-by-agent solves until the last agent's objective
stops changing by more than epsilon or an iteration cap is reached, and
execute every agent's first command.

Horizons adapt per solve: M = M_min + (N - M_min) * (value - LB)/(UB - LB),
rounded half away from zero, where the value is the previous iteration's
objective and the bounds come from

  J_UB = J(stability solution)
  J_LB = max(0, (dx*dt/q) * [V(stability solution) - N*r*u_max^2 - (J+1)*h*R^2])
  V_LB = q*||rho^k||^2
  V_UB = (J+1)*h*R^2 + N*(q*(J+1)*R^2 + r*u_max^2)

Controller kinds: "none" (zero commands), "centralized" (joint enumeration,
budget-guarded), "dmpc_parallel" (per-agent solves against last-iteration
information only), "rollout_full" (sequential, full horizon) and
"rollout_truncated" (sequential with adaptive horizons).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import FundamentalDiagram, Grid
from .plant import Arrival, SimulationState, advance, spawn_and_retire
from .mpc import (
    Boundaries,
    HorizonSim,
    PlanResult,
    Weights,
    build_action_set,
    contraction_eta,
    make_weights,
    predict_horizon,
    solve_control,
    solve_stability,
    stability_cost,
    travel_cost,
)

CONTROLLER_KINDS = ("none", "centralized", "dmpc_parallel", "rollout_full",
                    "rollout_truncated")


@dataclass(frozen=True)
class PlannerConfig:
    """Everything the per-step coordination needs."""

    N: int = 7
    M_min: int = 2
    S: int = 6
    lam: float = 0.6
    epsilon: float = 1e-3
    P_max: int = 5
    ordering: str = "optimized"          # "optimized" | "fixed"
    truncation: bool = True
    controller_kind: str = "rollout_truncated"
    u_min: float = 5.0
    u_max: float = 33.33
    q: float = 0.5
    r: float = 1.0
    delta_q: float = 0.05
    enum_budget: int = 400
    beam_width: int | None = None
    terminal_eps: float = math.inf
    centralized_budget: int = 10 ** 7

    def __post_init__(self):
        if not (1 <= self.M_min <= self.N):
            raise ValueError(f"need 1 <= M_min <= N, got {self.M_min}, {self.N}")
        if not (0.0 <= self.lam < 1.0):
            raise ValueError(f"lambda must be in [0, 1), got {self.lam}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.P_max < 1:
            raise ValueError("P_max must be >= 1")
        if self.ordering not in ("optimized", "fixed"):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.controller_kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller {self.controller_kind!r}")
        if not (0 < self.u_min <= self.u_max):
            raise ValueError("need 0 < u_min <= u_max")


@dataclass(frozen=True)
class Bounds:
    J_LB: float
    J_UB: float
    V_LB: float
    V_UB: float

    def __post_init__(self):
        if self.J_LB > self.J_UB + 1e-12 or self.V_LB > self.V_UB + 1e-12:
            raise ValueError("lower bound exceeds upper bound")
        if self.J_LB < 0:
            raise ValueError("J_LB must be nonnegative")


@dataclass
class SolveRecord:
    """One accepted (stability, control) solve pair."""

    cav: int
    p: int                      # 0 = initialization/ordering phase
    M_V: int
    M_J: int
    J: float
    V: float
    V_stab: float
    J_stab: float
    eta: float
    bounds: Bounds
    evals: int
    feasible: bool
    beam_used: bool


@dataclass
class StepReport:
    k: int
    order: list[int]
    iterations: int
    records: list[SolveRecord] = field(default_factory=list)
    deltas: list[float] = field(default_factory=list)
    eval_count: int = 0
    ordering_evals: int = 0
    pmax_hit: bool = False
    accepted_J: dict[int, float] = field(default_factory=dict)
    accepted_V: dict[int, float] = field(default_factory=dict)
    accepted_mu: dict[int, np.ndarray] = field(default_factory=dict)
    joint_J: float | None = None


def j_bounds(v_stab: float, j_stab: float, weights: Weights,
             config: PlannerConfig, grid: Grid, fd: FundamentalDiagram,
             n_horizon: int | None = None) -> tuple[float, float]:
    """Objective sandwich from the stability solution (clamped at zero)."""
    n_h = config.N if n_horizon is None else n_horizon
    bracket = (v_stab - n_h * config.r * config.u_max ** 2
               - grid.num_cells * weights.h * fd.jam_density ** 2)
    j_lb = max(0.0, grid.dx * grid.dt / weights.q * bracket)
    return j_lb, j_stab


def v_bounds(rho_k: np.ndarray, weights: Weights, config: PlannerConfig,
             grid: Grid, fd: FundamentalDiagram,
             n_horizon: int | None = None) -> tuple[float, float]:
    """State-norm lower bound and worst-case upper bound for V."""
    n_h = config.N if n_horizon is None else n_horizon
    v_lb = weights.q * float(rho_k @ rho_k)
    v_ub = (grid.num_cells * weights.h * fd.jam_density ** 2
            + n_h * (weights.q * grid.num_cells * fd.jam_density ** 2
                     + config.r * config.u_max ** 2))
    return v_lb, v_ub


def truncation_horizon(value: float, lb: float, ub: float, m_min: int,
                       n: int) -> int:
    """M = round_half_away(M_min + (N-M_min)*(clamp(value)-LB)/(UB-LB))."""
    if lb > ub:
        raise ValueError(f"lb {lb} > ub {ub}")
    if ub == lb:
        return n
    frac = (min(max(value, lb), ub) - lb) / (ub - lb)
    raw = m_min + (n - m_min) * frac
    m = int(math.floor(raw + 0.5))  # half away from zero (raw is nonnegative)
    return min(max(m, m_min), n)


class Coordinator:
    """Stateful per-step planner holding the contraction memory."""

    def __init__(self, fd: FundamentalDiagram, grid: Grid,
                 boundaries: Boundaries, config: PlannerConfig,
                 total_steps: int, consistent_flux: bool = True,
                 weights: Weights | None = None):
        self.fd = fd
        self.grid = grid
        self.boundaries = boundaries
        self.config = config
        self.total_steps = total_steps
        self.consistent = consistent_flux
        self.weights = weights if weights is not None else make_weights(
            fd, grid, config.q, config.r, config.delta_q)
        self.actions = build_action_set(config.u_min, config.u_max, config.S)
        self.v_prev_star: dict[int, float] = {}

    # -- helpers -------------------------------------------------------------

    def _horizon(self, k: int) -> int:
        return max(1, min(self.config.N, self.total_steps - k))

    def _solve_pair(self, snap, cav, committed, m_v, m_j, prior_stab_mu,
                    prior_mu):
        cfg = self.config
        stab = solve_stability(
            snap, cav, committed, self.weights, m_v, prior_stab_mu,
            self.actions, self.fd, self.grid, self.boundaries,
            enum_budget=cfg.enum_budget, beam_width=cfg.beam_width,
            consistent_flux=self.consistent, terminal_eps=cfg.terminal_eps)
        eta = contraction_eta(stab.V_value, self.v_prev_star.get(cav), cfg.lam)
        plan = solve_control(
            snap, cav, committed, self.weights, eta, m_j, prior_mu, stab,
            self.actions, self.fd, self.grid, self.boundaries,
            enum_budget=cfg.enum_budget, beam_width=cfg.beam_width,
            consistent_flux=self.consistent, terminal_eps=cfg.terminal_eps)
        return stab, eta, plan

    def _base_plan(self, snap, cav, n_h) -> PlanResult:
        mu = np.zeros(n_h)
        xi, eff, _ = predict_horizon(snap, cav, mu, {}, n_h, self.fd,
                                     self.grid, self.boundaries, self.weights,
                                     self.consistent)
        return PlanResult(mu=eff, xi=xi, J_value=travel_cost(xi, self.grid),
                          V_value=stability_cost(xi, eff, self.weights),
                          feasible=True, evals=0)

    def evaluate_joint(self, snap, plans: dict[int, np.ndarray],
                       n_h: int) -> float:
        """Shared objective J of a complete joint plan."""
        active = sorted(c.id for c in snap.active_cavs())
        if not active:
            sim = _EmptyFleetSim(snap, n_h, self.fd, self.grid,
                                 self.boundaries, self.consistent)
            return sim.travel_cost()
        me = active[0]
        committed = {i: plans[i] for i in active if i != me}
        xi, _, _ = predict_horizon(snap, me, plans[me], committed, n_h,
                                   self.fd, self.grid, self.boundaries,
                                   self.weights, self.consistent)
        return travel_cost(xi, self.grid)

    # -- decision ordering -----------------------------------------------------

    def decision_order(self, snap: SimulationState, n_h: int):
        """Greedy order construction; returns (order, plans, stabs, records, evals)."""
        cfg = self.config
        active = sorted(c.id for c in snap.active_cavs())
        zeros = np.zeros(n_h)
        order: list[int] = []
        plans: dict[int, PlanResult] = {}
        stabs: dict[int, PlanResult] = {}
        records: list[SolveRecord] = []
        evals = 0
        v_lb, v_ub = v_bounds(snap.rho, self.weights, cfg, self.grid, self.fd,
                              n_h)
        remaining = list(active)
        while remaining:
            best = None
            for cand in remaining:  # ascending id: ties keep the lower id
                committed = {j: plans[j].mu for j in order}
                stab, eta, plan = self._solve_pair(snap, cand, committed, n_h,
                                                   n_h, zeros, zeros)
                evals += stab.evals + plan.evals
                if best is None or plan.J_value < best[2].J_value:
                    best = (cand, stab, plan, eta)
            cand, stab, plan, eta = best
            order.append(cand)
            plans[cand] = plan
            stabs[cand] = stab
            jlb, jub = j_bounds(stab.V_value, stab.J_value, self.weights, cfg,
                                self.grid, self.fd, n_h)
            records.append(SolveRecord(
                cav=cand, p=0, M_V=n_h, M_J=n_h, J=plan.J_value,
                V=plan.V_value, V_stab=stab.V_value, J_stab=stab.J_value,
                eta=eta, bounds=Bounds(jlb, jub, v_lb, v_ub),
                evals=stab.evals + plan.evals, feasible=plan.feasible,
                beam_used=plan.beam_used or stab.beam_used))
            remaining.remove(cand)
        return order, plans, stabs, records, evals

    # -- per-step controllers --------------------------------------------------

    def step(self, snap: SimulationState):
        kind = self.config.controller_kind
        active = sorted(c.id for c in snap.active_cavs())
        self.v_prev_star = {i: v for i, v in self.v_prev_star.items()
                            if i in active}
        if kind == "none" or not active:
            report = StepReport(k=snap.k, order=active, iterations=0)
            return {i: 0.0 for i in active}, report
        if kind == "centralized":
            return self._centralized_step(snap, active)
        if kind == "dmpc_parallel":
            return self._iterative_step(snap, active, sequential=False,
                                        truncation=False, ordered=False)
        if kind == "rollout_full":
            return self._iterative_step(snap, active, sequential=True,
                                        truncation=False,
                                        ordered=self.config.ordering == "optimized")
        return self._iterative_step(snap, active, sequential=True,
                                    truncation=self.config.truncation,
                                    ordered=self.config.ordering == "optimized")

    def _iterative_step(self, snap, active, sequential: bool,
                        truncation: bool, ordered: bool):
        cfg = self.config
        n_h = self._horizon(snap.k)
        m_min = min(cfg.M_min, n_h)
        report = StepReport(k=snap.k, order=list(active), iterations=0)

        if ordered:
            order, plans, stabs, records, o_evals = self.decision_order(snap, n_h)
            report.order = order
            report.records.extend(records)
            report.ordering_evals = o_evals
            report.eval_count += o_evals
        else:
            order = list(active)
            base = self._base_plan(snap, order[0], n_h)
            plans = {i: base for i in order}
            stabs = {}

        v_lb, v_ub = v_bounds(snap.rho, self.weights, cfg, self.grid, self.fd,
                              n_h)
        j_last_prev = plans[order[-1]].J_value
        p = 0
        while p < cfg.P_max:
            p += 1
            frozen = {i: plans[i].mu for i in order} if not sequential else None
            for cav in order:
                if sequential:
                    committed = {j: plans[j].mu for j in order if j != cav}
                    prior_plan = plans[cav]
                else:
                    committed = {j: frozen[j] for j in order if j != cav}
                    prior_plan = plans[cav]
                prior_stab = stabs.get(cav, prior_plan)
                if truncation:
                    m_v = truncation_horizon(prior_stab.V_value, v_lb, v_ub,
                                             m_min, n_h)
                else:
                    m_v = n_h
                stab = solve_stability(
                    snap, cav, committed, self.weights, m_v, prior_stab.mu,
                    self.actions, self.fd, self.grid, self.boundaries,
                    enum_budget=cfg.enum_budget, beam_width=cfg.beam_width,
                    consistent_flux=self.consistent,
                    terminal_eps=cfg.terminal_eps)
                eta = contraction_eta(stab.V_value, self.v_prev_star.get(cav),
                                      cfg.lam)
                jlb, jub = j_bounds(stab.V_value, stab.J_value, self.weights,
                                    cfg, self.grid, self.fd, n_h)
                if truncation:
                    m_j = truncation_horizon(prior_plan.J_value, jlb, jub,
                                             m_min, n_h)
                else:
                    m_j = n_h
                plan = solve_control(
                    snap, cav, committed, self.weights, eta, m_j,
                    prior_plan.mu, stab, self.actions, self.fd, self.grid,
                    self.boundaries, enum_budget=cfg.enum_budget,
                    beam_width=cfg.beam_width, consistent_flux=self.consistent,
                    terminal_eps=cfg.terminal_eps)
                plans[cav] = plan
                stabs[cav] = stab
                solve_evals = stab.evals + plan.evals
                report.eval_count += solve_evals
                report.records.append(SolveRecord(
                    cav=cav, p=p, M_V=m_v, M_J=m_j, J=plan.J_value,
                    V=plan.V_value, V_stab=stab.V_value, J_stab=stab.J_value,
                    eta=eta, bounds=Bounds(jlb, jub, v_lb, v_ub),
                    evals=solve_evals, feasible=plan.feasible,
                    beam_used=plan.beam_used or stab.beam_used))
            delta = abs(plans[order[-1]].J_value - j_last_prev)
            j_last_prev = plans[order[-1]].J_value
            report.deltas.append(delta)
            if delta <= cfg.epsilon:
                break
        report.iterations = p
        report.pmax_hit = p == cfg.P_max and (report.deltas[-1] > cfg.epsilon
                                              if report.deltas else False)
        for cav in order:
            self.v_prev_star[cav] = plans[cav].V_value
            report.accepted_J[cav] = plans[cav].J_value
            report.accepted_V[cav] = plans[cav].V_value
            report.accepted_mu[cav] = plans[cav].mu
        report.joint_J = plans[order[-1]].J_value
        actions = {cav: float(plans[cav].mu[0]) for cav in order}
        return actions, report

    def _centralized_step(self, snap, active):
        cfg = self.config
        n_h = self._horizon(snap.k)
        n_act = len(self.actions)
        n_seq = n_act ** n_h
        total = n_seq ** len(active)
        if total > cfg.centralized_budget:
            raise RuntimeError(
                f"centralized enumeration of {total} joint candidates exceeds "
                f"the budget of {cfg.centralized_budget}")
        idx = np.arange(total)
        mats = {}
        for rank, cav in enumerate(active):  # cav-major, ascending id
            seq_idx = (idx // (n_seq ** (len(active) - 1 - rank))) % n_seq
            cols = []
            for t in range(n_h):
                digit = (seq_idx // (n_act ** (n_h - 1 - t))) % n_act
                cols.append(self.actions[digit])
            mats[cav] = np.stack(cols, axis=1)
        sim = HorizonSim(snap, active[0], {}, n_h, self.fd, self.grid,
                         self.boundaries, self.weights, self.consistent)
        J = sim.evaluate_joint(mats)
        best = int(np.argmin(J))
        report = StepReport(k=snap.k, order=list(active), iterations=1,
                            eval_count=total, joint_J=float(J[best]))
        actions = {cav: float(mats[cav][best, 0]) for cav in active}
        for cav in active:
            report.accepted_J[cav] = float(J[best])
        return actions, report


class _EmptyFleetSim:
    """Travel objective of a CAV-free rollforward (used by evaluate_joint)."""

    def __init__(self, snap, n_h, fd, grid, boundaries, consistent):
        from .bottleneck import density_step

        rho = np.asarray(snap.rho, dtype=float).copy()
        queue = float(snap.upstream_queue)
        self.value = 0.0
        for t in range(n_h):
            self.value += float(rho.sum()) * grid.dt * grid.dx
            f_in = boundaries.inflow(snap.k + t)
            rho, step = density_step(
                rho, [], {}, f_in + queue / grid.dt,
                boundaries.outflow(snap.k + t), fd, grid, consistent)
            queue = max(queue + (f_in - step.interface_flux[0]) * grid.dt, 0.0)

    def travel_cost(self):
        return self.value


# ---------------------------------------------------------------------------
# Closed-loop runs
# ---------------------------------------------------------------------------

@dataclass
class RunInputs:
    """Plant-side setup for a closed-loop run (built by the scenario layer)."""

    fd: FundamentalDiagram
    grid: Grid
    boundaries: Boundaries
    schedule: list[Arrival]
    rho0: np.ndarray
    queue0: float
    total_steps: int
    consistent_flux: bool = True


@dataclass
class RunResult:
    metrics: object
    reports: list[StepReport]
    density_trace: np.ndarray          # (T, J+1) pre-step densities
    cav_trace: list[tuple]             # (k, id, y, command)
    boundary_flux: np.ndarray          # (T, 2) applied inflow/outflow
    masses: np.ndarray                 # (T+1,) zone vehicle counts
    final_state: SimulationState


def run(inputs: RunInputs, config: PlannerConfig) -> RunResult:
    """Algorithm-1 outer loop: spawn, coordinate, advance, account."""
    grid, fd = inputs.grid, inputs.fd
    coordinator = Coordinator(fd, grid, inputs.boundaries, config,
                              inputs.total_steps, inputs.consistent_flux)
    state = SimulationState(k=0, rho=np.asarray(inputs.rho0, dtype=float).copy(),
                            cavs=[], upstream_queue=inputs.queue0)
    T = inputs.total_steps
    density_trace = np.empty((T, grid.num_cells))
    boundary_flux = np.empty((T, 2))
    masses = np.empty(T + 1)
    cav_trace: list[tuple] = []
    reports: list[StepReport] = []

    for k in range(T):
        state.k = k
        state = spawn_and_retire(state, inputs.schedule, grid)
        actions, report = coordinator.step(state)
        reports.append(report)
        state.metrics.eval_count += report.eval_count
        state.metrics.per_step_M.append(
            [(rec.M_V, rec.M_J) for rec in report.records])
        density_trace[k] = state.rho
        masses[k] = state.rho.sum() * grid.dx
        for cav in state.active_cavs():
            cav_trace.append((k, cav.id, cav.y, actions.get(cav.id, 0.0)))
        state, sysstep = advance(
            state, actions, inputs.boundaries.inflow(k),
            inputs.boundaries.outflow(k), fd, grid,
            (config.u_min, config.u_max), inputs.consistent_flux)
        boundary_flux[k, 0] = sysstep.interface_flux[0]
        boundary_flux[k, 1] = sysstep.interface_flux[-1]
    masses[T] = state.rho.sum() * grid.dx
    return RunResult(metrics=state.metrics, reports=reports,
                     density_trace=density_trace, cav_trace=cav_trace,
                     boundary_flux=boundary_flux, masses=masses,
                     final_state=state)
