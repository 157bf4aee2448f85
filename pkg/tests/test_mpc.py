import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavflow.core import FundamentalDiagram, Grid
from cavflow.plant import CavState, SimulationState
from cavflow.mpc import (
    Boundaries,
    HorizonSim,
    Weights,
    build_action_set,
    command_vectors,
    contraction_eta,
    linearize,
    lyapunov_terminal,
    make_weights,
    predict_horizon,
    solve_control,
    solve_stability,
    stability_cost,
    stabilizing_gain,
    travel_cost,
)
from cavflow import oracle

FD = FundamentalDiagram(free_speed=33.33, jam_density=0.12, lanes_upstream=3)
GRID = Grid.checked(FD, num_cells=7, dx=300.0, dt=1.0, road_length=3000.0)
TOY = Grid.checked(FD, num_cells=3, dx=300.0, dt=1.0, road_length=900.0)
WEIGHTS = make_weights(FD, GRID)
TOY_WEIGHTS = make_weights(FD, TOY)


def bounds(f_in, f_out, T=50):
    return Boundaries(f_in=np.full(T, f_in), f_out=np.full(T, f_out))


def snapshot(rho, cavs, queue=0.0, k=0):
    return SimulationState(k=k, rho=np.asarray(rho, dtype=float), cavs=cavs,
                           upstream_queue=queue)


class TestActionSet:
    def test_default_layout(self):
        a = build_action_set(5.0, 33.33, 6)
        assert len(a) == 7
        assert a[0] == 0.0
        assert a[1] == 5.0
        assert a[-1] == pytest.approx(33.33)
        assert np.all(np.diff(a[1:]) > 0)

    def test_single_speed(self):
        assert build_action_set(5.0, 33.33, 1).tolist() == [0.0, 5.0]


class TestCosts:
    def test_travel_cost_zero(self):
        assert travel_cost(np.zeros((8, 7)), GRID) == 0.0

    def test_travel_cost_uniform(self):
        xi = np.full((8, 7), 0.03)
        assert travel_cost(xi, GRID) == pytest.approx(0.03 * 7 * 7 * 300.0)

    def test_travel_cost_matches_resummation(self):
        rng = np.random.default_rng(4)
        xi = rng.uniform(0, 0.12, (8, 7))
        manual = sum(xi[t, j] for t in range(7) for j in range(7)) * 300.0
        assert travel_cost(xi, GRID) == pytest.approx(manual, rel=1e-12)

    def test_stability_cost_zero(self):
        assert stability_cost(np.zeros((8, 7)), np.zeros(7), WEIGHTS) == 0.0

    def test_stability_cost_single_entry(self):
        xi = np.zeros((8, 7))
        xi[0, 0] = 0.1
        v = stability_cost(xi, np.zeros(7), WEIGHTS)
        assert v == pytest.approx(WEIGHTS.q * 0.01)
        xi2 = np.zeros((8, 7))
        xi2[-1, 0] = 0.1
        v2 = stability_cost(xi2, np.zeros(7), WEIGHTS)
        assert v2 == pytest.approx(WEIGHTS.H[0, 0] * 0.01)

    @given(seed=st.integers(0, 10 ** 6))
    @settings(max_examples=50, deadline=None)
    def test_stability_cost_lower_bound(self, seed):
        rng = np.random.default_rng(seed)
        xi = rng.uniform(0, 0.12, (8, 7))
        mu = rng.uniform(0, 33.33, 7)
        v = stability_cost(xi, mu, WEIGHTS)
        assert v >= WEIGHTS.q * float(xi[0] @ xi[0]) - 1e-12


class TestContraction:
    def test_lambda_zero(self):
        assert contraction_eta(2.0, 5.0, 0.0) == 2.0

    def test_lambda_near_one(self):
        assert contraction_eta(2.0, 5.0, 0.999999) == pytest.approx(5.0, abs=1e-4)

    def test_arithmetic(self):
        assert contraction_eta(2.0, 5.0, 0.6) == pytest.approx(3.8)

    def test_no_prior_plan_is_inactive(self):
        assert math.isinf(contraction_eta(2.0, None, 0.6))

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            contraction_eta(1.0, 1.0, 1.0)


class TestLinearization:
    def test_psi_matches_analytic_advection(self):
        lin = linearize(FD, GRID)
        c = FD.free_speed * GRID.dt / GRID.dx
        expect = (1 - c) * np.eye(7) + c * np.diag(np.ones(6), -1)
        assert np.max(np.abs(lin.psi - expect)) < 1e-5

    def test_spectral_radius_below_one_gives_zero_gain(self):
        lin = linearize(FD, GRID)
        assert lin.spectral_radius_Z == pytest.approx(1 - 33.33 / 300.0, abs=1e-5)
        assert np.all(lin.K == 0.0)
        assert np.all(lin.delta == 0.0)

    def test_psi_matches_forward_difference_oracle(self):
        lin = linearize(FD, GRID)
        from cavflow.mpc import _raw_ctm_step

        jac = oracle.fd_jacobian(lambda x: _raw_ctm_step(x, FD, GRID),
                                 np.zeros(7), h=1e-7)
        denom = np.maximum(np.abs(jac), 1e-3)
        assert np.max(np.abs(lin.psi - jac) / denom) < 1e-6

    def test_stabilizing_gain_on_synthetic_system(self):
        psi = np.array([[1.2, 0.0], [0.1, 0.5]])
        delta = np.eye(2)
        K = stabilizing_gain(psi, delta, 0.5, 1.0)
        rad = np.max(np.abs(np.linalg.eigvals(psi + delta @ K)))
        assert rad < 1.0

    def test_unstabilizable_raises(self):
        psi = np.array([[1.2]])
        delta = np.zeros((1, 1))
        with pytest.raises(ValueError):
            stabilizing_gain(psi, delta, 0.5, 1.0)


class TestLyapunov:
    def test_zero_Z(self):
        H = lyapunov_terminal(np.zeros((3, 3)), 0.5, 1.0, np.zeros((3, 3)), 0.05)
        assert H == pytest.approx((0.5 + 0.05) * np.eye(3))

    def test_geometric_series(self):
        Z = 0.5 * np.eye(4)
        H = lyapunov_terminal(Z, 0.5, 1.0, np.zeros((4, 4)), 0.5)
        assert H == pytest.approx(np.eye(4) / (1 - 0.25), abs=1e-10)

    def test_residual_default_grid(self):
        lin = linearize(FD, GRID)
        H = lyapunov_terminal(lin.Z, 0.5, 1.0, lin.K, 0.05)
        M = 0.55 * np.eye(7)
        residual = np.abs(lin.Z.T @ H @ lin.Z - H + M).max()
        assert residual <= 1e-8

    def test_matches_scipy(self):
        from scipy.linalg import solve_discrete_lyapunov

        lin = linearize(FD, GRID)
        H = lyapunov_terminal(lin.Z, 0.5, 1.0, lin.K, 0.05)
        ref = solve_discrete_lyapunov(lin.Z.T, 0.55 * np.eye(7))
        assert np.max(np.abs(H - ref)) < 1e-9

    def test_weights_h_is_spectral_norm(self):
        assert WEIGHTS.h == pytest.approx(np.linalg.eigvalsh(WEIGHTS.H)[-1])
        assert WEIGHTS.h >= WEIGHTS.H.diagonal().max() - 1e-12


class TestPredictHorizon:
    def test_single_step_no_cavs_matches_density_step(self):
        from cavflow.bottleneck import density_step

        rho = np.array([0.03, 0.05, 0.02])
        cav = CavState(id=0, y=50.0)
        snap = snapshot(rho, [cav])
        xi, _, _ = predict_horizon(snap, 0, np.zeros(1), {}, 1, FD, TOY,
                                   bounds(0.4, 0.5), TOY_WEIGHTS)
        direct, _ = density_step(rho, [(0, 50.0)], {0: 0.0}, 0.4, 0.5, FD, TOY)
        assert xi[1] == pytest.approx(direct, abs=1e-15)

    def test_zero_commands_equal_uncontrolled_rollout(self):
        from cavflow.bottleneck import density_step

        rho = np.array([0.03, 0.05, 0.02])
        snap = snapshot(rho, [CavState(id=0, y=100.0)])
        xi, _, _ = predict_horizon(snap, 0, np.zeros(4), {}, 4, FD, TOY,
                                   bounds(0.4, 0.5), TOY_WEIGHTS)
        r = rho.copy()
        for t in range(4):
            r, _ = density_step(r, [], {}, 0.4, 0.5, FD, TOY)
            # CAV with zero command has no effect on densities.
            assert xi[t + 1] == pytest.approx(r, abs=1e-14)

    def test_committed_neighbor_matches_hand_rollout(self):
        rho = np.array([0.03, 0.05, 0.02])
        cavs = [CavState(id=0, y=100.0), CavState(id=1, y=400.0)]
        snap = snapshot(rho, cavs)
        committed = {1: np.full(3, 10.0)}
        my = np.full(3, 33.33)
        xi, _, traj = predict_horizon(snap, 0, my, committed, 3, FD, TOY,
                                      bounds(0.4, 0.5), TOY_WEIGHTS)
        # Straight-line composition with the oracle step and position rule.
        r = rho.copy()
        ys = {0: 100.0, 1: 400.0}
        for t in range(3):
            controls = {0: 33.33 if ys[0] <= TOY.zone_end else 0.0,
                        1: 10.0 if ys[1] <= TOY.zone_end else 0.0}
            positions = [(i, ys[i]) for i in (0, 1)]
            nxt = oracle.straightline_step(r, positions, controls, 0.4, 0.5,
                                           FD.free_speed, FD.jam_density,
                                           FD.alpha, TOY.dx, TOY.dt, 0.0)
            for i in (0, 1):
                v = oracle._downstream_speed(r, ys[i], 0.5, FD.free_speed,
                                             FD.jam_density, TOY.dx, 0.0, 3)
                u = controls[i]
                ys[i] += (min(u, v) if u > 0 else v) * TOY.dt
            r = np.clip(nxt, 0.0, FD.jam_density)
            assert xi[t + 1] == pytest.approx(r, abs=1e-12)
            assert traj[0][t + 1] == pytest.approx(ys[0], abs=1e-9)
            assert traj[1][t + 1] == pytest.approx(ys[1], abs=1e-9)

    def test_length_error(self):
        snap = snapshot(np.zeros(3), [CavState(id=0, y=100.0)])
        with pytest.raises(ValueError):
            predict_horizon(snap, 0, np.zeros(3), {}, 4, FD, TOY,
                            bounds(0.0, 1.0), TOY_WEIGHTS)


class TestCommandVectors:
    def test_expansion(self):
        mu = np.array([10.0, 0.0, 12.0])
        pos = np.array([100.0, 400.0, 700.0, 900.0])
        vec = command_vectors(mu, pos, TOY)
        assert vec.shape == (3, 3)
        assert vec[0, 0] == 10.0
        assert vec[1].sum() == 0.0
        assert vec[2, 2] == 12.0
        assert np.count_nonzero(vec) == 2


def brute_force_solve(snap, me, committed, weights, actions, N, grid, bnds,
                      objective):
    """Independent enumerator over the full candidate product space."""
    best_val, best_mu = None, None
    for combo in itertools.product(actions, repeat=N):
        mu = np.array(combo)
        xi, eff, _ = predict_horizon(snap, me, mu, committed, N, FD, grid,
                                     bnds, weights)
        val = (travel_cost(xi, grid) if objective == "J"
               else stability_cost(xi, eff, weights))
        if best_val is None or val < best_val - 1e-15:
            best_val, best_mu = val, eff
    return best_mu, best_val


class TestSolvers:
    def test_zero_density_stability_picks_zero(self):
        snap = snapshot(np.zeros(3), [CavState(id=0, y=100.0)])
        actions = build_action_set(5.0, 33.33, 3)
        plan = solve_stability(snap, 0, {}, TOY_WEIGHTS, 2, np.zeros(2),
                               actions, FD, TOY, bounds(0.0, 1.0))
        assert np.all(plan.mu == 0.0)
        assert plan.V_value == 0.0

    def test_enumeration_matches_brute_force_V(self):
        rng = np.random.default_rng(8)
        rho = rng.uniform(0.01, 0.08, 3)
        snap = snapshot(rho, [CavState(id=0, y=150.0)])
        actions = build_action_set(5.0, 33.33, 3)
        bnds = bounds(0.4, 0.5)
        plan = solve_stability(snap, 0, {}, TOY_WEIGHTS, 2, np.zeros(2),
                               actions, FD, TOY, bnds)
        _, ref = brute_force_solve(snap, 0, {}, TOY_WEIGHTS, actions, 2, TOY,
                                   bnds, "V")
        assert plan.V_value == pytest.approx(ref, rel=1e-12)

    def test_enumeration_matches_brute_force_J(self):
        rng = np.random.default_rng(13)
        rho = rng.uniform(0.02, 0.08, 3)
        snap = snapshot(rho, [CavState(id=0, y=150.0)], queue=20.0)
        actions = build_action_set(5.0, 33.33, 3)
        bnds = bounds(0.6, 0.5)
        stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 2, np.zeros(2),
                               actions, FD, TOY, bnds)
        plan = solve_control(snap, 0, {}, TOY_WEIGHTS, math.inf, 2,
                             np.zeros(2), stab, actions, FD, TOY, bnds)
        _, ref = brute_force_solve(snap, 0, {}, TOY_WEIGHTS, actions, 2, TOY,
                                   bnds, "J")
        assert plan.J_value == pytest.approx(ref, rel=1e-12)

    def test_zero_density_control_tie_breaks_to_zero(self):
        snap = snapshot(np.zeros(3), [CavState(id=0, y=100.0)])
        actions = build_action_set(5.0, 33.33, 3)
        stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 2, np.zeros(2),
                               actions, FD, TOY, bounds(0.0, 1.0))
        plan = solve_control(snap, 0, {}, TOY_WEIGHTS, math.inf, 2,
                             np.zeros(2), stab, actions, FD, TOY,
                             bounds(0.0, 1.0))
        assert np.all(plan.mu == 0.0)

    def test_upper_bound_vs_stability_solution(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            rho = rng.uniform(0.01, 0.1, 3)
            snap = snapshot(rho, [CavState(id=0, y=rng.uniform(0, 800))],
                            queue=rng.uniform(0, 30))
            actions = build_action_set(5.0, 33.33, 3)
            bnds = bounds(0.55, 0.45)
            stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 3,
                                   np.zeros(3), actions, FD, TOY, bnds)
            eta = contraction_eta(stab.V_value, None, 0.6)
            plan = solve_control(snap, 0, {}, TOY_WEIGHTS, eta, 3,
                                 np.zeros(3), stab, actions, FD, TOY, bnds)
            assert plan.J_value <= stab.J_value + 1e-12

    def test_eta_constrains_choice(self):
        rng = np.random.default_rng(23)
        rho = rng.uniform(0.03, 0.08, 3)
        snap = snapshot(rho, [CavState(id=0, y=150.0)], queue=30.0)
        actions = build_action_set(5.0, 33.33, 3)
        bnds = bounds(0.7, 0.5)
        stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 3, np.zeros(3),
                               actions, FD, TOY, bnds)
        tight = solve_control(snap, 0, {}, TOY_WEIGHTS, stab.V_value, 3,
                              np.zeros(3), stab, actions, FD, TOY, bnds)
        loose = solve_control(snap, 0, {}, TOY_WEIGHTS, math.inf, 3,
                              np.zeros(3), stab, actions, FD, TOY, bnds)
        # The tight budget admits only the V-optimal candidates.
        assert tight.V_value <= stab.V_value + 1e-12
        assert loose.J_value <= tight.J_value + 1e-12

    def test_plan_result_invariants(self):
        rng = np.random.default_rng(31)
        rho = rng.uniform(0.02, 0.09, 3)
        snap = snapshot(rho, [CavState(id=0, y=250.0)], queue=10.0)
        actions = build_action_set(5.0, 33.33, 3)
        bnds = bounds(0.5, 0.45)
        stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 2, np.zeros(2),
                               actions, FD, TOY, bnds)
        assert stab.J_value == pytest.approx(travel_cost(stab.xi, TOY), rel=1e-12)
        assert stab.V_value == pytest.approx(
            stability_cost(stab.xi, stab.mu, TOY_WEIGHTS), rel=1e-12)

    def test_beam_stays_close_to_exhaustive(self):
        rng = np.random.default_rng(37)
        rho = rng.uniform(0.02, 0.09, 3)
        snap = snapshot(rho, [CavState(id=0, y=150.0)], queue=25.0)
        actions = build_action_set(5.0, 33.33, 3)
        bnds = bounds(0.6, 0.5)
        stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 3, np.zeros(3),
                               actions, FD, TOY, bnds)
        exhaustive = solve_control(snap, 0, {}, TOY_WEIGHTS, math.inf, 3,
                                   np.zeros(3), stab, actions, FD, TOY, bnds,
                                   enum_budget=1000)
        beamed = solve_control(snap, 0, {}, TOY_WEIGHTS, math.inf, 3,
                               np.zeros(3), stab, actions, FD, TOY, bnds,
                               enum_budget=10, beam_width=16)
        assert beamed.beam_used and not exhaustive.beam_used
        assert beamed.J_value >= exhaustive.J_value - 1e-12
        # Incumbent grandfathering: never worse than the zero incumbent.
        xi0, eff0, _ = predict_horizon(snap, 0, np.zeros(3), {}, 3, FD, TOY,
                                       bnds, TOY_WEIGHTS)
        assert beamed.J_value <= travel_cost(xi0, TOY) + 1e-12

    def test_eval_count_exhaustive(self):
        snap = snapshot(np.full(3, 0.04), [CavState(id=0, y=150.0)])
        actions = build_action_set(5.0, 33.33, 3)
        stab = solve_stability(snap, 0, {}, TOY_WEIGHTS, 2, np.zeros(2),
                               actions, FD, TOY, bounds(0.4, 0.5))
        assert stab.evals == 4 ** 2 + 1  # enumerated + forced incumbent
