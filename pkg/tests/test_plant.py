import numpy as np
import pytest

from cavflow.core import FundamentalDiagram, Grid, flux
from cavflow.plant import (
    Arrival,
    CavState,
    Metrics,
    SimulationState,
    advance,
    average_travel_metrics,
    cav_speed,
    downstream_density,
    spawn_and_retire,
)
from cavflow import oracle

FD = FundamentalDiagram(free_speed=33.33, jam_density=0.12, lanes_upstream=3)
GRID = Grid.checked(FD, num_cells=7, dx=300.0, dt=1.0, road_length=3000.0)
U = (5.0, 33.33)


def fresh_state(rho=None, cavs=None, queue=0.0):
    rho = np.zeros(7) if rho is None else np.asarray(rho, dtype=float)
    return SimulationState(k=0, rho=rho, cavs=cavs or [], upstream_queue=queue)


class TestDownstreamDensity:
    def test_free_segment(self):
        rho = np.linspace(0.01, 0.07, 7)
        assert downstream_density(rho, 100.0, 0.5, FD, GRID) == 0.0
        # Last metre before the zone sees the first cell.
        assert downstream_density(rho, 899.5, 0.5, FD, GRID) == rho[0]

    def test_inside_cell_and_edge_band(self):
        rho = np.linspace(0.01, 0.07, 7)
        assert downstream_density(rho, 1000.0, 0.5, FD, GRID) == rho[0]
        assert downstream_density(rho, 1199.5, 0.5, FD, GRID) == rho[1]

    def test_last_cell_uses_outflow_ghost(self):
        rho = np.full(7, 0.03)
        ghost = 0.5 / FD.free_speed
        assert downstream_density(rho, 2999.5, 0.5, FD, GRID) == pytest.approx(ghost)
        assert downstream_density(rho, 3100.0, 0.5, FD, GRID) == pytest.approx(ghost)


class TestAdvance:
    def test_empty_road_noop(self):
        state = fresh_state()
        nxt, _ = advance(state, {}, 0.0, 0.0, FD, GRID, U)
        assert np.all(nxt.rho == 0.0)
        assert nxt.k == 1
        assert nxt.metrics.total_vehicle_time == 0.0

    def test_single_cav_at_free_speed(self):
        cav = CavState(id=0, y=1000.0, commanded_u=33.33)
        state = fresh_state(cavs=[cav])
        nxt, _ = advance(state, {0: 33.33}, 0.0, 1.0, FD, GRID, U)
        assert nxt.cavs[0].y == pytest.approx(1000.0 + 33.33)
        assert nxt.cavs[0].effective_speed == pytest.approx(33.33)

    def test_commanded_below_traffic_speed(self):
        # Uniform rho=0.03 (v=24.9975): a CAV commanded 10 m/s advances 10 m
        # and the cell update matches the straight-line oracle.
        rho = np.full(7, 0.03)
        cav = CavState(id=0, y=1210.0)
        state = fresh_state(rho=rho, cavs=[cav])
        f = flux(0.03, FD)
        nxt, _ = advance(state, {0: 10.0}, f, 1.0, FD, GRID, U)
        assert nxt.cavs[0].y == pytest.approx(1220.0)
        ref = oracle.straightline_step(rho, [(0, 1210.0)], {0: 10.0}, f, 1.0,
                                       FD.free_speed, FD.jam_density, FD.alpha,
                                       GRID.dx, GRID.dt, GRID.zone_start)
        assert nxt.rho == pytest.approx(ref, abs=1e-12)

    def test_no_control_equals_pure_ctm(self):
        rng = np.random.default_rng(5)
        rho = rng.uniform(0.0, FD.jam_density, 7)
        cavs = [CavState(id=0, y=1500.0), CavState(id=1, y=2500.0)]
        with_cavs = fresh_state(rho=rho.copy(), cavs=cavs)
        without = fresh_state(rho=rho.copy())
        a, _ = advance(with_cavs, {0: 0.0, 1: 0.0}, 0.4, 0.5, FD, GRID, U)
        b, _ = advance(without, {}, 0.4, 0.5, FD, GRID, U)
        assert np.array_equal(a.rho, b.rho)

    def test_rejects_out_of_range_control(self):
        cav = CavState(id=0, y=1000.0)
        state = fresh_state(cavs=[cav])
        with pytest.raises(ValueError):
            advance(state, {0: 2.0}, 0.0, 0.0, FD, GRID, U)

    def test_deactivation_past_zone_end(self):
        cav = CavState(id=0, y=2995.0)
        state = fresh_state(cavs=[cav])
        nxt, _ = advance(state, {0: 33.33}, 0.0, 1.0, FD, GRID, U)
        assert not nxt.cavs[0].active

    def test_positions_nondecreasing_and_kinematic_limit(self):
        rng = np.random.default_rng(9)
        rho = rng.uniform(0.0, FD.jam_density, 7)
        cavs = [CavState(id=i, y=rng.uniform(0, 2900)) for i in range(3)]
        state = fresh_state(rho=rho, cavs=cavs)
        controls = {i: float(rng.choice([0.0, 5.0, 20.0, 33.33])) for i in range(3)}
        nxt, _ = advance(state, controls, 0.4, 0.5, FD, GRID, U)
        for before, after in zip(state.cavs, nxt.cavs):
            dy = after.y - before.y
            assert dy >= 0.0
            assert dy <= FD.free_speed * GRID.dt + 1e-12

    def test_virtual_queue_accumulates_when_supply_binds(self):
        rho = np.full(7, 0.11)  # supply f(0.11) < inflow 0.5556
        state = fresh_state(rho=rho)
        f_in = 2000.0 / 3600.0
        nxt, step = advance(state, {}, f_in, 0.5, FD, GRID, U)
        assert step.interface_flux[0] == pytest.approx(flux(0.11, FD))
        assert nxt.upstream_queue == pytest.approx(
            (f_in - flux(0.11, FD)) * GRID.dt)

    def test_queue_release_capped_at_capacity(self):
        state = fresh_state(rho=np.zeros(7), queue=50.0)
        nxt, step = advance(state, {}, 0.5, 1.0, FD, GRID, U)
        assert step.interface_flux[0] == pytest.approx(FD.capacity)
        assert nxt.upstream_queue == pytest.approx(
            50.0 + (0.5 - FD.capacity) * GRID.dt)

    def test_jt_resummation(self):
        rng = np.random.default_rng(21)
        state = fresh_state(rho=rng.uniform(0, FD.jam_density, 7))
        total = 0.0
        for _ in range(20):
            total += state.rho.sum() * GRID.dt * GRID.dx
            state, _ = advance(state, {}, 0.4, 0.5, FD, GRID, U)
        assert state.metrics.total_vehicle_time == pytest.approx(total, rel=1e-12)


class TestSpawnRetire:
    def test_empty_schedule(self):
        state = fresh_state()
        assert spawn_and_retire(state, [], GRID).cavs == []

    def test_single_arrival(self):
        state = fresh_state()
        state.k = 5
        out = spawn_and_retire(state, [Arrival(step=5, position=900.0)], GRID)
        assert len(out.cavs) == 1
        assert out.cavs[0].y == 900.0

    def test_bad_position_rejected(self):
        state = fresh_state()
        with pytest.raises(ValueError):
            spawn_and_retire(state, [Arrival(step=0, position=3000.0)], GRID)

    def test_retire_inactive(self):
        state = fresh_state(cavs=[CavState(id=0, y=3100.0, active=False)])
        out = spawn_and_retire(state, [], GRID)
        assert out.cavs == []
        assert out.metrics.retired_cavs == 1


class TestMetrics:
    def test_zero_run_absent(self):
        avg_tt, avg_speed = average_travel_metrics(Metrics())
        assert avg_tt is None and avg_speed is None

    def test_steady_free_flow_average_speed(self):
        # rho = 0.03 uniform, inflow = f(0.03): steady state, avg speed = v(0.03).
        f = flux(0.03, FD)
        state = fresh_state(rho=np.full(7, 0.03))
        for _ in range(50):
            state, _ = advance(state, {}, f, 1.0, FD, GRID, U)
        avg_tt, avg_speed = average_travel_metrics(state.metrics)
        assert avg_speed == pytest.approx(24.9975, abs=0.1)
        assert avg_tt == pytest.approx(GRID.zone_length / 24.9975, rel=0.01)

    def test_conservation_over_run(self):
        rng = np.random.default_rng(2)
        state = fresh_state(rho=rng.uniform(0, FD.jam_density, 7))
        masses = [state.rho.sum() * GRID.dx]
        fins, fouts = [], []
        cavs = [CavState(id=0, y=1300.0)]
        state.cavs = cavs
        for k in range(100):
            state, step = advance(state, {0: 8.0}, 0.5, 0.6, FD, GRID, U)
            masses.append(state.rho.sum() * GRID.dx)
            fins.append(step.interface_flux[0])
            fouts.append(step.interface_flux[-1])
        worst = oracle.conservation_audit(masses, fins, fouts, GRID.dt)
        assert worst <= 1e-9
