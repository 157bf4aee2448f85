import numpy as np
import pytest

from cavflow.core import FundamentalDiagram, Grid


@pytest.fixture
def fd():
    """Table-style defaults: V=33.33 m/s, R=0.12 veh/m, 3 upstream lanes."""
    return FundamentalDiagram(free_speed=33.33, jam_density=0.12, lanes_upstream=3)


@pytest.fixture
def grid(fd):
    return Grid.checked(fd, num_cells=7, dx=300.0, dt=1.0, road_length=3000.0)


@pytest.fixture
def small_grid(fd):
    """4-cell zone with no free-drive approach (zone_start = 0)."""
    return Grid.checked(fd, num_cells=4, dx=300.0, dt=1.0, road_length=1200.0)


def random_density(rng, fd, n):
    return rng.uniform(0.0, fd.jam_density, size=n)


def gamma_true_speed(rng, fd, rho):
    """A speed inside the Gamma window of rho, or None if the window is empty."""
    from cavflow.bottleneck import gamma_bounds

    g1, g2 = gamma_bounds(rho, fd)
    lo = max(g1, 0.0)
    hi = min(g2, fd.free_speed)
    if hi <= lo:
        return None
    u = rng.uniform(lo, hi)
    eps = 1e-9 * (hi - lo)
    return min(max(u, lo + eps), hi - eps)
