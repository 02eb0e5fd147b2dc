import numpy as np
import pytest

from loopgrid import synth
from loopgrid.model import CorridorLayout
from loopgrid.velocity import FreeFlowTable


@pytest.fixture
def layout4():
    """Four stations, one mile apart, two lanes each."""
    return CorridorLayout(
        stations=(1, 2, 3, 4), postmiles=(0.0, 1.0, 2.0, 3.0), lane_counts=(2, 2, 2, 2)
    )


@pytest.fixture
def layout6():
    return synth.uniform_layout(6, 3.0, 3)


def small_world(
    n_stations=4,
    length_miles=2.0,
    lanes=2,
    n_days=3,
    base=300,
    seed=5,
    demand=((0, 20), (5, 150), (7, 600), (9, 450), (15, 550), (18, 650), (20, 250), (24, 30)),
    zones=(),
    faults=(),
    **kwargs,
):
    layout = synth.uniform_layout(n_stations, length_miles, lanes)
    zone_objs = tuple(synth.SpeedZone(lo, hi, curve) for lo, hi, curve in zones)
    cfg = synth.WorldConfig(
        layout=layout,
        n_days=n_days,
        base_interval_s=base,
        seed=seed,
        demand_vph=demand,
        zones=zone_objs,
        faults=tuple(faults),
        **kwargs,
    )
    return synth.generate_world(cfg)


@pytest.fixture
def rush_world():
    """Small corridor with a morning congestion dip; deterministic."""
    return small_world(
        n_stations=6,
        length_miles=3.0,
        lanes=2,
        n_days=4,
        zones=((1, 4, ((0, 85), (7, 70), (7.5, 32), (8.5, 28), (9.5, 50), (10.5, 80), (24, 85))),),
        day_demand_jitter_sd=0.1,
        truck_fraction=((0, 0.1), (24, 0.1)),
        slot_speed_jitter_sd=0.01,
    )


@pytest.fixture
def flat64_table():
    """Every detector pinned to a 64 mph free-flow speed."""
    return FreeFlowTable(station_overrides={st: 64.0 for st in range(1, 200)})


def constant_station_field(speeds_by_station, slots=288):
    """Time-constant (slots, stations) field from per-station speeds."""
    v = np.asarray(speeds_by_station, dtype=float)
    return np.tile(v[None, :], (slots, 1))
