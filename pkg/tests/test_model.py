"""Domain types: validation, invariants, round trips."""

import numpy as np
import pytest

from loopgrid import ingest
from loopgrid.model import (
    CorridorLayout,
    DataGrid,
    HealthFlag,
    LoopgridError,
    NegativeFlow,
    OccupancyOutOfRange,
    UnknownDetector,
    validate_sample,
)


class TestValidateSample:
    def test_in_range_values(self):
        s = validate_sample(3, 2, 946684800, 12, 0.15)
        assert s.detector.station == 3 and s.detector.lane == 2
        assert s.flow_count == 12 and s.occupancy == 0.15

    def test_occupancy_out_of_range(self):
        with pytest.raises(OccupancyOutOfRange):
            validate_sample(3, 2, 946684800, 12, 1.4)
        with pytest.raises(OccupancyOutOfRange):
            validate_sample(3, 2, 946684800, 12, -0.1)

    def test_negative_flow(self):
        with pytest.raises(NegativeFlow):
            validate_sample(3, 2, 946684800, -1, 0.1)

    def test_unknown_detector(self, layout4):
        with pytest.raises(UnknownDetector):
            validate_sample(9, 1, 0, 1, 0.1, layout4)
        with pytest.raises(UnknownDetector):
            validate_sample(1, 3, 0, 1, 0.1, layout4)  # station 1 has 2 lanes

    def test_flow_without_occupancy_is_storable(self):
        s = validate_sample(1, 1, 0, 5, 0.0)
        assert s.flow_count == 5 and s.occupancy == 0.0


class TestLayout:
    def test_segment_lengths_sum_to_distance(self):
        rng = np.random.default_rng(7)
        pm = np.cumsum(rng.uniform(0.2, 1.5, 20))
        layout = CorridorLayout(
            stations=tuple(range(1, 21)), postmiles=tuple(pm), lane_counts=(3,) * 20
        )
        for a, b in [(1, 20), (3, 11), (5, 6)]:
            ia, ib = a - 1, b - 1
            assert abs(layout.segment_lengths[ia:ib].sum() - layout.distance(a, b)) < 1e-9

    def test_postmiles_must_increase(self):
        with pytest.raises(LoopgridError):
            CorridorLayout(stations=(1, 2), postmiles=(1.0, 1.0), lane_counts=(2, 2))

    def test_duplicate_station_ids_rejected(self):
        with pytest.raises(LoopgridError):
            CorridorLayout(stations=(1, 1), postmiles=(0.0, 1.0), lane_counts=(2, 2))


class TestDataGrid:
    def _grid(self, layout4):
        rng = np.random.default_rng(0)
        shape = (2, 6, 4, 2)
        flow = rng.integers(0, 20, shape).astype(float)
        occ = rng.uniform(0, 0.4, shape)
        health = np.zeros(shape, dtype=np.int8)
        health[0, 2, 1, 0] = HealthFlag.MISSING
        flow[0, 2, 1, 0] = np.nan
        occ[0, 2, 1, 0] = np.nan
        return DataGrid(flow, occ, health, layout4, slot_seconds=14400, start_epoch=345600)

    def test_immutability(self, layout4):
        grid = self._grid(layout4)
        with pytest.raises(ValueError):
            grid.flow[0, 0, 0, 0] = 99.0

    def test_csv_round_trip_identity(self, layout4, tmp_path):
        grid = self._grid(layout4)
        path = tmp_path / "grid.csv"
        ingest.write_grid_csv(grid, path)
        back = ingest.read_grid_csv(path, layout4)
        assert back.equals(grid)

    def test_day_of_week_from_epoch(self, layout4):
        grid = self._grid(layout4)  # start_epoch 345600 = Monday 1970-01-05
        assert grid.day_of_week(0) == 0
        assert grid.day_of_week(1) == 1

    def test_mismatched_layout_rejected(self, layout4):
        shape = (1, 4, 3, 2)
        with pytest.raises(LoopgridError):
            DataGrid(
                np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int8), layout4, 21600
            )

    def test_invalid_lane_normalized(self):
        layout = CorridorLayout(stations=(1, 2), postmiles=(0.0, 1.0), lane_counts=(2, 1))
        shape = (1, 4, 2, 2)
        grid = DataGrid(
            np.ones(shape), np.full(shape, 0.1), np.zeros(shape, dtype=np.int8), layout, 21600
        )
        assert np.isnan(grid.flow[0, 0, 1, 1])
        assert grid.health[0, 0, 1, 1] == HealthFlag.MISSING
        assert not grid.lane_mask[1, 1]
