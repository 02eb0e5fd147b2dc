"""Shared domain types for the loop-detector pipeline.

Everything downstream (health screening, imputation, speed estimation,
travel-time prediction) reads and writes the types defined here.  All
types are immutable after construction: dataclasses are frozen and numpy
payloads have their writeable flag cleared, so values can be shared
freely between workers.

Unit conventions, used consistently across the package:

* occupancy is a fraction in [0, 1], never a percentage
* distances along the corridor are miles, vehicle lengths are feet
* speeds are mph, travel times are minutes
* timestamps are UTC epoch seconds; slots index intervals within a day
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

SECONDS_PER_DAY = 86400
MPH_TO_FPS = 5280.0 / 3600.0


class LoopgridError(Exception):
    """Base class for every error raised by this package."""


class OccupancyOutOfRange(LoopgridError):
    pass


class NegativeFlow(LoopgridError):
    pass


class UnknownDetector(LoopgridError):
    pass


class HealthFlag(IntEnum):
    """Per-cell detector state: 0 good, 1 malfunctioning, 2 missing."""

    GOOD = 0
    MALFUNCTIONING = 1
    MISSING = 2


class Provenance(IntEnum):
    """How a velocity value was obtained."""

    MEASURED = 0
    PRELIMINARY = 1
    FILTERED = 2
    IMPUTED = 3


@dataclass(frozen=True)
class DetectorRef:
    """One loop: a station (roadway cross-section) and a lane number.

    Both indices are 1-based; lane 1 is the innermost (fast) lane.
    """

    station: int
    lane: int

    def __post_init__(self):
        if self.station < 1:
            raise UnknownDetector(f"station must be >= 1, got {self.station}")
        if self.lane < 1:
            raise UnknownDetector(f"lane must be >= 1, got {self.lane}")


@dataclass(frozen=True)
class LoopSample:
    """One 30-second (or other base-interval) reading from a single loop.

    ``flow_count`` is the number of vehicles detected in the interval and
    ``occupancy`` the fraction of the interval during which the loop was
    covered.  A sample with positive flow but zero occupancy is storable
    (it is the health module's job to judge it), but out-of-range values
    are construction errors.
    """

    detector: DetectorRef
    timestamp: int
    flow_count: int
    occupancy: float

    def __post_init__(self):
        if self.flow_count < 0:
            raise NegativeFlow(f"flow_count {self.flow_count} < 0")
        if not (0.0 <= self.occupancy <= 1.0):
            raise OccupancyOutOfRange(f"occupancy {self.occupancy} outside [0, 1]")


def validate_sample(station, lane, timestamp, flow_count, occupancy, layout=None):
    """Build a LoopSample from raw parsed fields, enforcing all invariants.

    When ``layout`` is given, the detector must exist in it (station known
    and lane within the station's lane count), otherwise UnknownDetector
    is raised.
    """
    det = DetectorRef(int(station), int(lane))
    if layout is not None:
        if det.station not in layout.station_index:
            raise UnknownDetector(f"station {det.station} not in layout")
        if det.lane > layout.lane_counts[layout.station_index[det.station]]:
            raise UnknownDetector(
                f"lane {det.lane} exceeds lane count of station {det.station}"
            )
    return LoopSample(det, int(timestamp), int(flow_count), float(occupancy))


@dataclass(frozen=True)
class CorridorLayout:
    """Ordered stations along one freeway direction.

    Postmiles must be strictly increasing so every segment length
    u_i = postmile[i+1] - postmile[i] is positive.
    """

    stations: tuple
    postmiles: tuple
    lane_counts: tuple

    def __post_init__(self):
        if not (len(self.stations) == len(self.postmiles) == len(self.lane_counts)):
            raise LoopgridError("layout columns have unequal lengths")
        if len(self.stations) == 0:
            raise LoopgridError("layout is empty")
        object.__setattr__(self, "stations", tuple(int(s) for s in self.stations))
        object.__setattr__(self, "postmiles", tuple(float(p) for p in self.postmiles))
        object.__setattr__(self, "lane_counts", tuple(int(c) for c in self.lane_counts))
        if len(set(self.stations)) != len(self.stations):
            raise LoopgridError("duplicate station ids in layout")
        pm = np.asarray(self.postmiles)
        if not np.all(np.diff(pm) > 0):
            raise LoopgridError("postmiles must be strictly increasing")
        if any(c < 1 for c in self.lane_counts):
            raise LoopgridError("every station needs at least one lane")

    @property
    def n_stations(self):
        return len(self.stations)

    @property
    def max_lanes(self):
        return max(self.lane_counts)

    @property
    def station_index(self):
        """Mapping station id -> 0-based position along the corridor."""
        return {s: i for i, s in enumerate(self.stations)}

    @property
    def segment_lengths(self):
        """u_i in miles, one entry per consecutive station pair."""
        return np.diff(np.asarray(self.postmiles))

    def distance(self, a, b):
        """Corridor distance in miles from station id ``a`` to ``b``."""
        idx = self.station_index
        return self.postmiles[idx[b]] - self.postmiles[idx[a]]


def _frozen_array(values, dtype):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DataGrid:
    """Dense day x slot x station x lane grid of (flow, occupancy, health).

    The grid is rectangular over the corridor's maximum lane count; cells
    beyond a station's actual lane count are normalized to (NaN, NaN,
    MISSING) and excluded by ``lane_mask``.  Absent readings are explicit
    MISSING cells, never holes.
    """

    flow: np.ndarray
    occupancy: np.ndarray
    health: np.ndarray
    layout: CorridorLayout
    slot_seconds: int
    start_epoch: int = 0

    def __post_init__(self):
        flow = np.array(self.flow, dtype=np.float64, copy=True)
        occ = np.array(self.occupancy, dtype=np.float64, copy=True)
        health = np.array(self.health, dtype=np.int8, copy=True)
        if flow.ndim != 4 or flow.shape != occ.shape or flow.shape != health.shape:
            raise LoopgridError("grid arrays must share one 4-D shape")
        d, t, s, l = flow.shape
        if s != self.layout.n_stations or l != self.layout.max_lanes:
            raise LoopgridError("grid station/lane dimensions disagree with layout")
        if self.slot_seconds <= 0:
            raise LoopgridError("slot_seconds must be positive")
        invalid = ~self._lane_mask(self.layout)
        flow[:, :, invalid] = np.nan
        occ[:, :, invalid] = np.nan
        health[:, :, invalid] = HealthFlag.MISSING
        for name, arr in (("flow", flow), ("occupancy", occ), ("health", health)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @staticmethod
    def _lane_mask(layout):
        mask = np.zeros((layout.n_stations, layout.max_lanes), dtype=bool)
        for i, c in enumerate(layout.lane_counts):
            mask[i, :c] = True
        return mask

    @classmethod
    def empty(cls, layout, n_days, slot_seconds, start_epoch=0):
        """An all-MISSING grid covering ``n_days`` whole days."""
        slots = SECONDS_PER_DAY // slot_seconds
        shape = (n_days, slots, layout.n_stations, layout.max_lanes)
        return cls(
            flow=np.full(shape, np.nan),
            occupancy=np.full(shape, np.nan),
            health=np.full(shape, HealthFlag.MISSING, dtype=np.int8),
            layout=layout,
            slot_seconds=slot_seconds,
            start_epoch=start_epoch,
        )

    @property
    def n_days(self):
        return self.flow.shape[0]

    @property
    def slots_per_day(self):
        return self.flow.shape[1]

    @property
    def lane_mask(self):
        return self._lane_mask(self.layout)

    def day_of_week(self, day):
        """0 = Monday ... 6 = Sunday, derived from start_epoch (UTC)."""
        epoch_day = (self.start_epoch + day * SECONDS_PER_DAY) // SECONDS_PER_DAY
        return int((epoch_day + 3) % 7)  # epoch day 0 (1970-01-01) was a Thursday

    def good_mask(self):
        return np.asarray(self.health == HealthFlag.GOOD)

    def present_mask(self):
        return np.asarray(self.health != HealthFlag.MISSING)

    def replace(self, **arrays):
        """A copy of this grid with some payload arrays swapped out."""
        fields = dict(
            flow=self.flow,
            occupancy=self.occupancy,
            health=self.health,
            layout=self.layout,
            slot_seconds=self.slot_seconds,
            start_epoch=self.start_epoch,
        )
        fields.update(arrays)
        return DataGrid(**fields)

    def equals(self, other):
        """Cell-for-cell identity (NaN == NaN), used by round-trip checks."""
        return (
            self.flow.shape == other.flow.shape
            and self.slot_seconds == other.slot_seconds
            and self.start_epoch == other.start_epoch
            and self.layout == other.layout
            and np.array_equal(self.flow, other.flow, equal_nan=True)
            and np.array_equal(self.occupancy, other.occupancy, equal_nan=True)
            and np.array_equal(self.health, other.health)
        )


@dataclass(frozen=True)
class VelocityField:
    """Per-detector estimated speeds (mph) with a provenance tag per cell."""

    speed: np.ndarray
    provenance: np.ndarray
    layout: CorridorLayout
    slot_seconds: int
    start_epoch: int = 0

    def __post_init__(self):
        speed = np.array(self.speed, dtype=np.float64, copy=True)
        prov = np.array(self.provenance, dtype=np.int8, copy=True)
        if speed.shape != prov.shape or speed.ndim != 4:
            raise LoopgridError("velocity arrays must share one 4-D shape")
        valid = DataGrid._lane_mask(self.layout)
        speed[:, :, ~valid] = np.nan
        if np.any(speed[:, :, valid] <= 0):
            raise LoopgridError("speeds must be positive where present")
        speed.flags.writeable = False
        prov.flags.writeable = False
        object.__setattr__(self, "speed", speed)
        object.__setattr__(self, "provenance", prov)

    @property
    def n_days(self):
        return self.speed.shape[0]

    @property
    def slots_per_day(self):
        return self.speed.shape[1]

    def day_of_week(self, day):
        epoch_day = (self.start_epoch + day * SECONDS_PER_DAY) // SECONDS_PER_DAY
        return int((epoch_day + 3) % 7)

    def station_speeds(self):
        """(days, slots, stations) plain mean over each station's lanes.

        The prediction stage works with one speed per station; the lane
        mean is the aggregation rule used throughout this package.
        """
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.speed, axis=3)


@dataclass(frozen=True)
class MeanLengthProfile:
    """Stratified mean effective vehicle length estimates (feet).

    One smoothed curve over slots-of-day per (station, lane, day-of-week
    class).  When ``merge_weekdays`` is true, Monday..Friday share class 0
    while Saturday and Sunday keep classes 5 and 6.  Each curve carries a
    per-slot extrapolation flag and the occupancy threshold used during
    fitting (needed by the low-occupancy speed baseline).
    """

    curves: dict
    slots_per_day: int
    merge_weekdays: bool = True

    def __post_init__(self):
        for key, entry in self.curves.items():
            mu, extrap, alpha = entry
            mu = _frozen_array(mu, np.float64)
            extrap = _frozen_array(extrap, bool)
            if mu.shape != (self.slots_per_day,) or extrap.shape != mu.shape:
                raise LoopgridError(f"curve {key} has wrong length")
            if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
                raise LoopgridError(f"curve {key} has non-positive lengths")
            self.curves[key] = (mu, extrap, float(alpha))

    def dow_class(self, dow):
        if self.merge_weekdays and dow < 5:
            return 0
        return dow

    def lookup(self, station, lane, dow):
        """(mu curve, extrapolated flags, occupancy threshold) for one stratum."""
        key = (station, lane, self.dow_class(dow))
        if key not in self.curves:
            raise LoopgridError(f"no mean-length curve fitted for {key}")
        return self.curves[key]


@dataclass(frozen=True)
class TravelTimeSeries:
    """Realized and snapshot corridor travel times, minutes, per day.

    ``realized[d, j]`` is the trip time for a departure at
    ``depart_slots[j]`` on day ``d`` obtained by walking the velocity
    field; ``snapshot[d, j]`` is the frozen-field proxy computed from the
    departure instant only.  NaN marks departures whose trip ran past the
    end of the available field.
    """

    origin: int
    destination: int
    depart_slots: np.ndarray
    realized: np.ndarray
    snapshot: np.ndarray
    slot_seconds: int
    start_epoch: int = 0

    def __post_init__(self):
        slots = _frozen_array(self.depart_slots, np.int64)
        realized = _frozen_array(self.realized, np.float64)
        snapshot = _frozen_array(self.snapshot, np.float64)
        if realized.ndim != 2 or realized.shape != snapshot.shape:
            raise LoopgridError("travel-time matrices must share one 2-D shape")
        if realized.shape[1] != slots.shape[0]:
            raise LoopgridError("slot axis disagrees with depart_slots")
        for arr in (realized, snapshot):
            vals = arr[np.isfinite(arr)]
            if np.any(vals <= 0):
                raise LoopgridError("travel times must be positive where defined")
        object.__setattr__(self, "depart_slots", slots)
        object.__setattr__(self, "realized", realized)
        object.__setattr__(self, "snapshot", snapshot)

    @property
    def n_days(self):
        return self.realized.shape[0]

    def depart_minutes(self):
        """Departure times as minutes past midnight."""
        return self.depart_slots * (self.slot_seconds / 60.0)
