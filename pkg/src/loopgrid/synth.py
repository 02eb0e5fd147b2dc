"""Synthetic ground-truth world: vehicles, detectors, faults.

Every estimator in the pipeline is validated against worlds generated
here.  A world is a configured per-slot speed field plus per-vehicle
streams: each vehicle enters the corridor with a known effective length
and replays the field kinematically (within segment i it moves at the
mean of the bounding stations' speeds for the current slot, exactly the
travel-time walk rule, so simulated transit times and walked travel
times agree by construction).  Detectors then observe the streams: per
base interval a loop reports the number of arriving vehicles and the
fraction of the interval covered, with on-times split across interval
boundaries.  Configured faults corrupt the reported samples and every
sample carries a hidden truth label for scoring detectors.

Everything is deterministic given the seed; per-day substreams are
spawned so days can be generated independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .model import MPH_TO_FPS, SECONDS_PER_DAY, CorridorLayout, DataGrid, HealthFlag, LoopgridError
from .velocity import FreeFlowTable

FAULT_LABELS = {"clean": 0, "stuck": 1, "hanging_on": 2, "hanging_off": 3, "chattering": 4, "missing": 5}
LABEL_NAMES = {v: k for k, v in FAULT_LABELS.items()}

MIN_SPEED_MPH = 3.0


class InfeasibleConfig(LoopgridError):
    pass


class UnknownFaultType(LoopgridError):
    pass


@dataclass(frozen=True)
class SpeedZone:
    """Congestion speed curve over a station index range (inclusive)."""

    station_lo: int
    station_hi: int
    curve: tuple  # ((hour, mph), ...)


@dataclass(frozen=True)
class Incident:
    """Speed reduction on a station range for part of one day."""

    station_lo: int
    station_hi: int
    day: int
    start_hour: float
    duration_hours: float
    factor: float


@dataclass(frozen=True)
class FaultSpec:
    """One detector-day corruption; params depend on the kind."""

    station: int
    lane: int
    day: int
    kind: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class WorldConfig:
    layout: CorridorLayout
    n_days: int = 1
    base_interval_s: int = 300
    seed: int = 0
    start_epoch: int = 345600  # a Monday
    demand_vph: tuple = ((0.0, 0.0), (5.0, 300.0), (20.0, 300.0), (24.0, 0.0))
    lane_share: tuple = ()
    day_demand_jitter_sd: float = 0.0
    day_speed_jitter_sd: float = 0.0
    background_speed_jitter_sd: float = 0.0
    slot_speed_jitter_sd: float = 0.0
    onset_jitter_minutes: float = 0.0
    car_length_ft: float = 18.0
    car_length_sd: float = 2.0
    truck_length_ft: float = 45.0
    truck_length_sd: float = 8.0
    truck_fraction: tuple = ((0.0, 0.0), (24.0, 0.0))
    zones: tuple = ()
    incidents: tuple = ()
    faults: tuple = ()
    free_flow: FreeFlowTable = None
    max_demand_vph: float = 3000.0

    def __post_init__(self):
        if SECONDS_PER_DAY % self.base_interval_s != 0:
            raise InfeasibleConfig("base interval must divide one day")
        if self.n_days < 1:
            raise InfeasibleConfig("need at least one day")
        peak = max(v for _, v in self.demand_vph)
        if peak > self.max_demand_vph:
            raise InfeasibleConfig(f"demand {peak} vph exceeds the {self.max_demand_vph} vph cap")
        if any(v < 0 for _, v in self.demand_vph):
            raise InfeasibleConfig("demand rates must be non-negative")
        if any(not (0.0 <= f <= 1.0) for _, f in self.truck_fraction):
            raise InfeasibleConfig("truck fractions must be in [0, 1]")
        for f in self.faults:
            if f.kind not in FAULT_LABELS or f.kind == "clean":
                raise UnknownFaultType(f"unknown fault kind {f.kind!r}")
        if self.free_flow is None:
            object.__setattr__(self, "free_flow", FreeFlowTable())

    @property
    def slots_per_day(self):
        return SECONDS_PER_DAY // self.base_interval_s


def _piecewise(points, hours):
    xs = np.asarray([p[0] for p in points], dtype=np.float64)
    ys = np.asarray([p[1] for p in points], dtype=np.float64)
    return np.interp(hours, xs, ys)


def build_speed_field(config, rng=None):
    """True per-slot station-lane speeds (mph), (days, slots, stations, lanes).

    Free-flow speed per lane, cut down by zone congestion curves (shifted
    and scaled per day when jitter is configured) and incident factors;
    multiplicative slot noise last.  Lanes beyond a station's count are
    NaN.
    """
    layout = config.layout
    t_n = config.slots_per_day
    s_n, l_n = layout.n_stations, layout.max_lanes
    hours = (np.arange(t_n) + 0.5) * config.base_interval_s / 3600.0
    rng = rng or np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    v = np.full((config.n_days, t_n, s_n, l_n), np.nan)
    v_ff = np.full((s_n, l_n), np.nan)
    for i, st in enumerate(layout.stations):
        for lane in range(1, layout.lane_counts[i] + 1):
            v_ff[i, lane - 1] = config.free_flow.lookup_for(st, lane, layout.lane_counts[i])
    day_shift = rng.normal(0.0, config.onset_jitter_minutes / 60.0, size=config.n_days)
    day_scale = np.exp(rng.normal(0.0, config.day_speed_jitter_sd, size=config.n_days))
    # day-level factor on the whole field: weather/fleet variation that
    # moves free-flow days too, not just congested zones
    background = np.exp(rng.normal(0.0, config.background_speed_jitter_sd, size=config.n_days))
    for d in range(config.n_days):
        cong = np.full((t_n, s_n), np.inf)
        for zone in config.zones:
            curve = _piecewise(zone.curve, hours - day_shift[d]) * day_scale[d]
            lo, hi = zone.station_lo, zone.station_hi
            cong[:, lo : hi + 1] = np.minimum(cong[:, lo : hi + 1], curve[:, None])
        for inc in config.incidents:
            if inc.day != d:
                continue
            in_time = (hours >= inc.start_hour) & (hours < inc.start_hour + inc.duration_hours)
            lo, hi = inc.station_lo, inc.station_hi
            base = np.where(np.isinf(cong[:, lo : hi + 1]), v_ff[None, lo : hi + 1, :].mean(axis=2), cong[:, lo : hi + 1])
            cong[in_time, lo : hi + 1] = base[in_time] * inc.factor
        day_v = np.minimum(v_ff[None, :, :], cong[:, :, None]) * background[d]
        if config.slot_speed_jitter_sd > 0:
            day_v = day_v * np.exp(rng.normal(0.0, config.slot_speed_jitter_sd, size=day_v.shape))
        v[d] = np.clip(day_v, MIN_SPEED_MPH, None)
    return v


def _vehicle_entries(config, rng, day, lane_idx):
    """Entry times (s), effective lengths (ft) for one day-lane stream."""
    t_n = config.slots_per_day
    dt = config.base_interval_s
    hours = (np.arange(t_n) + 0.5) * dt / 3600.0
    share = config.lane_share[lane_idx] if lane_idx < len(config.lane_share) else 1.0
    scale = np.exp(rng.normal(0.0, config.day_demand_jitter_sd)) if config.day_demand_jitter_sd > 0 else 1.0
    rate = _piecewise(config.demand_vph, hours) * share * scale * dt / 3600.0
    counts = rng.poisson(rate)
    entries = (np.repeat(np.arange(t_n), counts) + rng.random(counts.sum())) * dt
    entries.sort(kind="stable")
    frac = _piecewise(config.truck_fraction, entries / 3600.0)
    is_truck = rng.random(entries.size) < frac
    lengths = np.where(
        is_truck,
        rng.normal(config.truck_length_ft, config.truck_length_sd, entries.size),
        rng.normal(config.car_length_ft, config.car_length_sd, entries.size),
    )
    return entries, np.clip(lengths, 8.0, None)


def _chain_segment(arrive, seg_speed_mph, slot_s, u_miles):
    """Arrival times at the next station for all vehicles at once.

    The integral of the piecewise-constant segment speed is piecewise
    linear in time, so entry and exit times convert exactly through two
    linear interpolations.
    """
    t_n = seg_speed_mph.size
    knots = np.arange(t_n + 1) * slot_s
    dist = np.concatenate([[0.0], np.cumsum(seg_speed_mph * (slot_s / 3600.0))])
    d0 = np.interp(arrive, knots, dist)
    target = d0 + u_miles
    nxt = np.interp(target, dist, knots)
    return np.where(target > dist[-1] + 1e-12, np.nan, nxt)


@dataclass(frozen=True)
class SynthWorld:
    """Generated world: the true speed field plus replayable vehicle streams."""

    config: WorldConfig
    true_speeds: np.ndarray  # (days, slots, stations, lanes) mph

    @property
    def layout(self):
        return self.config.layout

    def station_true_speeds(self):
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.true_speeds, axis=3)

    def _rng_for(self, day, lane_idx):
        seq = np.random.SeedSequence(self.config.seed).spawn(self.config.n_days + 1)
        return np.random.default_rng(seq[day + 1].spawn(self.config.layout.max_lanes)[lane_idx])

    def events(self, day, with_speeds=True):
        """Per-lane vehicle streams for one day.

        Returns {lane (1-based): dict} with entry times, effective
        lengths, the (vehicles, stations) arrival-time matrix (NaN once a
        vehicle fails to finish within the day) and, unless
        ``with_speeds`` is off, the speed each vehicle held while
        crossing each detector.
        """
        cfg = self.config
        layout = cfg.layout
        u = layout.segment_lengths
        t_n = cfg.slots_per_day
        out = {}
        for lane_idx in range(layout.max_lanes):
            rng = self._rng_for(day, lane_idx)
            entries, lengths = _vehicle_entries(cfg, rng, day, lane_idx)
            arrivals = np.full((entries.size, layout.n_stations), np.nan)
            arrivals[:, 0] = entries
            current = entries.copy()
            for i in range(layout.n_stations - 1):
                vi = self.true_speeds[day, :, i, lane_idx]
                vj = self.true_speeds[day, :, i + 1, lane_idx]
                vi = np.where(np.isfinite(vi), vi, self.true_speeds[day, :, i, 0])
                vj = np.where(np.isfinite(vj), vj, self.true_speeds[day, :, i + 1, 0])
                seg = 0.5 * (vi + vj)
                current = _chain_segment(current, seg, cfg.base_interval_s, u[i])
                arrivals[:, i + 1] = current
            entry = {"entries": entries, "lengths": lengths, "arrivals": arrivals}
            if with_speeds:
                slot_at = np.clip(arrivals // cfg.base_interval_s, 0, t_n - 1)
                slot_at = np.where(np.isfinite(arrivals), slot_at, 0).astype(np.int64)
                pass_speeds = np.take_along_axis(self.true_speeds[day, :, :, lane_idx], slot_at, axis=0)
                entry["pass_speeds"] = np.where(np.isfinite(arrivals), pass_speeds, np.nan)
            out[lane_idx + 1] = entry
        return out

    def transit_minutes(self, day, lane, origin, destination):
        """Actual corridor transit times of this day-lane's finished vehicles."""
        idx = self.layout.station_index
        ev = self.events(day)[lane]
        a, b = idx[origin], idx[destination]
        ok = np.isfinite(ev["arrivals"][:, a]) & np.isfinite(ev["arrivals"][:, b])
        depart = ev["arrivals"][ok, a]
        minutes = (ev["arrivals"][ok, b] - depart) / 60.0
        return depart, minutes


def generate_world(config):
    """Build the deterministic world for a config (speed field + streams)."""
    speeds = build_speed_field(config)
    return SynthWorld(config=config, true_speeds=speeds)


def render_samples(world):
    """Observe every vehicle stream with the detectors at the base interval.

    Returns (flow, occupancy, present) arrays of shape
    (days, slots, stations, lanes).  Flow counts vehicles by arrival
    interval; occupancy accumulates on-time (effective length over speed)
    split proportionally across interval boundaries.
    """
    cfg = world.config
    layout = cfg.layout
    t_n = cfg.slots_per_day
    dt = float(cfg.base_interval_s)
    day_end = t_n * dt
    s_n, l_n = layout.n_stations, layout.max_lanes
    shape = (cfg.n_days, t_n, s_n, l_n)
    flow = np.zeros(shape)
    occ = np.zeros(shape)
    lane_valid = DataGrid._lane_mask(layout)
    for d in range(cfg.n_days):
        ev = world.events(d, with_speeds=False)
        for lane, data in ev.items():
            arrivals = data["arrivals"]
            lengths = data["lengths"]
            ok = np.isfinite(arrivals)
            ok &= lane_valid[None, :, lane - 1]
            veh, st = np.nonzero(ok)
            if veh.size == 0:
                continue
            a = arrivals[veh, st]
            slot = (a // dt).astype(np.int64)
            np.minimum(slot, t_n - 1, out=slot)
            lin = slot * s_n + st
            flow[d, :, :, lane - 1] += np.bincount(lin, minlength=t_n * s_n).reshape(t_n, s_n)
            speed_at = world.true_speeds[d, slot, st, lane - 1]
            on_time = lengths[veh] / (speed_at * MPH_TO_FPS)
            # first interval takes the on-time up to the boundary; the
            # rare straddling remainder spills into later intervals
            take = np.minimum(on_time, (slot + 1) * dt - a)
            occ[d, :, :, lane - 1] += np.bincount(lin, weights=take, minlength=t_n * s_n).reshape(t_n, s_n)
            remaining = on_time - take
            spill = remaining > 1e-12
            start, remaining, at = (slot[spill] + 1) * dt, remaining[spill], st[spill]
            guard = 0
            while start.size and guard < 8:
                live = start < day_end
                start, remaining, at = start[live], remaining[live], at[live]
                if start.size == 0:
                    break
                j = np.minimum((start // dt).astype(np.int64), t_n - 1)
                take = np.minimum(remaining, (j + 1) * dt - start)
                occ[d, :, :, lane - 1] += np.bincount(
                    j * s_n + at, weights=take, minlength=t_n * s_n
                ).reshape(t_n, s_n)
                start = start + take
                remaining = remaining - take
                keep = remaining > 1e-12
                start, remaining, at = start[keep], remaining[keep], at[keep]
                guard += 1
    occ = np.clip(occ / dt, 0.0, 1.0)
    present = np.broadcast_to(lane_valid, shape).copy()
    flow[:, :, ~lane_valid] = np.nan
    occ[:, :, ~lane_valid] = np.nan
    return flow, occ, present


def inject_faults(flow, occupancy, present, faults, layout, seed=0):
    """Corrupt rendered samples per the fault schedule; returns new arrays
    plus per-cell truth labels (FAULT_LABELS codes)."""
    flow = np.array(flow)
    occ = np.array(occupancy)
    present = np.array(present)
    labels = np.zeros(flow.shape, dtype=np.int8)
    t_n = flow.shape[1]
    sidx = layout.station_index
    seq = np.random.SeedSequence([seed, 0xFA117]).spawn(max(len(faults), 1))
    for f_i, f in enumerate(faults):
        if f.kind not in FAULT_LABELS or f.kind == "clean":
            raise UnknownFaultType(f.kind)
        rng = np.random.default_rng(seq[f_i])
        i = sidx[f.station]
        l = f.lane - 1
        d = f.day
        code = FAULT_LABELS[f.kind]
        if f.kind == "stuck":
            onset = int(f.params.get("onset_slot", 0))
            q = float(f.params.get("q", 5.0))
            k = float(f.params.get("k", 0.12))
            flow[d, onset:, i, l] = q
            occ[d, onset:, i, l] = k
            present[d, onset:, i, l] = True
            labels[d, onset:, i, l] = code
        elif f.kind == "hanging_on":
            occ[d, :, i, l] = np.clip(0.93 + 0.06 * rng.random(t_n), 0.0, 1.0)
            flow[d, :, i, l] = 0.0
            present[d, :, i, l] = True
            labels[d, :, i, l] = code
        elif f.kind == "hanging_off":
            occ[d, :, i, l] = 0.0
            flow[d, :, i, l] = 0.0
            present[d, :, i, l] = True
            labels[d, :, i, l] = code
        elif f.kind == "chattering":
            burst = rng.random(t_n) < float(f.params.get("p", 0.35))
            factor = 1.0 + rng.exponential(float(f.params.get("scale", 1.5)), t_n) * burst
            flow[d, :, i, l] = np.round(flow[d, :, i, l] * factor)
            labels[d, :, i, l] = code
        elif f.kind == "missing":
            frac = float(f.params.get("frac", 1.0))
            hit = rng.random(t_n) < frac
            present[d, hit, i, l] = False
            flow[d, hit, i, l] = np.nan
            occ[d, hit, i, l] = np.nan
            labels[d, hit, i, l] = code
    return flow, occ, present, labels


def world_grid(world, with_faults=True):
    """Render straight into a DataGrid (plus truth labels), no CSV round trip."""
    cfg = world.config
    flow, occ, present = render_samples(world)
    labels = np.zeros(flow.shape, dtype=np.int8)
    if with_faults and cfg.faults:
        flow, occ, present, labels = inject_faults(flow, occ, present, cfg.faults, cfg.layout, cfg.seed)
    health = np.where(present, HealthFlag.GOOD, HealthFlag.MISSING).astype(np.int8)
    flow = np.where(present, flow, np.nan)
    occ = np.where(present, occ, np.nan)
    grid = DataGrid(
        flow=flow,
        occupancy=occ,
        health=health,
        layout=cfg.layout,
        slot_seconds=cfg.base_interval_s,
        start_epoch=cfg.start_epoch,
    )
    return grid, labels


def fault_suite_schedule(layout, n_days, seed, per_kind=10, kinds=("stuck", "hanging_on", "hanging_off")):
    """Deterministic schedule assigning faults to distinct detector-days."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    detectors = [
        (st, lane) for i, st in enumerate(layout.stations) for lane in range(1, layout.lane_counts[i] + 1)
    ]
    pool = [(st, lane, d) for st, lane in detectors for d in range(n_days)]
    if per_kind * len(kinds) > len(pool):
        raise InfeasibleConfig("fault schedule larger than the detector-day pool")
    order = rng.permutation(len(pool))
    faults = []
    for j, kind in enumerate(kinds):
        for slot in range(per_kind):
            st, lane, d = pool[order[j * per_kind + slot]]
            params = {"q": 5.0, "k": 0.12} if kind == "stuck" else {}
            faults.append(FaultSpec(station=st, lane=lane, day=d, kind=kind, params=params))
    return tuple(faults)


def uniform_layout(n_stations, length_miles, lanes):
    """Evenly spaced synthetic corridor with station ids 1..n."""
    if n_stations < 2:
        raise InfeasibleConfig("need at least two stations")
    pm = np.linspace(0.0, length_miles, n_stations)
    return CorridorLayout(
        stations=tuple(range(1, n_stations + 1)),
        postmiles=tuple(float(x) for x in pm),
        lane_counts=tuple([lanes] * n_stations),
    )


def write_samples_csv(grid_arrays, layout, base_interval_s, start_epoch, path):
    """Write (flow, occ, present) arrays in the ingest sample CSV format.

    Occupancies are rounded to 10 decimals; the samples file is a data
    source, not a round-trip format.
    """
    flow, occ, present = grid_arrays
    d_n, t_n, s_n, l_n = flow.shape
    di, ti, si, li = np.indices((d_n, t_n, s_n, l_n))
    keep = np.asarray(present, dtype=bool)
    stations = np.asarray(layout.stations)
    ts = start_epoch + di[keep] * SECONDS_PER_DAY + ti[keep] * base_interval_s
    df = pd.DataFrame(
        {
            "station": stations[si[keep]],
            "lane": li[keep] + 1,
            "epoch_seconds": ts,
            "flow_count": flow[keep].astype(np.int64),
            "occupancy": np.round(occ[keep], 10),
        }
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("station,lane,epoch_seconds,flow_count,occupancy\n")
        df.to_csv(fh, index=False, header=False)


def write_truth_csv(world, labels, path):
    """Sidecar: station,lane,day,slot,true_speed_mph,fault_label."""
    cfg = world.config
    v = world.true_speeds
    d_n, t_n, s_n, l_n = v.shape
    di, ti, si, li = np.indices((d_n, t_n, s_n, l_n))
    keep = np.isfinite(v)
    stations = np.asarray(cfg.layout.stations)
    categories = [LABEL_NAMES[c] for c in range(len(LABEL_NAMES))]
    df = pd.DataFrame(
        {
            "station": stations[si[keep]],
            "lane": li[keep] + 1,
            "day": di[keep],
            "slot": ti[keep],
            "true_speed_mph": np.round(v[keep], 4),
            "fault_label": pd.Categorical.from_codes(labels[keep], categories=categories),
        }
    )
    df.to_csv(path, index=False)


def sample_list(flow, occ, present, layout, base_interval_s, start_epoch=0):
    """Arrays -> LoopSample sequence (small worlds / contract tests)."""
    from .model import DetectorRef, LoopSample

    out = []
    d_n, t_n, s_n, l_n = flow.shape
    for d in range(d_n):
        for t in range(t_n):
            for i in range(s_n):
                for l in range(l_n):
                    if not present[d, t, i, l]:
                        continue
                    out.append(
                        LoopSample(
                            DetectorRef(layout.stations[i], l + 1),
                            start_epoch + d * SECONDS_PER_DAY + t * base_interval_s,
                            int(round(flow[d, t, i, l])),
                            float(occ[d, t, i, l]),
                        )
                    )
    return out
