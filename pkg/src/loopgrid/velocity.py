"""Single-loop speed estimation.

A single loop reports flow and occupancy only; speed is inferred through
the mean effective vehicle length.  The chain is:

1. estimate the mean effective length per 5-minute slot from light-traffic
   samples (occupancy below its 60th percentile, where traffic can be
   assumed to move at the known free-flow speed), smoothed over the day
   by local regression and extrapolated across slots that are always
   congested;
2. form the preliminary speed  v = N * mu / (k * T)  per slot;
3. stabilize it with an exponential filter whose weight
   w = N / (N + C) adapts to the observed volume, so light-traffic slots
   lean on the running estimate and busy slots on the fresh observation.

Estimates are stratified by station, lane and day-of-week class because
the vehicle mix (hence mean length) differs across all three.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .model import MPH_TO_FPS, LoopgridError, MeanLengthProfile, Provenance, VelocityField
from .statkit import loess_fit, percentile

#: Measured average free-flow speeds (mph) by (total lanes, lane number).
DEFAULT_FREE_FLOW = {
    (2, 1): 71.3,
    (2, 2): 65.8,
    (3, 1): 71.9,
    (3, 2): 69.7,
    (3, 3): 62.7,
    (4, 1): 74.8,
    (4, 2): 71.0,
    (4, 3): 67.4,
    (4, 4): 62.8,
    (5, 1): 76.5,
    (5, 2): 74.0,
    (5, 3): 72.0,
    (5, 4): 69.2,
    (5, 5): 64.5,
}


class OutOfDomain(LoopgridError):
    pass


class InsufficientFreeFlowData(LoopgridError):
    pass


class InconsistentSample(LoopgridError):
    pass


@dataclass(frozen=True)
class FreeFlowTable:
    """Free-flow speed lookup with optional per-station overrides.

    ``values`` maps (total_lanes, lane) -> mph for 2..5 total lanes;
    ``station_overrides`` maps station id or (station id, lane) -> mph and
    wins over the table.
    """

    values: dict = field(default_factory=lambda: dict(DEFAULT_FREE_FLOW))
    station_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        totals = sorted({t for t, _ in self.values})
        for total in totals:
            col = [self.values[(total, lane)] for lane in range(1, total + 1) if (total, lane) in self.values]
            if any(later >= earlier for earlier, later in zip(col[:-1], col[1:])):
                raise LoopgridError(f"free-flow speeds must decrease with lane number ({total} lanes)")

    def lookup(self, lane, total_lanes):
        key = (total_lanes, lane)
        if key not in self.values:
            raise OutOfDomain(f"no free-flow entry for lane {lane} of {total_lanes}")
        return self.values[key]

    def lookup_for(self, station, lane, total_lanes):
        if (station, lane) in self.station_overrides:
            return self.station_overrides[(station, lane)]
        if station in self.station_overrides:
            return self.station_overrides[station]
        return self.lookup(lane, total_lanes)


def lookup_free_flow(lane, total_lanes, table=None):
    """Free-flow speed (mph) for a lane given the station's lane count."""
    table = table or FreeFlowTable()
    return table.lookup(lane, total_lanes)


@dataclass(frozen=True)
class FilterConfig:
    """Adaptive exponential filter parameters.

    ``c`` is the smoothing constant in vehicles per 5-minute slot (scaled
    proportionally for other slot durations); the initial value policy is
    ``free-flow`` or ``first-observation``.
    """

    c: float = 50.0
    init: str = "free-flow"

    def __post_init__(self):
        if self.c <= 0:
            raise LoopgridError("smoothing constant must be positive")
        if self.init not in ("free-flow", "first-observation"):
            raise LoopgridError(f"unknown init policy {self.init!r}")

    def c_for_slot(self, slot_seconds):
        return self.c * slot_seconds / 300.0


def adaptive_weight(n, c):
    """Observation weight w = N / (N + C); zero when nothing was observed."""
    n = np.asarray(n, dtype=np.float64)
    w = n / (n + c)
    return float(w) if w.ndim == 0 else w


def fit_mean_length(
    volumes,
    occupancies,
    v_ff,
    slot_seconds,
    occupancy_percentile=0.6,
    span=0.3,
    degree=1,
    min_points=10,
    max_points=800,
    extrap_gap_slots=3,
    mu_floor_feet=1.0,
    eval_stride=4,
):
    """Fit the mean effective length curve (feet) for one stratum.

    ``volumes``/``occupancies`` are (days, slots) arrays of clean history.
    Light-traffic cells (occupancy below its ``occupancy_percentile``
    quantile, volume positive) contribute points
    v_ff * k * T / N, which under the free-flow assumption estimate the
    mean length; the point cloud is smoothed over slot-of-day and slots
    further than ``extrap_gap_slots`` from any point are flagged
    extrapolated.  Returns (mu, extrapolated, alpha) with alpha the
    occupancy threshold actually used.
    """
    n = np.asarray(volumes, dtype=np.float64)
    k = np.asarray(occupancies, dtype=np.float64)
    if n.ndim != 2 or n.shape != k.shape:
        raise LoopgridError("history must be (days, slots) arrays of equal shape")
    slots = n.shape[1]
    observed = np.isfinite(k)
    if not observed.any():
        raise InsufficientFreeFlowData("stratum has no observed occupancies")
    alpha = percentile(k[observed], occupancy_percentile)
    sel = observed & (k < alpha) & (n > 0)
    days_idx, slot_idx = np.nonzero(sel)
    values = v_ff * MPH_TO_FPS * k[sel] * slot_seconds / n[sel]
    if values.size < max(min_points, degree + 1):
        raise InsufficientFreeFlowData(
            f"only {values.size} light-traffic points (need {max(min_points, degree + 1)})"
        )
    order = np.argsort(slot_idx, kind="stable")
    xs = slot_idx[order].astype(np.float64)
    ys = values[order]
    if xs.size > max_points:
        stride = np.linspace(0, xs.size - 1, max_points).round().astype(int)
        xs, ys = xs[stride], ys[stride]
    # the smoothed curve varies on the span scale, so evaluating a coarse
    # sub-grid and interpolating loses nothing measurable
    eval_x = np.unique(np.append(np.arange(0, slots, max(eval_stride, 1)), slots - 1)).astype(np.float64)
    fit = loess_fit(xs, ys, span=span, degree=degree, eval_x=eval_x)
    fitted = np.interp(np.arange(slots, dtype=np.float64), fit.x, fit.fitted)
    have_point = np.zeros(slots, dtype=bool)
    have_point[np.unique(slot_idx)] = True
    point_slots = np.flatnonzero(have_point)
    gap = np.abs(np.arange(slots)[:, None] - point_slots[None, :]).min(axis=1)
    extrapolated = gap > extrap_gap_slots
    mu = np.clip(fitted, mu_floor_feet, None)
    return mu, extrapolated, alpha


def fit_mean_length_profile(
    grid,
    table=None,
    occupancy_percentile=0.6,
    span=0.3,
    degree=1,
    merge_weekdays=True,
    min_points=10,
    max_points=800,
    extrap_gap_slots=3,
    fallback_mu_feet=20.0,
    eval_stride=4,
):
    """Fit curves for every (station, lane, day-of-week class) stratum.

    A stratum without enough light-traffic points falls back first to a
    pooled fit over all days of the detector, and finally to a constant
    ``fallback_mu_feet`` curve flagged fully extrapolated, so the profile
    is total over the configured stratification.
    """
    table = table or FreeFlowTable()
    volumes = np.asarray(grid.flow)
    occs = np.asarray(grid.occupancy)
    dows = np.array([grid.day_of_week(d) for d in range(grid.n_days)])
    classes = np.where(dows < 5, 0, dows) if merge_weekdays else dows
    curves = {}
    for i, st in enumerate(grid.layout.stations):
        n_lanes = grid.layout.lane_counts[i]
        for lane in range(1, n_lanes + 1):
            v_ff = table.lookup_for(st, lane, n_lanes)
            pooled = None
            for cls in sorted(set(int(c) for c in classes)):
                days = np.flatnonzero(classes == cls)
                try:
                    entry = fit_mean_length(
                        volumes[days, :, i, lane - 1],
                        occs[days, :, i, lane - 1],
                        v_ff,
                        grid.slot_seconds,
                        occupancy_percentile,
                        span,
                        degree,
                        min_points,
                        max_points,
                        extrap_gap_slots,
                        eval_stride=eval_stride,
                    )
                except InsufficientFreeFlowData:
                    if pooled is None:
                        try:
                            pooled = fit_mean_length(
                                volumes[:, :, i, lane - 1],
                                occs[:, :, i, lane - 1],
                                v_ff,
                                grid.slot_seconds,
                                occupancy_percentile,
                                span,
                                degree,
                                min_points,
                                max_points,
                                extrap_gap_slots,
                                eval_stride=eval_stride,
                            )
                        except InsufficientFreeFlowData:
                            pooled = (
                                np.full(grid.slots_per_day, fallback_mu_feet),
                                np.ones(grid.slots_per_day, dtype=bool),
                                1.0,
                            )
                    entry = pooled
                curves[(st, lane, cls)] = entry
    return MeanLengthProfile(curves=curves, slots_per_day=grid.slots_per_day, merge_weekdays=merge_weekdays)


def preliminary_velocity(volume, occupancy, mu_feet, slot_seconds, v_ff):
    """Volume-to-occupancy speed estimate, mph; (value, provenance) pair.

    An empty slot (N = 0) has no speed information and reports the
    free-flow speed with provenance "no-traffic"; occupancy zero with
    positive volume is physically inconsistent and raises.
    """
    if volume == 0:
        return float(v_ff), "no-traffic"
    if occupancy <= 0.0:
        raise InconsistentSample(f"occupancy {occupancy} with volume {volume}")
    fps = volume * mu_feet / (occupancy * slot_seconds)
    return float(fps / MPH_TO_FPS), "preliminary"


def coifman_velocity(volume, occupancy, mu_feet, alpha, v_ff, slot_seconds):
    """Low-occupancy baseline: free-flow below the occupancy threshold.

    At or above the threshold the preliminary estimate is used unchanged.
    """
    if occupancy >= alpha:
        value, _ = preliminary_velocity(volume, occupancy, mu_feet, slot_seconds, v_ff)
        return value, "preliminary"
    return float(v_ff), "free-flow"


def filter_velocity(values, volumes, config=None, v_ff=None, slot_seconds=300):
    """Adaptive exponential smoothing of one day's speed stream.

    Slots with zero volume carry the previous value forward (weight 0).
    The stream must be one day, ordered by slot; the filter state does
    not cross day boundaries.
    """
    config = config or FilterConfig()
    v = np.asarray(values, dtype=np.float64)
    n = np.asarray(volumes, dtype=np.float64)
    if v.shape != n.shape or v.ndim != 1:
        raise LoopgridError("values and volumes must be 1-D and equally long")
    c = config.c_for_slot(slot_seconds)
    if config.init == "free-flow":
        if v_ff is None:
            raise LoopgridError("free-flow init needs v_ff")
        prev = float(v_ff)
    else:
        nonzero = np.flatnonzero(n > 0)
        prev = float(v[nonzero[0]]) if nonzero.size else (float(v_ff) if v_ff is not None else float(v[0]))
    out = np.empty_like(v)
    for t in range(v.size):
        w = n[t] / (n[t] + c)
        prev = w * v[t] + (1.0 - w) * prev
        out[t] = prev
    return out


def estimate_field(grid, profile, table=None, config=None, estimator="filtered", imputed_mask=None):
    """Run the full speed chain over a complete grid -> VelocityField.

    ``estimator`` selects filtered (default), preliminary (unfiltered) or
    coifman (threshold baseline).  ``imputed_mask`` marks cells whose
    inputs were imputed so the output provenance can say so.  Cells with
    zero volume report free-flow; the rare inconsistent cell (volume > 0,
    occupancy 0) also falls back to free-flow here, having already been
    the health stage's responsibility.
    """
    if estimator not in ("filtered", "preliminary", "coifman"):
        raise LoopgridError(f"unknown estimator {estimator!r}")
    table = table or FreeFlowTable()
    config = config or FilterConfig()
    d_n, t_n, s_n, l_n = grid.flow.shape
    volumes = np.asarray(grid.flow)
    occs = np.asarray(grid.occupancy)
    lane_mask = grid.lane_mask
    v_ff = np.full((s_n, l_n), np.nan)
    for i, st in enumerate(grid.layout.stations):
        for lane in range(1, grid.layout.lane_counts[i] + 1):
            v_ff[i, lane - 1] = table.lookup_for(st, lane, grid.layout.lane_counts[i])
    c = config.c_for_slot(grid.slot_seconds)

    speed = np.full(grid.flow.shape, np.nan)
    prov = np.full(grid.flow.shape, Provenance.FILTERED, dtype=np.int8)
    classes_cache = {}
    for d in range(d_n):
        cls_key = profile.dow_class(grid.day_of_week(d))
        if cls_key not in classes_cache:
            mu_cube = np.full((t_n, s_n, l_n), np.nan)
            alpha_cube = np.full((s_n, l_n), np.nan)
            for i, st in enumerate(grid.layout.stations):
                for lane in range(1, grid.layout.lane_counts[i] + 1):
                    mu, _, alpha = profile.lookup(st, lane, grid.day_of_week(d))
                    mu_cube[:, i, lane - 1] = mu
                    alpha_cube[i, lane - 1] = alpha
            classes_cache[cls_key] = (mu_cube, alpha_cube)
        mu_cube, alpha_cube = classes_cache[cls_key]

        n_day = volumes[d]
        k_day = occs[d]
        with np.errstate(divide="ignore", invalid="ignore"):
            prelim = n_day * mu_cube / (k_day * grid.slot_seconds) / MPH_TO_FPS
        prelim = np.where((n_day > 0) & (k_day > 0), prelim, v_ff[None, :, :])
        if estimator == "coifman":
            day_speed = np.where(k_day >= alpha_cube[None, :, :], prelim, v_ff[None, :, :])
            prov[d] = Provenance.PRELIMINARY
        elif estimator == "preliminary":
            day_speed = prelim
            prov[d] = Provenance.PRELIMINARY
        else:
            day_speed = np.empty_like(prelim)
            prev = np.array(v_ff)
            for t in range(t_n):
                w = n_day[t] / (n_day[t] + c)
                prev = np.where(lane_mask, w * prelim[t] + (1.0 - w) * prev, np.nan)
                day_speed[t] = prev
        speed[d] = day_speed
    if imputed_mask is not None:
        prov[np.asarray(imputed_mask, dtype=bool)] = Provenance.IMPUTED
    return VelocityField(
        speed=speed,
        provenance=prov,
        layout=grid.layout,
        slot_seconds=grid.slot_seconds,
        start_epoch=grid.start_epoch,
    )


class VelocityEstimator(BaseEstimator):
    """Estimator wrapper: fit learns mean-length curves, transform emits speeds."""

    def __init__(
        self,
        occupancy_percentile=0.6,
        span=0.3,
        degree=1,
        c=50.0,
        estimator="filtered",
        merge_weekdays=True,
        min_points=10,
        max_points=800,
        extrap_gap_slots=3,
        fallback_mu_feet=20.0,
        free_flow_table=None,
    ):
        self.occupancy_percentile = occupancy_percentile
        self.span = span
        self.degree = degree
        self.c = c
        self.estimator = estimator
        self.merge_weekdays = merge_weekdays
        self.min_points = min_points
        self.max_points = max_points
        self.extrap_gap_slots = extrap_gap_slots
        self.fallback_mu_feet = fallback_mu_feet
        self.free_flow_table = free_flow_table

    def fit(self, grid, y=None):
        self.profile_ = fit_mean_length_profile(
            grid,
            self.free_flow_table,
            self.occupancy_percentile,
            self.span,
            self.degree,
            self.merge_weekdays,
            self.min_points,
            self.max_points,
            self.extrap_gap_slots,
            self.fallback_mu_feet,
        )
        return self

    def transform(self, grid, imputed_mask=None):
        if not hasattr(self, "profile_"):
            raise LoopgridError("velocity estimator is not fitted")
        return estimate_field(
            grid,
            self.profile_,
            self.free_flow_table,
            FilterConfig(c=self.c),
            self.estimator,
            imputed_mask,
        )

    def fit_transform(self, grid, y=None, imputed_mask=None):
        return self.fit(grid).transform(grid, imputed_mask)


def write_profile_csv(profile, path):
    rows = []
    for (st, lane, cls) in sorted(profile.curves):
        mu, extrap, alpha = profile.curves[(st, lane, cls)]
        for t in range(profile.slots_per_day):
            rows.append((st, lane, cls, t, mu[t], int(extrap[t]), alpha))
    df = pd.DataFrame(rows, columns=["station", "lane", "dow", "slot", "mu_feet", "extrapolated", "alpha"])
    df.to_csv(path, index=False)


def read_profile_csv(path, merge_weekdays=True):
    df = pd.read_csv(path)
    slots = int(df["slot"].max()) + 1
    curves = {}
    for (st, lane, cls), sub in df.groupby(["station", "lane", "dow"], sort=True):
        sub = sub.sort_values("slot")
        curves[(int(st), int(lane), int(cls))] = (
            sub["mu_feet"].to_numpy(),
            sub["extrapolated"].to_numpy().astype(bool),
            float(sub["alpha"].iloc[0]),
        )
    return MeanLengthProfile(curves=curves, slots_per_day=slots, merge_weekdays=merge_weekdays)


def write_field_csv(vfield, path):
    d, t, s, l = vfield.speed.shape
    di, ti, si, li = np.indices((d, t, s, l))
    keep = np.isfinite(vfield.speed)
    stations = np.asarray(vfield.layout.stations)
    categories = [p.name.lower() for p in Provenance]
    prov = np.asarray(vfield.provenance)[keep]
    df = pd.DataFrame(
        {
            "day": di[keep],
            "slot": ti[keep],
            "station": stations[si[keep]],
            "lane": li[keep] + 1,
            "mph": np.round(np.asarray(vfield.speed)[keep], 6),
            "provenance": pd.Categorical.from_codes(prov, categories=categories),
        }
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# slot_seconds={vfield.slot_seconds} start_epoch={vfield.start_epoch}\n")
        df.to_csv(fh, index=False)


def read_field_csv(path, layout):
    with open(path, "r", encoding="utf-8") as fh:
        meta = fh.readline()
    slot_seconds, start_epoch = 300, 0
    if meta.startswith("#"):
        for token in meta[1:].split():
            k, _, v = token.partition("=")
            if k == "slot_seconds":
                slot_seconds = int(v)
            elif k == "start_epoch":
                start_epoch = int(v)
    df = pd.read_csv(
        path,
        comment="#",
        dtype={"day": np.int32, "slot": np.int32, "station": np.int64, "lane": np.int32, "mph": np.float64},
    )
    n_days = int(df["day"].max()) + 1
    slots = 86400 // slot_seconds
    shape = (n_days, slots, layout.n_stations, layout.max_lanes)
    speed = np.full(shape, np.nan)
    prov = np.zeros(shape, dtype=np.int8)
    sidx = layout.station_index
    si = df["station"].map(sidx).to_numpy(dtype=np.int64)
    names = {p.name.lower(): int(p) for p in Provenance}
    speed[df["day"], df["slot"], si, df["lane"] - 1] = df["mph"]
    prov[df["day"], df["slot"], si, df["lane"] - 1] = df["provenance"].map(names).to_numpy(dtype=np.int8)
    return VelocityField(speed=speed, provenance=prov, layout=layout, slot_seconds=slot_seconds, start_epoch=start_epoch)
