"""Corridor travel times and their prediction.

Realized travel times come from walking a point vehicle through the
velocity field: within segment i at a given slot the vehicle moves at the
arithmetic mean of the two bounding stations' speeds, piecewise constant
in time.  Because position is then a piecewise-linear function of time,
the walk is computed exactly by inverting each segment's cumulative
distance integral, which also makes it cheap to evaluate for whole
vectors of departure times at once.  Freezing the field at the departure
instant reduces the walk to the snapshot formula
sum(2 u_i / (v_i + v_{i+1})), the proxy the predictors feed on.

Predictors (all fit on past days and applied to a new day e at current
time tau, horizon delta):

* historical mean of realized times at the target slot;
* current status: the snapshot proxy itself;
* varying-coefficient regression of realized times on the snapshot, with
  Gaussian kernel weights in departure time imposing smoothness;
* truncated-eigenvalue conditional Gaussian over whole-day trajectories;
* nearest-neighbor days under a windowed trajectory distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .model import LoopgridError, TravelTimeSeries
from .statkit import (
    DegenerateDesign,
    SingularConditioningBlock,
    TruncatedGaussianModel,
    conditional_expectation,
    fit_truncated_gaussian,
    gaussian_weight,
    wls_fit,
)

METHODS = ("historical", "current", "regression", "pca", "nn")


class FieldExhausted(LoopgridError):
    pass


class MissingVelocity(LoopgridError):
    pass


class EmptyDaySet(LoopgridError):
    pass


class OutsideGrid(LoopgridError):
    pass


class EmptyWindow(LoopgridError):
    pass


class InsufficientHistory(LoopgridError):
    pass


class NoCompletedTrips(LoopgridError):
    pass


def _station_range(layout, origin, destination):
    idx = layout.station_index
    if origin not in idx or destination not in idx:
        raise LoopgridError(f"unknown station in ({origin}, {destination})")
    a, b = idx[origin], idx[destination]
    if a >= b:
        raise LoopgridError("origin must precede destination along the corridor")
    return a, b


def travel_time_profile(day_speeds, layout, origin, destination, depart_seconds):
    """Walk many departures through one day's station-speed field at once.

    ``day_speeds`` is (slots, stations) mph; ``depart_seconds`` is a
    vector of departure times in seconds from midnight.  Returns minutes
    with NaN where the trip runs past the end of the day's field.  The
    per-segment speed is the mean of the bounding stations' speeds in the
    slot the vehicle currently occupies.
    """
    v = np.asarray(day_speeds, dtype=np.float64)
    t0 = np.asarray(depart_seconds, dtype=np.float64)
    a, b = _station_range(layout, origin, destination)
    slots, n_stations = v.shape
    if n_stations != layout.n_stations:
        raise LoopgridError("speed field disagrees with layout")
    slot_s = 86400.0 / slots
    knots = np.arange(slots + 1) * slot_s
    u = layout.segment_lengths
    arrive = t0.copy()
    out_of_field = ~np.isfinite(arrive) | (arrive < 0) | (arrive > knots[-1])
    for i in range(a, b):
        seg_v = 0.5 * (v[:, i] + v[:, i + 1])
        if np.any(~np.isfinite(seg_v)) or np.any(seg_v <= 0):
            raise MissingVelocity(f"undefined speed on segment {i}")
        # cumulative miles covered by a traveler in this segment since midnight
        dist_knots = np.concatenate([[0.0], np.cumsum(seg_v * (slot_s / 3600.0))])
        d0 = np.interp(arrive, knots, dist_knots)
        target = d0 + u[i]
        out_of_field |= target > dist_knots[-1] + 1e-12
        arrive = np.interp(target, dist_knots, knots)
    minutes = (arrive - t0) / 60.0
    return np.where(out_of_field, np.nan, minutes)


def travel_time_walk(day_speeds, layout, origin, destination, depart_seconds):
    """Single-departure walk; raises FieldExhausted instead of returning NaN."""
    res = travel_time_profile(day_speeds, layout, origin, destination, np.asarray([depart_seconds], dtype=np.float64))
    if not np.isfinite(res[0]):
        raise FieldExhausted(f"trip from {origin} at t={depart_seconds}s runs past the field")
    return float(res[0])


def current_status(day_speeds, layout, origin, destination, slot):
    """Snapshot travel time in minutes from the slot-``slot`` speeds only."""
    v = np.asarray(day_speeds, dtype=np.float64)
    a, b = _station_range(layout, origin, destination)
    vs = v[slot, a : b + 1]
    if np.any(~np.isfinite(vs)) or np.any(vs <= 0):
        raise MissingVelocity(f"undefined speed at slot {slot}")
    u = layout.segment_lengths[a:b]
    hours = float((2.0 * u / (vs[:-1] + vs[1:])).sum())
    return hours * 60.0


def compute_series(speeds, layout, origin, destination, depart_slots=None, slot_seconds=None, start_epoch=0):
    """Realized and snapshot travel times for every day and departure slot.

    ``speeds`` is (days, slots, stations) mph.  Departures whose walk
    leaves the field become NaN rather than raising, since trailing
    departures of a day legitimately have no realized time.
    """
    v = np.asarray(speeds, dtype=np.float64)
    days, slots, _ = v.shape
    if slot_seconds is None:
        slot_seconds = 86400 // slots
    if depart_slots is None:
        depart_slots = np.arange(slots)
    depart_slots = np.asarray(depart_slots, dtype=np.int64)
    depart_s = depart_slots * float(slot_seconds)
    realized = np.empty((days, depart_slots.size))
    snapshot = np.empty((days, depart_slots.size))
    a, b = _station_range(layout, origin, destination)
    u = layout.segment_lengths[a:b]
    for d in range(days):
        realized[d] = travel_time_profile(v[d], layout, origin, destination, depart_s)
        vs = v[d][:, a : b + 1]
        hours = (2.0 * u[None, :] / (vs[:, :-1] + vs[:, 1:])).sum(axis=1)
        snapshot[d] = hours[depart_slots] * 60.0
    return TravelTimeSeries(
        origin=origin,
        destination=destination,
        depart_slots=depart_slots,
        realized=realized,
        snapshot=snapshot,
        slot_seconds=slot_seconds,
        start_epoch=start_epoch,
    )


def historical_mean(series, slot, days=None):
    """Across-days mean realized travel time at one departure slot."""
    j = _slot_position(series, slot)
    days = np.arange(series.n_days) if days is None else np.asarray(days, dtype=np.int64)
    if days.size == 0:
        raise EmptyDaySet("no days to average")
    vals = series.realized[days, j]
    if np.any(~np.isfinite(vals)):
        raise EmptyDaySet(f"realized travel time undefined at slot {slot} for some days")
    return float(vals.mean())


def _slot_position(series, slot):
    pos = np.searchsorted(series.depart_slots, slot)
    if pos >= series.depart_slots.size or series.depart_slots[pos] != slot:
        raise OutsideGrid(f"slot {slot} not in the series departure grid")
    return int(pos)


@dataclass(frozen=True)
class CoefficientGrid:
    """Fitted varying coefficients on (departure slot, horizon) nodes."""

    tau_slots: np.ndarray
    deltas_min: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    n_eff: np.ndarray
    sigma_minutes: float
    slot_seconds: int

    def __post_init__(self):
        tau = np.asarray(self.tau_slots, dtype=np.int64)
        deltas = np.asarray(self.deltas_min, dtype=np.float64)
        for name in ("alpha", "beta", "n_eff"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (tau.size, deltas.size):
                raise LoopgridError(f"{name} grid has wrong shape")
            if name != "n_eff" and not np.all(np.isfinite(arr)):
                raise LoopgridError(f"{name} grid contains non-finite values")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tau_slots", tau)
        object.__setattr__(self, "deltas_min", deltas)

    def lookup(self, tau_slot, delta_min):
        """Nearest tau node, exact delta; OutsideGrid beyond the node range."""
        deltas = self.deltas_min
        dpos = np.flatnonzero(np.isclose(deltas, delta_min))
        if dpos.size == 0:
            raise OutsideGrid(f"horizon {delta_min} min not fitted ({deltas})")
        tau = self.tau_slots
        spacing = np.diff(tau).max() if tau.size > 1 else 1
        if tau_slot < tau.min() - spacing / 2 or tau_slot > tau.max() + spacing / 2:
            raise OutsideGrid(f"slot {tau_slot} outside fitted range {tau.min()}..{tau.max()}")
        tpos = int(np.argmin(np.abs(tau - tau_slot)))
        return tpos, int(dpos[0])


def fit_varying_coefficients(series, tau_slots, deltas_min, sigma_minutes=10.0, days=None):
    """Kernel-weighted least squares of realized times on the snapshot proxy.

    For each node (t, delta) the responses are every day's realized time
    at every slot s, weighted by a Gaussian kernel in t + delta - s
    (minutes); the regressor is that day's snapshot at t.  The kernel
    makes the coefficient surfaces smooth in departure time.
    """
    if sigma_minutes <= 0:
        raise LoopgridError("kernel bandwidth must be positive")
    days = np.arange(series.n_days) if days is None else np.asarray(days, dtype=np.int64)
    if days.size < 2:
        raise LoopgridError("need at least two days to fit")
    tau_slots = np.asarray(tau_slots, dtype=np.int64)
    deltas = np.asarray(deltas_min, dtype=np.float64)
    slot_min = series.slot_seconds / 60.0
    s_minutes = series.depart_slots * slot_min
    realized = series.realized[days]
    snapshot = series.snapshot[days]
    defined = np.isfinite(realized)
    alpha = np.zeros((tau_slots.size, deltas.size))
    beta = np.zeros_like(alpha)
    n_eff = np.zeros_like(alpha)
    for ti, t in enumerate(tau_slots):
        j = _slot_position(series, t)
        x_day = snapshot[:, j]
        if np.any(~np.isfinite(x_day)):
            raise DegenerateDesign(f"snapshot undefined at slot {t} for some training day")
        for di, delta in enumerate(deltas):
            target = t * slot_min + delta
            w_slot = gaussian_weight(target - s_minutes, sigma_minutes)
            w = np.broadcast_to(w_slot, realized.shape) * defined
            x = np.broadcast_to(x_day[:, None], realized.shape)
            keep = w > 0
            y = np.where(defined, realized, 0.0)
            a, b = wls_fit(x[keep], y[keep], w[keep])
            alpha[ti, di] = a
            beta[ti, di] = b
            sw = w[keep].sum()
            n_eff[ti, di] = sw**2 / (w[keep] ** 2).sum()
    return CoefficientGrid(
        tau_slots=tau_slots,
        deltas_min=deltas,
        alpha=alpha,
        beta=beta,
        n_eff=n_eff,
        sigma_minutes=sigma_minutes,
        slot_seconds=series.slot_seconds,
    )


def predict_regression(grid, tau_slot, delta_min, tstar_value):
    """Affine prediction alpha + beta * T* at the nearest fitted node."""
    ti, di = grid.lookup(tau_slot, delta_min)
    return float(grid.alpha[ti, di] + grid.beta[ti, di] * tstar_value)


def build_trajectory_matrix(series, days=None):
    """Stack [realized | snapshot] day trajectories over slots where all are defined.

    Returns (matrix, kept_slot_positions); the trajectory coordinates are
    realized at kept slots followed by snapshot at kept slots.
    """
    days = np.arange(series.n_days) if days is None else np.asarray(days, dtype=np.int64)
    defined = np.isfinite(series.realized[days]).all(axis=0) & np.isfinite(series.snapshot[days]).all(axis=0)
    kept = np.flatnonzero(defined)
    if kept.size == 0:
        raise LoopgridError("no slot has complete trajectories across the chosen days")
    x = np.concatenate([series.realized[days][:, kept], series.snapshot[days][:, kept]], axis=1)
    return x, kept


def fit_pca_model(series, rank=4, ridge=None, days=None):
    """Truncated-eigenvalue Gaussian over concatenated (T, T*) trajectories."""
    x, kept = build_trajectory_matrix(series, days)
    rank = min(rank, x.shape[1])
    model = fit_truncated_gaussian(x, rank, ridge)
    return model, kept


def latest_completed_slot(series, day, tau_slot):
    """Largest departure slot whose trip on ``day`` completes by tau.

    Returns None when no trip has finished yet (early morning).
    """
    slot_min = series.slot_seconds / 60.0
    tau_min = tau_slot * slot_min
    depart_min = series.depart_slots * slot_min
    realized = series.realized[day]
    done = np.isfinite(realized) & (depart_min + realized <= tau_min)
    idx = np.flatnonzero(done)
    return int(series.depart_slots[idx.max()]) if idx.size else None


def predict_pca(model, kept_slots, series, day, tau_slot, delta_min):
    """Conditional-mean prediction from the trajectory Gaussian.

    Observes the new day's snapshot up to tau and its realized times up to
    the latest completed trip; with no completed trip yet, conditions on
    the snapshot block alone.  ``series`` supplies the new day's data;
    training must have excluded it.
    """
    slot_min = series.slot_seconds / 60.0
    target_slot = tau_slot + int(round(delta_min / slot_min))
    kept = np.asarray(kept_slots)
    slot_values = series.depart_slots[kept]
    tpos = np.flatnonzero(slot_values == target_slot)
    if tpos.size == 0:
        raise OutsideGrid(f"target slot {target_slot} not covered by the fitted trajectories")
    target_index = int(tpos[0])
    n = kept.size
    obs_idx = []
    obs_val = []
    t_prime = latest_completed_slot(series, day, tau_slot)
    realized = series.realized[day]
    snapshot = series.snapshot[day]
    for pos, slot in enumerate(slot_values):
        if t_prime is not None and slot <= t_prime and np.isfinite(realized[kept[pos]]) and pos != target_index:
            obs_idx.append(pos)
            obs_val.append(realized[kept[pos]])
        if slot <= tau_slot and np.isfinite(snapshot[kept[pos]]):
            obs_idx.append(n + pos)
            obs_val.append(snapshot[kept[pos]])
    cond = conditional_expectation(model, np.asarray(obs_idx, dtype=np.intp), np.asarray(obs_val))
    unobs = np.setdiff1d(np.arange(model.dim), np.asarray(obs_idx, dtype=np.intp))
    out_pos = np.flatnonzero(unobs == target_index)
    if out_pos.size == 0:
        # target was itself observed (completed trip); return the observation
        return float(realized[kept[target_index]])
    return float(cond[out_pos[0]])


def nn_distance(series, day_e, day_d, tau_slot, window_minutes=20.0, metric="m2", speeds=None, station_range=None):
    """Distance between two days over the window (tau - w, tau].

    ``m2`` is the Euclidean distance of snapshot trajectories; ``m1`` sums
    absolute station-speed differences over the corridor restriction and
    the window (requires ``speeds`` (days, slots, stations) and
    ``station_range`` (a, b) inclusive indices).
    """
    slot_min = series.slot_seconds / 60.0
    tau_min = tau_slot * slot_min
    depart_min = series.depart_slots * slot_min
    in_window = (depart_min > tau_min - window_minutes) & (depart_min <= tau_min)
    if metric == "m2":
        xe = series.snapshot[day_e]
        xd = series.snapshot[day_d]
        ok = in_window & np.isfinite(xe) & np.isfinite(xd)
        if not ok.any():
            raise EmptyWindow(f"no defined snapshot slots in the {window_minutes}-minute window")
        diff = xe[ok] - xd[ok]
        return float(np.sqrt((diff**2).sum()))
    if metric == "m1":
        if speeds is None or station_range is None:
            raise LoopgridError("m1 needs the station-speed field and a station range")
        a, b = station_range
        slots = np.asarray(series.depart_slots)[in_window]
        if slots.size == 0:
            raise EmptyWindow(f"no slots in the {window_minutes}-minute window")
        ve = speeds[day_e][slots, a : b + 1]
        vd = speeds[day_d][slots, a : b + 1]
        return float(np.abs(ve - vd).sum())
    raise LoopgridError(f"unknown metric {metric!r}")


def predict_nn(series, day_e, tau_slot, delta_min, history_days, k=2, window_minutes=20.0, metric="m2", speeds=None, station_range=None):
    """Mean realized time of the k nearest history days at the target slot.

    Ties in distance resolve to the smaller day index.
    """
    slot_min = series.slot_seconds / 60.0
    target_slot = tau_slot + int(round(delta_min / slot_min))
    j = _slot_position(series, target_slot)
    usable = []
    for d in history_days:
        if not np.isfinite(series.realized[d, j]):
            continue
        dist = nn_distance(series, day_e, d, tau_slot, window_minutes, metric, speeds, station_range)
        usable.append((dist, d))
    if len(usable) < k:
        raise InsufficientHistory(f"only {len(usable)} usable history days, need {k}")
    usable.sort(key=lambda pair: (pair[0], pair[1]))
    neighbors = [series.realized[d, j] for _, d in usable[:k]]
    return float(np.mean(neighbors))


def compose_route(leg_fn, waypoints, depart_minutes):
    """Chain predictions leg by leg: each leg departs when the previous ends.

    ``leg_fn(origin, destination, depart_minutes) -> minutes``; any error
    from a leg (e.g. OutsideGrid at the shifted departure) propagates.
    """
    if len(waypoints) < 2:
        raise LoopgridError("need at least origin and destination")
    t = float(depart_minutes)
    total = 0.0
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        if a == b:
            continue
        leg = float(leg_fn(a, b, t))
        total += leg
        t += leg
    return total


def arrival_series(series):
    """Travel time as a function of arrival time, per day.

    S_d(t) is the trip time of the trip arriving at t: the latest
    departure s* with s* + T_d(s*) <= t, linearly interpolated between
    bracketing departures.  Slots before the first arrival (or where the
    realized series is undefined) are NaN.
    """
    slot_min = series.slot_seconds / 60.0
    depart = series.depart_slots * slot_min
    out = np.full_like(series.realized, np.nan)
    for d in range(series.n_days):
        T = series.realized[d]
        ok = np.isfinite(T)
        if ok.sum() < 2:
            continue
        dep = depart[ok]
        tt = T[ok]
        arr = dep + tt
        # guard against non-monotone arrivals from rough estimated fields
        arr = np.maximum.accumulate(arr)
        for j, t in enumerate(depart):
            pos = np.searchsorted(arr, t, side="right") - 1
            if pos < 0:
                continue
            if pos >= arr.size - 1:
                if arr[-1] <= t <= arr[-1] + 1e-9:
                    out[d, j] = tt[-1]
                continue
            span = arr[pos + 1] - arr[pos]
            frac = 0.0 if span <= 0 else (t - arr[pos]) / span
            out[d, j] = tt[pos] + frac * (tt[pos + 1] - tt[pos])
    return out


def fit_arrival_coefficients(series, tau_slots, deltas_min, sigma_minutes=10.0, days=None):
    """Varying coefficients with arrival-indexed responses S_d(s)."""
    s_matrix = arrival_series(series)
    shifted = TravelTimeSeries(
        origin=series.origin,
        destination=series.destination,
        depart_slots=np.asarray(series.depart_slots),
        realized=np.where(np.isfinite(s_matrix) & (s_matrix > 0), s_matrix, np.nan),
        snapshot=np.asarray(series.snapshot),
        slot_seconds=series.slot_seconds,
        start_epoch=series.start_epoch,
    )
    return fit_varying_coefficients(shifted, tau_slots, deltas_min, sigma_minutes, days)


def predict_arrival(grid, tau_slot, delta_min, tstar_value):
    """Arrival-mode prediction: trip minutes and the implied departure.

    The fitted responses are arrival-indexed, so the affine evaluation
    answers "how long is the trip arriving at tau + delta"; the implied
    departure is that arrival minus the prediction.
    """
    minutes = predict_regression(grid, tau_slot, delta_min, tstar_value)
    arrival_min = tau_slot * (grid.slot_seconds / 60.0) + delta_min
    return minutes, arrival_min - minutes


def evaluate_loo(series, methods, tau_slots, deltas_min, sigma_minutes=10.0, pca_rank=4, pca_ridge=None, nn_k=2, nn_window=20.0, nn_metric="m2", speeds=None, station_range=None, extra_methods=None):
    """Leave-one-day-out RMSE per (method, tau, delta).

    Every fold refits all requested models without the held-out day, then
    predicts that day at each (tau, delta) node and scores against its
    realized travel time.  Rows: dicts with method/tau_slot/delta_min/
    rmse_min/n.
    """
    methods = list(methods)
    extra_methods = extra_methods or {}
    for m in methods:
        if m not in METHODS and m not in extra_methods:
            raise LoopgridError(f"unknown method {m!r}")
    tau_slots = np.asarray(tau_slots, dtype=np.int64)
    deltas = np.asarray(deltas_min, dtype=np.float64)
    slot_min = series.slot_seconds / 60.0
    errors = {(m, int(t), float(dm)): [] for m in methods for t in tau_slots for dm in deltas}
    all_days = np.arange(series.n_days)
    for e in all_days:
        train = np.setdiff1d(all_days, [e])
        coeffs = None
        if "regression" in methods:
            coeffs = fit_varying_coefficients(series, tau_slots, deltas, sigma_minutes, train)
        pca = None
        if "pca" in methods:
            pca = fit_pca_model(series, pca_rank, pca_ridge, train)
        for t in tau_slots:
            for dm in deltas:
                target_slot = t + int(round(dm / slot_min))
                try:
                    j = _slot_position(series, target_slot)
                except OutsideGrid:
                    continue
                truth = series.realized[e, j]
                if not np.isfinite(truth):
                    continue
                for m in methods:
                    try:
                        if m == "historical":
                            pred = historical_mean(series, target_slot, train)
                        elif m == "current":
                            jt = _slot_position(series, int(t))
                            pred = float(series.snapshot[e, jt])
                        elif m == "regression":
                            jt = _slot_position(series, int(t))
                            pred = predict_regression(coeffs, int(t), float(dm), series.snapshot[e, jt])
                        elif m == "pca":
                            model, kept = pca
                            pred = predict_pca(model, kept, series, e, int(t), float(dm))
                        elif m == "nn":
                            pred = predict_nn(
                                series, e, int(t), float(dm), train, nn_k, nn_window, nn_metric, speeds, station_range
                            )
                        else:
                            pred = extra_methods[m](series, train, e, int(t), float(dm))
                    except (EmptyDaySet, EmptyWindow, InsufficientHistory, SingularConditioningBlock):
                        continue
                    errors[(m, int(t), float(dm))].append((pred - truth) ** 2)
    rows = []
    for m in methods:
        for t in tau_slots:
            for dm in deltas:
                sq = errors[(m, int(t), float(dm))]
                if sq:
                    rows.append(
                        {
                            "method": m,
                            "tau_slot": int(t),
                            "delta_min": float(dm),
                            "rmse_min": float(np.sqrt(np.mean(sq))),
                            "n": len(sq),
                        }
                    )
    return rows


class HistoricalMeanPredictor(BaseEstimator):
    """Across-days mean realized time at the target slot."""

    def fit(self, series, days=None):
        self.series_ = series
        self.days_ = np.arange(series.n_days) if days is None else np.asarray(days)
        return self

    def predict(self, tau_slot, delta_min, tstar_value=None):
        slot_min = self.series_.slot_seconds / 60.0
        target = int(tau_slot + round(delta_min / slot_min))
        return historical_mean(self.series_, target, self.days_)


class CurrentStatusPredictor(BaseEstimator):
    """The snapshot proxy itself, ignoring the horizon."""

    def fit(self, series, days=None):
        return self

    def predict(self, tau_slot, delta_min, tstar_value):
        return float(tstar_value)


class RegressionPredictor(BaseEstimator):
    """Varying-coefficient affine prediction from the snapshot."""

    def __init__(self, sigma_minutes=10.0, tau_slots=None, deltas_min=(0.0, 60.0)):
        self.sigma_minutes = sigma_minutes
        self.tau_slots = tau_slots
        self.deltas_min = deltas_min

    def fit(self, series, days=None):
        tau = self.tau_slots if self.tau_slots is not None else series.depart_slots
        self.grid_ = fit_varying_coefficients(series, tau, self.deltas_min, self.sigma_minutes, days)
        return self

    def predict(self, tau_slot, delta_min, tstar_value):
        return predict_regression(self.grid_, tau_slot, delta_min, tstar_value)


class PcaPredictor(BaseEstimator):
    """Conditional Gaussian over trajectory vectors with truncated covariance."""

    def __init__(self, rank=4, ridge=None):
        self.rank = rank
        self.ridge = ridge

    def fit(self, series, days=None):
        self.series_ = series
        self.model_, self.kept_ = fit_pca_model(series, self.rank, self.ridge, days)
        return self

    def predict(self, day, tau_slot, delta_min):
        return predict_pca(self.model_, self.kept_, self.series_, day, tau_slot, delta_min)


class NearestNeighborPredictor(BaseEstimator):
    """k-nearest past days under the windowed trajectory distance."""

    def __init__(self, k=2, window_minutes=20.0, metric="m2"):
        self.k = k
        self.window_minutes = window_minutes
        self.metric = metric

    def fit(self, series, days=None, speeds=None, station_range=None):
        self.series_ = series
        self.days_ = np.arange(series.n_days) if days is None else np.asarray(days)
        self.speeds_ = speeds
        self.station_range_ = station_range
        return self

    def predict(self, day, tau_slot, delta_min):
        return predict_nn(
            self.series_,
            day,
            tau_slot,
            delta_min,
            self.days_,
            self.k,
            self.window_minutes,
            self.metric,
            self.speeds_,
            self.station_range_,
        )


def write_series_csv(series, path):
    rows = []
    for d in range(series.n_days):
        for j, slot in enumerate(series.depart_slots):
            rows.append(
                (d, int(slot), series.realized[d, j], series.snapshot[d, j])
            )
    df = pd.DataFrame(rows, columns=["day", "slot", "t_minutes", "tstar_minutes"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(
            f"# origin={series.origin} destination={series.destination} "
            f"slot_seconds={series.slot_seconds} start_epoch={series.start_epoch}\n"
        )
        df.to_csv(fh, index=False)


def read_series_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        meta = fh.readline()
    fields = {}
    if meta.startswith("#"):
        for token in meta[1:].split():
            k, _, v = token.partition("=")
            fields[k] = int(v)
    df = pd.read_csv(path, comment="#")
    slots = np.sort(df["slot"].unique())
    n_days = int(df["day"].max()) + 1
    realized = np.full((n_days, slots.size), np.nan)
    snapshot = np.full((n_days, slots.size), np.nan)
    jj = np.searchsorted(slots, df["slot"].to_numpy())
    realized[df["day"], jj] = df["t_minutes"]
    snapshot[df["day"], jj] = df["tstar_minutes"]
    return TravelTimeSeries(
        origin=fields.get("origin", 0),
        destination=fields.get("destination", 0),
        depart_slots=slots,
        realized=realized,
        snapshot=snapshot,
        slot_seconds=fields.get("slot_seconds", 300),
        start_epoch=fields.get("start_epoch", 0),
    )


def write_coefficients_csv(grid, path):
    rows = []
    for ti, t in enumerate(grid.tau_slots):
        for di, dm in enumerate(grid.deltas_min):
            rows.append((int(t), float(dm), grid.alpha[ti, di], grid.beta[ti, di], grid.n_eff[ti, di]))
    df = pd.DataFrame(rows, columns=["t_slot", "delta_min", "alpha", "beta", "n_eff"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# sigma_minutes={grid.sigma_minutes!r} slot_seconds={grid.slot_seconds}\n")
        df.to_csv(fh, index=False)


def read_coefficients_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        meta = fh.readline()
    sigma, slot_seconds = 10.0, 300
    if meta.startswith("#"):
        for token in meta[1:].split():
            k, _, v = token.partition("=")
            if k == "sigma_minutes":
                sigma = float(v)
            elif k == "slot_seconds":
                slot_seconds = int(v)
    df = pd.read_csv(path, comment="#")
    tau = np.sort(df["t_slot"].unique())
    deltas = np.sort(df["delta_min"].unique())
    alpha = np.zeros((tau.size, deltas.size))
    beta = np.zeros_like(alpha)
    n_eff = np.zeros_like(alpha)
    ti = np.searchsorted(tau, df["t_slot"].to_numpy())
    di = np.searchsorted(deltas, df["delta_min"].to_numpy())
    alpha[ti, di] = df["alpha"]
    beta[ti, di] = df["beta"]
    n_eff[ti, di] = df["n_eff"]
    return CoefficientGrid(
        tau_slots=tau,
        deltas_min=deltas,
        alpha=alpha,
        beta=beta,
        n_eff=n_eff,
        sigma_minutes=sigma,
        slot_seconds=slot_seconds,
    )
