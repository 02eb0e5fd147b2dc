"""Filling missing and malfunctioning grid cells from neighbor lanes.

For every ordered pair of lanes at a station, a linear regression of the
target lane on the neighbor lane is fitted (separately for flow and for
occupancy) on historical times where both were healthy.  A bad cell is
replaced by the median of the per-pair predictions over its currently
healthy neighbors; the median is preferred to the mean because unflagged
bad neighbors should not drag the estimate.  When no usable neighbor is
available the value falls back to the historical stratified mean for the
detector, and past that to the corridor-wide slot median, so the chain
always produces a value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .model import DataGrid, HealthFlag, LoopgridError

NEIGHBOR, HISTORICAL, CORRIDOR = 1, 2, 3
PROVENANCE_NAMES = {0: "good", NEIGHBOR: "neighbor", HISTORICAL: "historical", CORRIDOR: "corridor"}


class NoCleanData(LoopgridError):
    pass


@dataclass(frozen=True)
class PairFit:
    """One lane-on-lane regression: x_i ~ alpha0 + alpha1 * x_j."""

    alpha0: float
    alpha1: float
    n: int
    resid_sd: float
    usable: bool


@dataclass(frozen=True)
class PairwiseModel:
    """Fitted neighbor regressions plus fallback statistics.

    ``pairs`` maps (station, lane_i, lane_j, quantity) with quantity in
    {"flow", "occ"}.  ``hist_mean`` maps (station, lane, dow_class, slot)
    to (flow, occ); ``corridor_median`` maps slot to (flow, occ).
    """

    pairs: dict
    hist_mean: dict
    corridor_median: dict
    global_median: tuple
    min_pairs: int
    merge_weekdays: bool
    flow_cap: float
    slots_per_day: int
    stations_without_pairs: tuple = ()

    def dow_class(self, dow):
        if self.merge_weekdays and dow < 5:
            return 0
        return dow


def _ols(x, y):
    n = x.size
    mx, my = x.mean(), y.mean()
    sxx = ((x - mx) ** 2).sum()
    if sxx <= 0:
        return None
    slope = ((x - mx) * (y - my)).sum() / sxx
    intercept = my - slope * mx
    resid = y - intercept - slope * x
    sd = float(np.sqrt((resid**2).sum() / max(n - 2, 1)))
    return float(intercept), float(slope), sd


def fit_pairwise(grid, min_pairs=50, merge_weekdays=True, flow_cap=None):
    """Fit all same-station lane-pair regressions on a quality-flagged grid.

    Pairs observed together fewer than ``min_pairs`` times (or with a
    constant regressor) are marked unusable.  Raises NoCleanData only if
    no station yields a single usable pair; stations without one are
    recorded and served by the fallback chain at imputation time.
    """
    if flow_cap is None:
        flow_cap = 2400.0 * grid.slot_seconds / 3600.0
    good = grid.good_mask()
    flow = np.asarray(grid.flow)
    occ = np.asarray(grid.occupancy)
    pairs = {}
    covered = set()
    for i, st in enumerate(grid.layout.stations):
        n_lanes = grid.layout.lane_counts[i]
        for li in range(n_lanes):
            for lj in range(n_lanes):
                if li == lj:
                    continue
                both = good[:, :, i, li] & good[:, :, i, lj]
                n = int(both.sum())
                for quantity, values in (("flow", flow), ("occ", occ)):
                    key = (st, li + 1, lj + 1, quantity)
                    if n < max(min_pairs, 2):
                        pairs[key] = PairFit(0.0, 0.0, n, 0.0, False)
                        continue
                    fit = _ols(values[:, :, i, lj][both], values[:, :, i, li][both])
                    if fit is None:
                        pairs[key] = PairFit(0.0, 0.0, n, 0.0, False)
                        continue
                    a0, a1, sd = fit
                    pairs[key] = PairFit(a0, a1, n, sd, True)
                    covered.add(st)
    if not covered:
        raise NoCleanData("no station has a usable lane pair")
    without = tuple(st for st in grid.layout.stations if st not in covered)

    hist_mean = {}
    dows = np.array([grid.day_of_week(d) for d in range(grid.n_days)])
    classes = np.where(dows < 5, 0, dows) if merge_weekdays else dows
    for i, st in enumerate(grid.layout.stations):
        for l in range(grid.layout.lane_counts[i]):
            for cls in np.unique(classes):
                days = np.flatnonzero(classes == cls)
                g = good[days, :, i, l]
                f = np.where(g, flow[days, :, i, l], np.nan)
                o = np.where(g, occ[days, :, i, l], np.nan)
                cnt = g.sum(axis=0)
                with np.errstate(invalid="ignore"):
                    fm = np.nansum(f, axis=0) / np.maximum(cnt, 1)
                    om = np.nansum(o, axis=0) / np.maximum(cnt, 1)
                for t in range(grid.slots_per_day):
                    if cnt[t] > 0:
                        hist_mean[(st, l + 1, int(cls), t)] = (float(fm[t]), float(om[t]))

    corridor_median = {}
    mask_all = good.reshape(grid.n_days, grid.slots_per_day, -1)
    f_all = flow.reshape(mask_all.shape)
    o_all = occ.reshape(mask_all.shape)
    for t in range(grid.slots_per_day):
        m = mask_all[:, t, :]
        if m.any():
            corridor_median[t] = (
                float(np.median(f_all[:, t, :][m])),
                float(np.median(o_all[:, t, :][m])),
            )
    if good.any():
        global_median = (float(np.median(flow[good])), float(np.median(occ[good])))
    else:
        global_median = (0.0, 0.0)
    return PairwiseModel(
        pairs=pairs,
        hist_mean=hist_mean,
        corridor_median=corridor_median,
        global_median=global_median,
        min_pairs=min_pairs,
        merge_weekdays=merge_weekdays,
        flow_cap=float(flow_cap),
        slots_per_day=grid.slots_per_day,
        stations_without_pairs=without,
    )


def _neighbor_estimate(model, st, lane, quantity, neighbor_values):
    """Median of per-pair regressed values over healthy neighbors, or None."""
    preds = []
    for lj, xj in neighbor_values:
        fit = model.pairs.get((st, lane, lj, quantity))
        if fit is not None and fit.usable:
            preds.append(fit.alpha0 + fit.alpha1 * xj)
    if not preds:
        return None
    return float(np.median(preds))


def _impute_one(model, station, lane, n_lanes, dow, slot, good_row, flow_row, occ_row):
    """Fallback chain for one bad cell given that slot's station rows."""
    l = lane - 1
    healthy = [lj for lj in range(n_lanes) if lj != l and good_row[lj]]
    f = _neighbor_estimate(model, station, lane, "flow", [(lj + 1, flow_row[lj]) for lj in healthy])
    o = _neighbor_estimate(model, station, lane, "occ", [(lj + 1, occ_row[lj]) for lj in healthy])
    if f is not None and o is not None:
        prov = NEIGHBOR
    else:
        hist = model.hist_mean.get((station, lane, model.dow_class(dow), slot))
        if hist is not None:
            f = hist[0] if f is None else f
            o = hist[1] if o is None else o
            prov = HISTORICAL
        else:
            fallback = model.corridor_median.get(slot, model.global_median)
            f = fallback[0] if f is None else f
            o = fallback[1] if o is None else o
            prov = CORRIDOR
    return (
        float(np.clip(f, 0.0, model.flow_cap)),
        float(np.clip(o, 0.0, 1.0)),
        prov,
    )


def impute_cell(grid, model, day, slot, station, lane):
    """Impute one bad cell; returns (flow, occupancy, provenance_code).

    Provenance: 1 neighbor regression, 2 historical stratified mean,
    3 corridor/global median.  Flow is clamped to [0, flow_cap] and
    occupancy to [0, 1].
    """
    i = grid.layout.station_index[station]
    return _impute_one(
        model,
        station,
        lane,
        grid.layout.lane_counts[i],
        grid.day_of_week(day),
        slot,
        grid.good_mask()[day, slot, i],
        np.asarray(grid.flow)[day, slot, i],
        np.asarray(grid.occupancy)[day, slot, i],
    )


@dataclass(frozen=True)
class ImputationResult:
    """Completed grid plus per-cell provenance and counters."""

    grid: DataGrid
    provenance: np.ndarray
    counts: dict


def impute_grid(grid, model):
    """Fill every bad cell; good cells untouched; returns ImputationResult.

    Afterwards the grid is complete: every addressable cell is GOOD and
    carries a value, with provenance recording which fallback fired.
    """
    flow = np.array(grid.flow)
    occ = np.array(grid.occupancy)
    health = np.array(grid.health)
    prov = np.zeros(flow.shape, dtype=np.int8)
    lane_mask = grid.lane_mask
    good = health == HealthFlag.GOOD
    bad = ~good & lane_mask[None, None, :, :]
    stations = grid.layout.stations
    lane_counts = grid.layout.lane_counts
    dows = [grid.day_of_week(d) for d in range(grid.n_days)]
    # imputations read only originally-good neighbors, never each other,
    # so the cell order is irrelevant
    for d, t, i, l in zip(*np.nonzero(bad)):
        f, o, p = _impute_one(
            model,
            stations[i],
            int(l) + 1,
            lane_counts[i],
            dows[d],
            int(t),
            good[d, t, i],
            flow[d, t, i],
            occ[d, t, i],
        )
        flow[d, t, i, l] = f
        occ[d, t, i, l] = o
        prov[d, t, i, l] = p
    health[bad] = HealthFlag.GOOD
    counts = {
        "good": int((prov[:, :, lane_mask] == 0).sum()),
        "neighbor": int((prov[:, :, lane_mask] == NEIGHBOR).sum()),
        "historical": int((prov[:, :, lane_mask] == HISTORICAL).sum()),
        "corridor": int((prov[:, :, lane_mask] == CORRIDOR).sum()),
    }
    prov.flags.writeable = False
    return ImputationResult(grid=grid.replace(flow=flow, occupancy=occ, health=health), provenance=prov, counts=counts)


class PairwiseImputer(BaseEstimator):
    """Estimator wrapper: fit learns the pair regressions, transform fills.

    fit(history_grid) -> self with ``model_``; transform(grid) returns
    the completed grid; ``impute`` returns the full ImputationResult with
    provenance.
    """

    def __init__(self, min_pairs=50, merge_weekdays=True, flow_cap=None):
        self.min_pairs = min_pairs
        self.merge_weekdays = merge_weekdays
        self.flow_cap = flow_cap

    def fit(self, grid, y=None):
        self.model_ = fit_pairwise(grid, self.min_pairs, self.merge_weekdays, self.flow_cap)
        return self

    def impute(self, grid):
        if not hasattr(self, "model_"):
            raise LoopgridError("imputer is not fitted")
        return impute_grid(grid, self.model_)

    def transform(self, grid):
        return self.impute(grid).grid

    def fit_transform(self, grid, y=None):
        return self.fit(grid).transform(grid)


def write_model_csv(model, path):
    rows = []
    for (st, li, lj, quantity) in sorted(model.pairs):
        fit = model.pairs[(st, li, lj, quantity)]
        if fit.usable:
            rows.append(
                {
                    "station": st,
                    "lane_i": li,
                    "lane_j": lj,
                    "quantity": quantity,
                    "alpha0": fit.alpha0,
                    "alpha1": fit.alpha1,
                    "n": fit.n,
                    "resid_sd": fit.resid_sd,
                }
            )
    pd.DataFrame(rows, columns=["station", "lane_i", "lane_j", "quantity", "alpha0", "alpha1", "n", "resid_sd"]).to_csv(
        path, index=False
    )


def write_report_csv(result, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("provenance,cells\n")
        for name in ("good", "neighbor", "historical", "corridor"):
            fh.write(f"{name},{result.counts[name]}\n")
