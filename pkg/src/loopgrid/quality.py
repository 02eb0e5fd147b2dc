"""Detector health screening.

Two complementary tests: a per-sample acceptance region in the
(flow, occupancy) plane, and a per-day score test (counts of
zero-occupancy samples, occupancy-without-flow samples, over-threshold
occupancy samples, plus the entropy of the day's occupancy histogram).
A detector is judged good or bad for a whole day; in realtime mode the
verdict applied to day d is the one computed on day d-1.

The entropy score flags LOW entropy: a stuck detector reports a constant
occupancy whose histogram has a single occupied bin and therefore zero
entropy, so the malfunction signature is entropy below a floor, not
above a ceiling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .model import DataGrid, HealthFlag, LoopgridError
from .statkit import entropy

ALL_MISSING = "all_missing"


@dataclass(frozen=True)
class AcceptanceRegion:
    """Valid (flow, occupancy) region for a single sample.

    ``q_hi_vertices``/``q_lo_vertices`` are piecewise-linear boundaries
    over occupancy in [0, k_max]; flows are per base interval.  The
    ``k0_max``/``q0_max`` corner rules bound occupancy without flow and
    flow without occupancy.
    """

    k_max: float = 0.9
    k0_max: float = 0.05
    q0_max: float = 1.0
    q_hi_vertices: tuple = ((0.0, 1.0), (0.12, 20.0), (0.9, 20.0))
    q_lo_vertices: tuple = ((0.0, 0.0), (0.9, 0.0))

    def __post_init__(self):
        for verts in (self.q_hi_vertices, self.q_lo_vertices):
            ks = [k for k, _ in verts]
            if sorted(ks) != list(ks):
                raise LoopgridError("boundary vertices must be sorted by occupancy")
        ks = np.linspace(0.0, self.k_max, 33)
        if np.any(self._eval(self.q_lo_vertices, ks) > self._eval(self.q_hi_vertices, ks)):
            raise LoopgridError("lower boundary exceeds upper boundary")

    @staticmethod
    def _eval(vertices, k):
        ks = np.asarray([v[0] for v in vertices])
        qs = np.asarray([v[1] for v in vertices])
        return np.interp(k, ks, qs)

    @classmethod
    def default(cls, slot_seconds, capacity_vph=2400.0, knee_occupancy=0.12):
        """Default region scaled to the base interval's capacity flow."""
        cap = capacity_vph * slot_seconds / 3600.0
        return cls(
            q_hi_vertices=((0.0, 1.0), (knee_occupancy, cap), (0.9, cap)),
        )

    def q_hi(self, k):
        return self._eval(self.q_hi_vertices, k)

    def q_lo(self, k):
        return self._eval(self.q_lo_vertices, k)


def washington_check(flow, occupancy, region):
    """Classify one sample against the acceptance region (bounds inclusive)."""
    ok = washington_check_array(np.asarray([flow]), np.asarray([occupancy]), region)[0]
    return HealthFlag.GOOD if ok else HealthFlag.MALFUNCTIONING


def washington_check_array(flow, occupancy, region):
    """Vectorized acceptance test; True where the sample is acceptable."""
    q = np.asarray(flow, dtype=np.float64)
    k = np.asarray(occupancy, dtype=np.float64)
    ok = (k >= 0.0) & (k <= region.k_max)
    ok &= (q >= region.q_lo(k)) & (q <= region.q_hi(k))
    ok &= np.where(k == 0.0, q <= region.q0_max, True)
    ok &= np.where(q == 0.0, k <= region.k0_max, True)
    return ok


@dataclass(frozen=True)
class DsaThresholds:
    """Trigger levels for the daily score test.

    ``s1_max``..``s3_max`` are sample counts; ``s4_low`` is the entropy
    floor in nats; ``k_star`` is the high-occupancy cut for the third
    score.  The count thresholds scale with samples per day, hence the
    ``default`` constructor.
    """

    s1_max: float
    s2_max: float
    s3_max: float
    s4_low: float = 0.5
    k_star: float = 0.35

    def __post_init__(self):
        if min(self.s1_max, self.s2_max, self.s3_max, self.s4_low) < 0:
            raise LoopgridError("thresholds must be non-negative")

    @classmethod
    def default(cls, samples_per_day):
        return cls(
            s1_max=0.9 * samples_per_day,
            s2_max=0.02 * samples_per_day,
            s3_max=0.02 * samples_per_day,
        )


@dataclass(frozen=True)
class DailyScores:
    """Scores and verdict for one detector-day."""

    s1: int
    s2: int
    s3: int
    s4: float
    verdict: str
    reason: str = ""

    @property
    def bad(self):
        return self.verdict == "bad"


def daily_statistics(occupancy, flow, present, thresholds, bin_width=0.01):
    """Score one detector-day series; missing samples are excluded throughout.

    A day with no present samples is forced bad with reason
    ``all_missing`` rather than silently passing.
    """
    occ = np.asarray(occupancy, dtype=np.float64)
    q = np.asarray(flow, dtype=np.float64)
    mask = np.asarray(present, dtype=bool)
    if occ.size == 0:
        raise LoopgridError("empty detector-day series")
    if not mask.any():
        return DailyScores(0, 0, 0, 0.0, "bad", ALL_MISSING)
    occ_p = occ[mask]
    q_p = q[mask]
    s1 = int((occ_p == 0.0).sum())
    s2 = int(((occ_p > 0.0) & (q_p == 0.0)).sum())
    s3 = int((occ_p > thresholds.k_star).sum())
    edges = np.arange(0.0, 1.0 + bin_width, bin_width)
    counts, _ = np.histogram(np.clip(occ_p, 0.0, 1.0), bins=edges)
    s4 = entropy(counts / counts.sum())
    verdict, reason = "good", ""
    if s1 > thresholds.s1_max:
        verdict, reason = "bad", "s1"
    elif s2 > thresholds.s2_max:
        verdict, reason = "bad", "s2"
    elif s3 > thresholds.s3_max:
        verdict, reason = "bad", "s3"
    elif s4 < thresholds.s4_low:
        verdict, reason = "bad", "s4"
    return DailyScores(s1, s2, s3, s4, verdict, reason)


def score_grid(grid, thresholds=None, bin_width=0.01):
    """Daily scores for every detector-day: dict (station, lane, day) -> DailyScores."""
    if thresholds is None:
        thresholds = DsaThresholds.default(grid.slots_per_day)
    occ = np.asarray(grid.occupancy)
    q = np.asarray(grid.flow)
    present = grid.present_mask()
    scores = {}
    for i, st in enumerate(grid.layout.stations):
        for l in range(grid.layout.lane_counts[i]):
            for d in range(grid.n_days):
                scores[(st, l + 1, d)] = daily_statistics(
                    occ[d, :, i, l], q[d, :, i, l], present[d, :, i, l], thresholds, bin_width
                )
    return scores


def assign_flags(grid, verdicts, mode="offline", region=None):
    """Apply day verdicts (and optionally the per-sample region test) to a grid.

    ``offline`` flags day d by day d's verdict; ``realtime`` flags day d
    by day d-1's verdict, with day 0 falling back to its own.  Bad days
    mark every present cell MALFUNCTIONING; on good days the per-sample
    region test (when given) marks individual offenders.  MISSING cells
    are left untouched.
    """
    if mode not in ("offline", "realtime"):
        raise LoopgridError(f"unknown detection mode {mode!r}")
    health = np.array(grid.health)
    occ = np.asarray(grid.occupancy)
    q = np.asarray(grid.flow)
    present = grid.present_mask()
    for i, st in enumerate(grid.layout.stations):
        for l in range(grid.layout.lane_counts[i]):
            for d in range(grid.n_days):
                src = d if (mode == "offline" or d == 0) else d - 1
                score = verdicts[(st, l + 1, src)]
                cells = present[d, :, i, l]
                if score.bad:
                    health[d, cells, i, l] = HealthFlag.MALFUNCTIONING
                elif region is not None:
                    ok = washington_check_array(q[d, :, i, l], occ[d, :, i, l], region)
                    health[d, cells & ~ok, i, l] = HealthFlag.MALFUNCTIONING
    return grid.replace(health=health)


def health_report_rows(scores, mode="offline"):
    """Rows for the health report CSV, sorted for deterministic output."""
    rows = []
    for (st, lane, day) in sorted(scores):
        sc = scores[(st, lane, day)]
        rows.append(
            {
                "station": st,
                "lane": lane,
                "day_index": day,
                "S1": sc.s1,
                "S2": sc.s2,
                "S3": sc.s3,
                "S4": sc.s4,
                "verdict": sc.verdict,
                "reason": sc.reason,
            }
        )
    return rows


class DailyStatisticsDetector(BaseEstimator):
    """Estimator wrapper: fit scores detector-days, transform flags a grid.

    Parameters mirror the functional layer: ``thresholds`` (None picks
    defaults scaled to samples/day), histogram ``bin_width``, detection
    ``mode`` and the per-sample acceptance ``region``: an
    AcceptanceRegion, None to disable, "default" to build one from the
    grid's base interval, or "auto" (the default) which applies the test
    only at base intervals up to a minute — it is a per-30-second-sample
    test and its default boundaries misjudge aggregated slots.
    """

    def __init__(self, thresholds=None, bin_width=0.01, mode="offline", region="auto"):
        self.thresholds = thresholds
        self.bin_width = bin_width
        self.mode = mode
        self.region = region

    def _region_for(self, grid):
        if self.region == "auto":
            return AcceptanceRegion.default(grid.slot_seconds) if grid.slot_seconds <= 60 else None
        if self.region == "default":
            return AcceptanceRegion.default(grid.slot_seconds)
        return self.region

    def fit(self, grid, y=None):
        thresholds = self.thresholds or DsaThresholds.default(grid.slots_per_day)
        self.thresholds_ = thresholds
        self.scores_ = score_grid(grid, thresholds, self.bin_width)
        return self

    def transform(self, grid):
        if not hasattr(self, "scores_"):
            self.fit(grid)
        return assign_flags(grid, self.scores_, self.mode, self._region_for(grid))

    def fit_transform(self, grid, y=None):
        return self.fit(grid).transform(grid)

    def report_rows(self):
        return health_report_rows(self.scores_, self.mode)
