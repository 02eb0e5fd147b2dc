"""Parsing raw sample files and assembling the dense data grid.

Input sample CSV: ``station,lane,epoch_seconds,flow_count,occupancy`` with
optional header, ``#`` comments, flow as a decimal integer and occupancy
as a decimal fraction.  Malformed lines are counted and skipped, never
fatal.  Duplicate (detector, timestamp) keys keep the first occurrence.

Grid files are CSV with columns
``day_index,slot_index,station,lane,flow,occupancy,health``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .model import (
    SECONDS_PER_DAY,
    CorridorLayout,
    DataGrid,
    HealthFlag,
    LoopgridError,
    LoopSample,
    validate_sample,
)

SAMPLE_COLUMNS = ["station", "lane", "epoch_seconds", "flow_count", "occupancy"]
GRID_COLUMNS = ["day_index", "slot_index", "station", "lane", "flow", "occupancy", "health"]


class UnreadableSource(LoopgridError):
    pass


class EmptyDayRange(LoopgridError):
    pass


class MisalignedSlot(LoopgridError):
    pass


@dataclass
class IngestReport:
    """Bookkeeping for one parse/build run.

    ``parsed + rejected == total_lines`` over data lines (comments and a
    header line are not data lines).  ``duplicates`` is the subset of
    ``rejected`` that re-used an already-seen (detector, timestamp) key.
    ``per_detector_day`` maps (station, lane, day) to dicts with
    ``parsed``/``duplicates``/``missing_slots`` counts, filled in by
    ``build_grid``.
    """

    total_lines: int = 0
    parsed: int = 0
    rejected: int = 0
    duplicates: int = 0
    missing_cells: int = 0
    per_detector_day: dict = field(default_factory=dict)

    def count(self, key, what, n=1):
        entry = self.per_detector_day.setdefault(
            key, {"parsed": 0, "duplicates": 0, "missing_slots": 0}
        )
        entry[what] += n


def _open_text(source):
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        try:
            return open(source, "r", encoding="utf-8"), True
        except OSError as exc:
            raise UnreadableSource(str(exc)) from None
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8"), False


def parse_samples(source, layout=None):
    """Parse a sample CSV into LoopSamples plus an IngestReport.

    ``source`` may be a path or an open text/binary stream.  Every
    well-formed line yields one validated sample; anything else bumps the
    rejected counter.  Only I/O-level failures raise.
    """
    stream, owned = _open_text(source)
    samples = []
    report = IngestReport()
    seen = set()
    try:
        for raw in stream:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.lower().startswith("station"):
                continue  # header
            report.total_lines += 1
            parts = line.split(",")
            if len(parts) != 5:
                report.rejected += 1
                continue
            try:
                station = int(parts[0])
                lane = int(parts[1])
                ts = int(parts[2])
                flow = int(parts[3])
                occ = float(parts[4])
                sample = validate_sample(station, lane, ts, flow, occ, layout)
            except (ValueError, LoopgridError):
                report.rejected += 1
                continue
            key = (station, lane, ts)
            if key in seen:
                report.rejected += 1
                report.duplicates += 1
                continue
            seen.add(key)
            samples.append(sample)
            report.parsed += 1
    finally:
        if owned:
            stream.close()
    return samples, report


def build_grid(samples, layout, start_epoch, n_days, base_interval_s, report=None):
    """Assemble validated samples into a dense grid; absent cells -> MISSING.

    Samples with timestamps outside [start_epoch, start_epoch + n_days
    days) are ignored.  ``report``, when given, receives missing-cell and
    per-detector-day tallies.
    """
    if n_days < 1:
        raise EmptyDayRange(f"day range must cover at least one day, got {n_days}")
    if SECONDS_PER_DAY % base_interval_s != 0:
        raise MisalignedSlot(f"{base_interval_s} s does not divide one day")
    grid = DataGrid.empty(layout, n_days, base_interval_s, start_epoch)
    flow = np.array(grid.flow)
    occ = np.array(grid.occupancy)
    health = np.array(grid.health)
    sidx = layout.station_index
    for s in samples:
        rel = s.timestamp - start_epoch
        if rel < 0 or rel >= n_days * SECONDS_PER_DAY:
            continue
        d, within = divmod(rel, SECONDS_PER_DAY)
        t = within // base_interval_s
        i = sidx[s.detector.station]
        l = s.detector.lane - 1
        flow[d, t, i, l] = s.flow_count
        occ[d, t, i, l] = s.occupancy
        health[d, t, i, l] = HealthFlag.GOOD
        if report is not None:
            report.count((s.detector.station, s.detector.lane, int(d)), "parsed")
    out = grid.replace(flow=flow, occupancy=occ, health=health)
    if report is not None:
        missing = int((np.asarray(out.health) == HealthFlag.MISSING)[:, :, out.lane_mask].sum())
        report.missing_cells = missing
        miss = (np.asarray(out.health) == HealthFlag.MISSING).sum(axis=1)
        for i, st in enumerate(layout.stations):
            for l in range(layout.lane_counts[i]):
                for d in range(n_days):
                    if miss[d, i, l]:
                        report.count((st, l + 1, d), "missing_slots", int(miss[d, i, l]))
    return out


def grid_from_samples_csv(path, layout, base_interval_s, start_epoch=None, n_days=None):
    """Vectorized CSV-to-grid path for bulk files.

    Implements the same contract as parse_samples + build_grid (malformed
    lines rejected, first duplicate wins, day range inferred from the data
    when not given) but via pandas, so multi-million-line files assemble
    in seconds.  Returns (grid, report).
    """
    report = IngestReport()
    try:
        with open(path, "rb") as fh:
            head = fh.readline()
            df = None
    except OSError as exc:
        raise UnreadableSource(str(exc)) from None
    skip = 1 if head.lstrip().lower().startswith(b"station") else 0
    try:
        df = pd.read_csv(
            path,
            comment="#",
            header=None,
            skiprows=skip,
            names=SAMPLE_COLUMNS,
            skip_blank_lines=True,
            on_bad_lines="skip",
        )
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=SAMPLE_COLUMNS)
    with open(path, "rb") as fh:
        total = 0
        for raw in fh:
            t = raw.strip()
            if t and not t.startswith(b"#") and not t.lower().startswith(b"station"):
                total += 1
    report.total_lines = total

    cols = {c: pd.to_numeric(df[c], errors="coerce") for c in SAMPLE_COLUMNS}
    ok = np.ones(len(df), dtype=bool)
    for c in SAMPLE_COLUMNS:
        ok &= np.isfinite(cols[c].to_numpy(dtype=np.float64, na_value=np.nan))
    station = cols["station"].to_numpy(dtype=np.float64, na_value=np.nan)
    lane = cols["lane"].to_numpy(dtype=np.float64, na_value=np.nan)
    ts = cols["epoch_seconds"].to_numpy(dtype=np.float64, na_value=np.nan)
    flow = cols["flow_count"].to_numpy(dtype=np.float64, na_value=np.nan)
    occ = cols["occupancy"].to_numpy(dtype=np.float64, na_value=np.nan)
    with np.errstate(invalid="ignore"):
        ok &= (flow >= 0) & (flow == np.floor(flow))
        ok &= (occ >= 0.0) & (occ <= 1.0)
        ok &= (station == np.floor(station)) & (lane == np.floor(lane)) & (ts == np.floor(ts))
    idx_map = layout.station_index
    sidx = np.full(len(df), -1, dtype=np.int64)
    st_int = np.where(np.isfinite(station), station, -1).astype(np.int64)
    for st, i in idx_map.items():
        sidx[st_int == st] = i
    ok &= sidx >= 0
    lane_counts = np.asarray(layout.lane_counts)
    lane_i = np.where(np.isfinite(lane), lane, 0).astype(np.int64)
    with np.errstate(invalid="ignore"):
        ok &= (lane_i >= 1) & (lane_i <= np.where(sidx >= 0, lane_counts[np.clip(sidx, 0, None)], 0))

    # first occurrence wins among duplicate (detector, timestamp) keys;
    # only accepted lines claim a key, matching parse_samples
    ts_int = np.where(np.isfinite(ts), ts, 0).astype(np.int64)
    key = (ts_int * (layout.n_stations + 1) + np.clip(sidx, 0, None)) * (
        layout.max_lanes + 2
    ) + lane_i
    dup_within = pd.Series(key[ok]).duplicated(keep="first").to_numpy()
    report.duplicates = int(dup_within.sum())
    ok_idx = np.flatnonzero(ok)
    ok[ok_idx[dup_within]] = False
    report.parsed = int(ok.sum())
    report.rejected = report.total_lines - report.parsed

    ts_ok = ts[ok].astype(np.int64)
    if start_epoch is None:
        start_epoch = 0 if ts_ok.size == 0 else int(ts_ok.min() // SECONDS_PER_DAY * SECONDS_PER_DAY)
    if n_days is None:
        if ts_ok.size == 0:
            raise EmptyDayRange("no valid samples and no explicit day range")
        n_days = int((ts_ok.max() - start_epoch) // SECONDS_PER_DAY) + 1
    if n_days < 1:
        raise EmptyDayRange(f"day range must cover at least one day, got {n_days}")
    if SECONDS_PER_DAY % base_interval_s != 0:
        raise MisalignedSlot(f"{base_interval_s} s does not divide one day")

    rel = ts_ok - start_epoch
    in_range = (rel >= 0) & (rel < n_days * SECONDS_PER_DAY)
    rel = rel[in_range]
    d = rel // SECONDS_PER_DAY
    t = (rel % SECONDS_PER_DAY) // base_interval_s
    si = sidx[ok][in_range]
    li = lane_i[ok][in_range] - 1
    grid = DataGrid.empty(layout, n_days, base_interval_s, start_epoch)
    flow_a = np.array(grid.flow)
    occ_a = np.array(grid.occupancy)
    health_a = np.array(grid.health)
    flow_a[d, t, si, li] = flow[ok][in_range]
    occ_a[d, t, si, li] = occ[ok][in_range]
    health_a[d, t, si, li] = HealthFlag.GOOD
    out = grid.replace(flow=flow_a, occupancy=occ_a, health=health_a)
    report.missing_cells = int((np.asarray(out.health) == HealthFlag.MISSING)[:, :, out.lane_mask].sum())
    return out, report


def aggregate(grid, target_slot_s, missing_subinterval_limit=1):
    """Aggregate a grid to a coarser slot: flow sums, occupancy averages.

    Sub-intervals of equal duration make the time-weighted occupancy mean
    a plain mean.  A coarse cell is flagged MISSING when at least
    ``missing_subinterval_limit`` sub-intervals are missing, and
    MALFUNCTIONING when that many are flagged bad (missing takes
    precedence); values are computed from the present sub-intervals.
    """
    if target_slot_s % grid.slot_seconds != 0:
        raise MisalignedSlot(
            f"target {target_slot_s} s not a multiple of base {grid.slot_seconds} s"
        )
    ratio = target_slot_s // grid.slot_seconds
    if ratio < 1:
        raise MisalignedSlot("target slot shorter than base interval")
    if grid.slots_per_day % ratio != 0:
        raise MisalignedSlot("target slot does not divide the day evenly")
    d, t, s, l = grid.flow.shape
    nt = t // ratio
    shape = (d, nt, ratio, s, l)
    flow = np.asarray(grid.flow).reshape(shape)
    occ = np.asarray(grid.occupancy).reshape(shape)
    health = np.asarray(grid.health).reshape(shape)
    present = health != HealthFlag.MISSING
    n_present = present.sum(axis=2)
    with np.errstate(invalid="ignore"):
        flow_sum = np.where(n_present > 0, np.nansum(flow, axis=2), np.nan)
        occ_sum = np.nansum(occ, axis=2)
        occ_mean = np.where(n_present > 0, occ_sum / np.maximum(n_present, 1), np.nan)
    n_missing = ratio - n_present
    n_malf = (health == HealthFlag.MALFUNCTIONING).sum(axis=2)
    out_health = np.full((d, nt, s, l), HealthFlag.GOOD, dtype=np.int8)
    out_health[n_malf >= missing_subinterval_limit] = HealthFlag.MALFUNCTIONING
    out_health[n_missing >= missing_subinterval_limit] = HealthFlag.MISSING
    bad = out_health != HealthFlag.GOOD
    flow_sum = np.where(out_health == HealthFlag.MISSING, np.nan, flow_sum)
    occ_mean = np.where(out_health == HealthFlag.MISSING, np.nan, occ_mean)
    del bad
    return DataGrid(
        flow=flow_sum,
        occupancy=occ_mean,
        health=out_health,
        layout=grid.layout,
        slot_seconds=target_slot_s,
        start_epoch=grid.start_epoch,
    )


def read_layout_csv(path):
    """Layout file: ``station,postmile_miles,lane_count`` with optional header."""
    try:
        df = pd.read_csv(path, comment="#", header=None, skip_blank_lines=True)
    except OSError as exc:
        raise UnreadableSource(str(exc)) from None
    if df.shape[1] != 3:
        raise LoopgridError("layout file needs 3 columns: station,postmile_miles,lane_count")
    first = str(df.iloc[0, 0]).strip().lower()
    if first == "station":
        df = df.iloc[1:]
    return CorridorLayout(
        stations=tuple(int(v) for v in df.iloc[:, 0]),
        postmiles=tuple(float(v) for v in df.iloc[:, 1]),
        lane_counts=tuple(int(v) for v in df.iloc[:, 2]),
    )


def write_layout_csv(layout, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("station,postmile_miles,lane_count\n")
        for st, pm, lc in zip(layout.stations, layout.postmiles, layout.lane_counts):
            fh.write(f"{st},{pm!r},{lc}\n")


def write_grid_csv(grid, path):
    """Serialize a grid; floats use shortest round-trip representation."""
    mask = grid.lane_mask
    d, t, s, l = grid.flow.shape
    di, ti, si, li = np.indices((d, t, s, l))
    keep = np.broadcast_to(mask, (d, t, s, l))
    stations = np.asarray(grid.layout.stations)
    df = pd.DataFrame(
        {
            "day_index": di[keep],
            "slot_index": ti[keep],
            "station": stations[si[keep]],
            "lane": li[keep] + 1,
            "flow": np.asarray(grid.flow)[keep],
            "occupancy": np.asarray(grid.occupancy)[keep],
            "health": np.asarray(grid.health)[keep],
        }
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# slot_seconds={grid.slot_seconds} start_epoch={grid.start_epoch}\n")
        df.to_csv(fh, index=False)


def read_grid_csv(path, layout):
    """Inverse of write_grid_csv; cell-for-cell round trip."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            meta = fh.readline()
    except OSError as exc:
        raise UnreadableSource(str(exc)) from None
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
        dtype={
            "day_index": np.int32,
            "slot_index": np.int32,
            "station": np.int64,
            "lane": np.int32,
            "flow": np.float64,
            "occupancy": np.float64,
            "health": np.int8,
        },
    )
    n_days = int(df["day_index"].max()) + 1 if len(df) else 1
    grid = DataGrid.empty(layout, n_days, slot_seconds, start_epoch)
    flow = np.array(grid.flow)
    occ = np.array(grid.occupancy)
    health = np.array(grid.health)
    sidx = layout.station_index
    si = df["station"].map(sidx).to_numpy(dtype=np.int64)
    d = df["day_index"].to_numpy(dtype=np.int64)
    t = df["slot_index"].to_numpy(dtype=np.int64)
    li = df["lane"].to_numpy(dtype=np.int64) - 1
    flow[d, t, si, li] = df["flow"].to_numpy(dtype=np.float64)
    occ[d, t, si, li] = df["occupancy"].to_numpy(dtype=np.float64)
    health[d, t, si, li] = df["health"].to_numpy(dtype=np.int64)
    return grid.replace(flow=flow, occupancy=occ, health=health)
