"""Command-line surface for the pipeline.

Subcommands: synth, ingest, health, impute, fit-mu, speed, traveltime,
fit-predictors, predict, eval, plot.  Each one reads its declared CSV
inputs, writes its declared CSV outputs and prints a one-line summary;
given the same inputs, config and seed the outputs are byte-identical.

Configuration is a flat ``key = value`` file (``#`` comments); command
line flags override file values; the ``LOOPGRID_CONFIG`` environment
variable names a default config file.  Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import pandas as pd

from . import impute as impute_mod
from . import ingest as ingest_mod
from . import predict as predict_mod
from . import quality as quality_mod
from . import synth as synth_mod
from . import velocity as velocity_mod
from .model import SECONDS_PER_DAY, LoopgridError
from .quality import AcceptanceRegion, DsaThresholds
from .statkit import loess_fit, percentile
from .velocity import FilterConfig, FreeFlowTable

ENV_CONFIG = "LOOPGRID_CONFIG"


class BadArgs(LoopgridError):
    pass


class MissingInput(LoopgridError):
    pass


class MissingUpstream(LoopgridError):
    pass


PIPELINE_DEFAULTS = {
    "layout": "",
    "samples": "",
    "outdir": ".",
    "base_interval_s": "300",
    "slot_seconds": "300",
    "start_epoch": "",
    "days": "",
    "missing_subinterval_limit": "1",
    "detection_mode": "offline",
    "washington": "auto",
    "washington_capacity_vph": "2400",
    "washington_knee": "0.12",
    "dsa_s1_frac": "0.9",
    "dsa_s2_frac": "0.02",
    "dsa_s3_frac": "0.02",
    "dsa_s4_low": "0.5",
    "dsa_k_star": "0.35",
    "dsa_bin_width": "0.01",
    "min_pairs": "50",
    "merge_weekdays": "true",
    "flow_cap_vph": "2400",
    "occupancy_percentile": "0.6",
    "loess_span": "0.3",
    "loess_degree": "1",
    "mu_min_points": "10",
    "mu_max_points": "800",
    "mu_extrap_gap_slots": "3",
    "fallback_mu_feet": "20.0",
    "smoothing_c": "50.0",
    "speed_estimator": "filtered",
    "origin": "",
    "destination": "",
    "depart_start": "05:00",
    "depart_end": "20:00",
    "sigma_k_minutes": "10.0",
    "deltas_min": "0,60",
    "taus": "06:00-19:00/60",
    "pca_rank": "4",
    "pca_ridge": "",
    "nn_k": "2",
    "nn_window_min": "20",
    "nn_metric": "m2",
    "eval_methods": "historical,current,regression",
    "seed": "0",
}


def parse_flat_config(path, defaults):
    """Flat ``key = value`` file; unknown keys are errors."""
    values = dict(defaults)
    if path is None:
        return values
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MissingInput(f"config file: {exc}") from None
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadArgs(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in defaults:
            raise BadArgs(f"{path}:{ln}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


class Cfg:
    """Config values with CLI override and typed access."""

    def __init__(self, values, args):
        self.values = values
        self.args = args

    def raw(self, key):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return str(flag)
        return self.values[key]

    def str(self, key):
        return self.raw(key)

    def int(self, key):
        v = self.raw(key)
        if v == "":
            return None
        return int(v)

    def float(self, key):
        v = self.raw(key)
        if v == "":
            return None
        return float(v)

    def bool(self, key):
        return self.raw(key).strip().lower() in ("1", "true", "yes", "on")

    def list_float(self, key):
        return [float(tok) for tok in self.raw(key).split(",") if tok.strip() != ""]


def hhmm_to_minutes(text):
    parts = text.strip().split(":")
    if len(parts) != 2:
        raise BadArgs(f"expected HH:MM, got {text!r}")
    return int(parts[0]) * 60 + int(parts[1])


def parse_taus(spec, slot_seconds):
    """Either 'HH:MM,HH:MM,...' or 'HH:MM-HH:MM/step_minutes'."""
    slot_min = slot_seconds / 60.0
    out = []
    for token in spec.split(","):
        token = token.strip()
        if "-" in token and "/" in token:
            span, step = token.split("/")
            lo, hi = span.split("-")
            t = hhmm_to_minutes(lo)
            end = hhmm_to_minutes(hi)
            step = float(step)
            while t <= end + 1e-9:
                out.append(int(round(t / slot_min)))
                t += step
        elif token:
            out.append(int(round(hhmm_to_minutes(token) / slot_min)))
    return out


def _require(path, what):
    if not path:
        raise BadArgs(f"missing required {what}")
    if not os.path.exists(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


def _load_layout(cfg):
    return ingest_mod.read_layout_csv(_require(cfg.str("layout"), "layout file"))


# ---------------------------------------------------------------- synth

WORLD_DEFAULT_KEYS = {
    "seed",
    "days",
    "base_interval_s",
    "start_epoch",
    "stations",
    "length_miles",
    "lanes",
    "layout_csv",
    "demand_vph",
    "lane_share",
    "day_demand_jitter_sd",
    "day_speed_jitter_sd",
    "background_speed_jitter_sd",
    "slot_speed_jitter_sd",
    "onset_jitter_minutes",
    "car_length_ft",
    "car_length_sd",
    "truck_length_ft",
    "truck_length_sd",
    "truck_fraction",
    "zone",
    "incident",
    "fault",
    "free_flow_override",
}


def _parse_points(text):
    pts = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        h, _, v = tok.partition(":")
        pts.append((float(h), float(v)))
    return tuple(pts)


def parse_world_config(path):
    """World description file -> WorldConfig.

    Repeatable keys: ``zone = LO:HI @ h:mph, ...`` (station id range,
    speed curve), ``incident = LO:HI @ day D, START + HOURS, factor F``
    and ``fault = station S lane L day D KIND [k=v ...]``.
    """
    scalars = {}
    zones, incidents, faults = [], [], []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MissingInput(f"world config: {exc}") from None
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in WORLD_DEFAULT_KEYS:
            raise BadArgs(f"{path}:{ln}: unknown world key {key!r}")
        if key == "zone":
            rng, _, curve = value.partition("@")
            lo, _, hi = rng.strip().partition(":")
            zones.append((int(lo), int(hi), _parse_points(curve)))
        elif key == "incident":
            rng, _, rest = value.partition("@")
            lo, _, hi = rng.strip().partition(":")
            parts = [p.strip() for p in rest.split(",")]
            day = int(parts[0].split()[1])
            start, _, dur = parts[1].partition("+")
            factor = float(parts[2].split()[1])
            incidents.append(
                (int(lo), int(hi), day, float(start), float(dur), factor)
            )
        elif key == "fault":
            toks = value.split()
            head = {toks[i]: toks[i + 1] for i in range(0, 6, 2)}
            kind = toks[6]
            params = {}
            for tok in toks[7:]:
                k, _, v = tok.partition("=")
                params[k] = float(v)
            faults.append(
                synth_mod.FaultSpec(
                    station=int(head["station"]),
                    lane=int(head["lane"]),
                    day=int(head["day"]),
                    kind=kind,
                    params=params,
                )
            )
        else:
            scalars[key] = value
    if "layout_csv" in scalars:
        layout = ingest_mod.read_layout_csv(scalars["layout_csv"])
    else:
        layout = synth_mod.uniform_layout(
            int(scalars.get("stations", "10")),
            float(scalars.get("length_miles", "5.0")),
            int(scalars.get("lanes", "3")),
        )
    sidx = layout.station_index
    zone_objs = tuple(
        synth_mod.SpeedZone(station_lo=sidx[lo], station_hi=sidx[hi], curve=curve)
        for lo, hi, curve in zones
    )
    incident_objs = tuple(
        synth_mod.Incident(
            station_lo=sidx[lo], station_hi=sidx[hi], day=day, start_hour=start, duration_hours=dur, factor=factor
        )
        for lo, hi, day, start, dur, factor in incidents
    )
    ff = FreeFlowTable()
    if "free_flow_override" in scalars:
        ff = FreeFlowTable(
            station_overrides={st: float(scalars["free_flow_override"]) for st in layout.stations}
        )
    kwargs = dict(
        layout=layout,
        n_days=int(scalars.get("days", "1")),
        base_interval_s=int(scalars.get("base_interval_s", "300")),
        seed=int(scalars.get("seed", "0")),
        start_epoch=int(scalars.get("start_epoch", "345600")),
        zones=zone_objs,
        incidents=incident_objs,
        faults=tuple(faults),
        free_flow=ff,
    )
    for key, attr, cast in (
        ("demand_vph", "demand_vph", _parse_points),
        ("truck_fraction", "truck_fraction", _parse_points),
        ("lane_share", "lane_share", lambda v: tuple(float(x) for x in v.split(","))),
        ("day_demand_jitter_sd", "day_demand_jitter_sd", float),
        ("day_speed_jitter_sd", "day_speed_jitter_sd", float),
        ("background_speed_jitter_sd", "background_speed_jitter_sd", float),
        ("slot_speed_jitter_sd", "slot_speed_jitter_sd", float),
        ("onset_jitter_minutes", "onset_jitter_minutes", float),
        ("car_length_ft", "car_length_ft", float),
        ("car_length_sd", "car_length_sd", float),
        ("truck_length_ft", "truck_length_ft", float),
        ("truck_length_sd", "truck_length_sd", float),
    ):
        if key in scalars:
            kwargs[attr] = cast(scalars[key])
    return synth_mod.WorldConfig(**kwargs)


CORRIDOR_PRESET = """\
# 48-mile, 116-station weekday corridor with morning and evening rush.
seed = 7
days = 34
base_interval_s = 300
start_epoch = 345600
stations = 116
length_miles = 48.0
lanes = 3
demand_vph = 0:15, 4:30, 5:150, 6:650, 7:900, 9:700, 12:650, 15:800, 17:950, 19:550, 21:250, 24:40
lane_share = 1.1, 1.0, 0.9
day_demand_jitter_sd = 0.12
day_speed_jitter_sd = 0.11
background_speed_jitter_sd = 0.04
slot_speed_jitter_sd = 0.015
onset_jitter_minutes = 25
car_length_ft = 17.0
car_length_sd = 1.5
truck_length_ft = 45.0
truck_length_sd = 6.0
truck_fraction = 0:0.14, 6:0.18, 9:0.08, 15:0.05, 20:0.10, 24:0.14
zone = 30:70 @ 0:80, 6:78, 6.7:42, 7.2:26, 8.5:24, 9.3:40, 10:64, 10.8:80, 24:80
zone = 45:85 @ 0:80, 9.5:74, 10.5:55, 12:50, 14:52, 15.2:62, 16:75, 24:80
zone = 60:100 @ 0:80, 15:76, 15.8:34, 16.8:21, 18:24, 19:42, 20:68, 20.8:80, 24:80
"""

FAULT_SUITE_PRESET = """\
# Ten detectors x ten days at 30-second sampling, 30 faulty detector-days.
seed = 11
days = 10
base_interval_s = 30
start_epoch = 345600
stations = 5
length_miles = 2.0
lanes = 2
demand_vph = 0:10, 5:60, 7:420, 9:300, 12:280, 16:420, 19:250, 22:60, 24:10
lane_share = 1.1, 0.9
day_demand_jitter_sd = 0.10
truck_fraction = 0:0.10, 9:0.06, 17:0.12, 24:0.10
"""

COMPACT_PRESET = """\
# Small demo corridor: quick to run end to end.
seed = 3
days = 6
base_interval_s = 300
start_epoch = 345600
stations = 12
length_miles = 6.0
lanes = 3
demand_vph = 0:15, 5:120, 7:700, 9:500, 15:650, 18:800, 20:300, 24:30
lane_share = 1.1, 1.0, 0.9
day_demand_jitter_sd = 0.12
day_speed_jitter_sd = 0.05
slot_speed_jitter_sd = 0.015
onset_jitter_minutes = 12
truck_fraction = 0:0.12, 9:0.06, 17:0.10, 24:0.12
zone = 4:9 @ 0:80, 6:75, 7:30, 8:24, 9:40, 10:70, 24:80
"""

PRESETS = {"corridor": CORRIDOR_PRESET, "fault-suite": FAULT_SUITE_PRESET, "compact": COMPACT_PRESET}


def cmd_synth(args):
    if args.preset:
        if args.preset not in PRESETS:
            raise BadArgs(f"unknown preset {args.preset!r} (have {sorted(PRESETS)})")
        text = PRESETS[args.preset]
        cfg_path = os.path.join(args.out, f"world_{args.preset}.cfg")
        os.makedirs(args.out, exist_ok=True)
        with open(cfg_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        config = parse_world_config(cfg_path)
        if args.preset == "fault-suite":
            config = synth_mod.WorldConfig(
                **{
                    **{f.name: getattr(config, f.name) for f in config.__dataclass_fields__.values()},
                    "faults": synth_mod.fault_suite_schedule(config.layout, config.n_days, config.seed),
                }
            )
    else:
        config = parse_world_config(_require(args.world, "world config"))
    if args.seed is not None:
        fields = {f: getattr(config, f) for f in config.__dataclass_fields__}
        fields["seed"] = int(args.seed)
        config = synth_mod.WorldConfig(**fields)
    os.makedirs(args.out, exist_ok=True)
    world = synth_mod.generate_world(config)
    flow, occ, present = synth_mod.render_samples(world)
    labels = np.zeros(flow.shape, dtype=np.int8)
    if config.faults:
        flow, occ, present, labels = synth_mod.inject_faults(
            flow, occ, present, config.faults, config.layout, config.seed
        )
    ingest_mod.write_layout_csv(config.layout, os.path.join(args.out, "layout.csv"))
    synth_mod.write_samples_csv(
        (flow, occ, present), config.layout, config.base_interval_s, config.start_epoch, os.path.join(args.out, "samples.csv")
    )
    synth_mod.write_truth_csv(world, labels, os.path.join(args.out, "truth.csv"))
    n = int(np.asarray(present, dtype=bool).sum())
    print(
        f"synth: {config.n_days} days x {config.layout.n_stations} stations, "
        f"{n} samples, {len(config.faults)} faults -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------- pipeline stages


def cmd_ingest(args, cfg):
    layout = _load_layout(cfg)
    samples = _require(cfg.str("samples"), "samples file")
    base = cfg.int("base_interval_s")
    grid, report = ingest_mod.grid_from_samples_csv(
        samples, layout, base, cfg.int("start_epoch"), cfg.int("days")
    )
    ingest_mod.write_grid_csv(grid, args.out)
    print(
        f"ingest: parsed={report.parsed} rejected={report.rejected} "
        f"duplicates={report.duplicates} missing_cells={report.missing_cells} -> {args.out}"
    )
    return 0


def _build_region(cfg, slot_seconds):
    mode = cfg.str("washington").lower()
    if mode == "off":
        return None
    if mode == "auto" and slot_seconds > 60:
        return None
    return AcceptanceRegion.default(
        slot_seconds,
        capacity_vph=cfg.float("washington_capacity_vph"),
        knee_occupancy=cfg.float("washington_knee"),
    )


def cmd_health(args, cfg):
    layout = _load_layout(cfg)
    grid = ingest_mod.read_grid_csv(_require(args.grid, "grid file"), layout)
    n = grid.slots_per_day
    thresholds = DsaThresholds(
        s1_max=cfg.float("dsa_s1_frac") * n,
        s2_max=cfg.float("dsa_s2_frac") * n,
        s3_max=cfg.float("dsa_s3_frac") * n,
        s4_low=cfg.float("dsa_s4_low"),
        k_star=cfg.float("dsa_k_star"),
    )
    scores = quality_mod.score_grid(grid, thresholds, cfg.float("dsa_bin_width"))
    flagged = quality_mod.assign_flags(
        grid, scores, cfg.str("detection_mode"), _build_region(cfg, grid.slot_seconds)
    )
    pd.DataFrame(quality_mod.health_report_rows(scores)).to_csv(args.out, index=False)
    if args.flagged_grid:
        ingest_mod.write_grid_csv(flagged, args.flagged_grid)
    bad = sum(1 for s in scores.values() if s.bad)
    print(f"health: {len(scores)} detector-days scored, {bad} bad -> {args.out}")
    return 0


def cmd_impute(args, cfg):
    layout = _load_layout(cfg)
    grid = ingest_mod.read_grid_csv(_require(args.grid, "grid file"), layout)
    slot = cfg.int("slot_seconds")
    if slot and slot != grid.slot_seconds:
        grid = ingest_mod.aggregate(grid, slot, cfg.int("missing_subinterval_limit"))
    flow_cap = cfg.float("flow_cap_vph") * grid.slot_seconds / 3600.0
    imputer = impute_mod.PairwiseImputer(
        min_pairs=cfg.int("min_pairs"), merge_weekdays=cfg.bool("merge_weekdays"), flow_cap=flow_cap
    )
    result = imputer.fit(grid).impute(grid)
    ingest_mod.write_grid_csv(result.grid, args.out)
    if args.model:
        impute_mod.write_model_csv(imputer.model_, args.model)
    if args.report:
        impute_mod.write_report_csv(result, args.report)
    filled = sum(v for k, v in result.counts.items() if k != "good")
    print(
        f"impute: filled={filled} (neighbor={result.counts['neighbor']} "
        f"historical={result.counts['historical']} corridor={result.counts['corridor']}) -> {args.out}"
    )
    return 0


def _velocity_estimator(cfg):
    return velocity_mod.VelocityEstimator(
        occupancy_percentile=cfg.float("occupancy_percentile"),
        span=cfg.float("loess_span"),
        degree=cfg.int("loess_degree"),
        c=cfg.float("smoothing_c"),
        estimator=cfg.str("speed_estimator"),
        merge_weekdays=cfg.bool("merge_weekdays"),
        min_points=cfg.int("mu_min_points"),
        max_points=cfg.int("mu_max_points"),
        extrap_gap_slots=cfg.int("mu_extrap_gap_slots"),
        fallback_mu_feet=cfg.float("fallback_mu_feet"),
    )


def cmd_fit_mu(args, cfg):
    layout = _load_layout(cfg)
    grid = ingest_mod.read_grid_csv(_require(args.grid, "grid file"), layout)
    est = _velocity_estimator(cfg).fit(grid)
    velocity_mod.write_profile_csv(est.profile_, args.out)
    print(f"fit-mu: {len(est.profile_.curves)} strata fitted -> {args.out}")
    return 0


def cmd_speed(args, cfg):
    layout = _load_layout(cfg)
    grid = ingest_mod.read_grid_csv(_require(args.grid, "grid file"), layout)
    est = _velocity_estimator(cfg)
    if args.mu:
        est.profile_ = velocity_mod.read_profile_csv(_require(args.mu, "mean-length profile"), cfg.bool("merge_weekdays"))
    else:
        est.fit(grid)
    field = est.transform(grid)
    velocity_mod.write_field_csv(field, args.out)
    print(f"speed: {int(np.isfinite(field.speed).sum())} cells estimated -> {args.out}")
    return 0


def _origin_destination(cfg, layout):
    origin = cfg.int("origin") or layout.stations[0]
    destination = cfg.int("destination") or layout.stations[-1]
    return origin, destination


def cmd_traveltime(args, cfg):
    layout = _load_layout(cfg)
    field = velocity_mod.read_field_csv(_require(args.speed, "speed field"), layout)
    origin, destination = _origin_destination(cfg, layout)
    slot_min = field.slot_seconds / 60.0
    lo = int(hhmm_to_minutes(cfg.str("depart_start")) / slot_min)
    hi = int(hhmm_to_minutes(cfg.str("depart_end")) / slot_min)
    series = predict_mod.compute_series(
        field.station_speeds(),
        layout,
        origin,
        destination,
        np.arange(lo, hi + 1),
        field.slot_seconds,
        field.start_epoch,
    )
    predict_mod.write_series_csv(series, args.out)
    defined = int(np.isfinite(series.realized).sum())
    print(
        f"traveltime: {origin}->{destination}, {series.n_days} days x "
        f"{series.depart_slots.size} departures ({defined} realized) -> {args.out}"
    )
    return 0


def cmd_fit_predictors(args, cfg):
    series = predict_mod.read_series_csv(_require(args.tt, "travel-time series"))
    taus = parse_taus(cfg.str("taus"), series.slot_seconds)
    deltas = cfg.list_float("deltas_min")
    if args.arrival:
        grid = predict_mod.fit_arrival_coefficients(series, taus, deltas, cfg.float("sigma_k_minutes"))
    else:
        grid = predict_mod.fit_varying_coefficients(series, taus, deltas, cfg.float("sigma_k_minutes"))
    predict_mod.write_coefficients_csv(grid, args.out)
    kind = "arrival" if args.arrival else "departure"
    print(f"fit-predictors: {grid.tau_slots.size} x {grid.deltas_min.size} {kind} nodes -> {args.out}")
    return 0


def cmd_predict(args, cfg):
    series = predict_mod.read_series_csv(_require(args.tt, "travel-time series"))
    slot_min = series.slot_seconds / 60.0
    when = args.arrive if args.arrive else args.depart
    if when is None:
        raise BadArgs("need --depart HH:MM or --arrive HH:MM")
    delta = float(args.delta)
    day = args.day if args.day is not None else series.n_days - 1
    method = args.method
    mode = "A" if args.arrive else "D"
    if args.arrive:
        # tau is the current time; the arrival target is tau + delta
        tau_slot = int(round((hhmm_to_minutes(when) - delta) / slot_min))
    else:
        tau_slot = int(round(hhmm_to_minutes(when) / slot_min))
    jt = np.searchsorted(series.depart_slots, tau_slot)
    if jt >= series.depart_slots.size or series.depart_slots[jt] != tau_slot:
        raise predict_mod.OutsideGrid(f"time {when} outside the series departure grid")
    tstar = float(series.snapshot[day, jt])
    if method == "regression":
        coeffs = predict_mod.read_coefficients_csv(_require(args.coeffs, "coefficient grid"))
        if args.arrive:
            minutes, _ = predict_mod.predict_arrival(coeffs, tau_slot, delta, tstar)
        else:
            minutes = predict_mod.predict_regression(coeffs, tau_slot, delta, tstar)
    elif method == "historical":
        target = tau_slot + int(round(delta / slot_min))
        train = [d for d in range(series.n_days) if d != day]
        minutes = predict_mod.historical_mean(series, target, train)
    elif method == "current":
        minutes = tstar
    elif method == "nn":
        train = [d for d in range(series.n_days) if d != day]
        minutes = predict_mod.predict_nn(
            series, day, tau_slot, delta, train, cfg.int("nn_k"), cfg.float("nn_window_min"), cfg.str("nn_metric")
        )
    elif method == "pca":
        train = [d for d in range(series.n_days) if d != day]
        model, kept = predict_mod.fit_pca_model(series, cfg.int("pca_rank"), cfg.float("pca_ridge"), train)
        minutes = predict_mod.predict_pca(model, kept, series, day, tau_slot, delta)
    else:
        raise BadArgs(f"unknown method {method!r}")
    origin = series.origin
    destination = series.destination
    line = f"{origin},{destination},{mode},{tau_slot},{delta:g},{method},{minutes:.3f}"
    print(line)
    if args.out:
        exists = os.path.exists(args.out)
        with open(args.out, "a", encoding="utf-8") as fh:
            if not exists:
                fh.write("origin,destination,depart_or_arrive,slot,delta_min,method,predicted_min\n")
            fh.write(line + "\n")
    return 0


def cmd_eval(args, cfg):
    series = predict_mod.read_series_csv(_require(args.tt, "travel-time series"))
    methods = [m.strip() for m in cfg.str("eval_methods").split(",") if m.strip()]
    taus = parse_taus(cfg.str("taus"), series.slot_seconds)
    deltas = cfg.list_float("deltas_min")
    speeds = None
    station_range = None
    if cfg.str("nn_metric") == "m1" and "nn" in methods:
        layout = _load_layout(cfg)
        field = velocity_mod.read_field_csv(_require(args.speed, "speed field"), layout)
        speeds = field.station_speeds()
        station_range = (
            layout.station_index[series.origin],
            layout.station_index[series.destination],
        )
    rows = predict_mod.evaluate_loo(
        series,
        methods,
        taus,
        deltas,
        sigma_minutes=cfg.float("sigma_k_minutes"),
        pca_rank=cfg.int("pca_rank"),
        pca_ridge=cfg.float("pca_ridge"),
        nn_k=cfg.int("nn_k"),
        nn_window=cfg.float("nn_window_min"),
        nn_metric=cfg.str("nn_metric"),
        speeds=speeds,
        station_range=station_range,
    )
    slot_min = series.slot_seconds / 60.0
    out_rows = [
        {
            "method": r["method"],
            "tau": f"{int(r['tau_slot'] * slot_min) // 60:02d}:{int(r['tau_slot'] * slot_min) % 60:02d}",
            "delta": int(r["delta_min"]),
            "rmse_min": r["rmse_min"],
        }
        for r in rows
    ]
    pd.DataFrame(out_rows, columns=["method", "tau", "delta", "rmse_min"]).to_csv(args.out, index=False)
    print(f"eval: {len(set(r['method'] for r in rows))} methods x {len(taus)} taus x {len(deltas)} deltas -> {args.out}")
    return 0


# ---------------------------------------------------------------- plot


def _write_series(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def _svg_chart(path, series_map, width=640, height=360):
    """Tiny deterministic SVG line chart: {label: (x array, y array)}."""
    pad = 40
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series_map.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series_map.values()])
    ok = np.isfinite(xs) & np.isfinite(ys)
    if not ok.any():
        raise MissingUpstream("nothing to plot")
    x0, x1 = xs[ok].min(), xs[ok].max()
    y0, y1 = ys[ok].min(), ys[ok].max()
    sx = (width - 2 * pad) / max(x1 - x0, 1e-9)
    sy = (height - 2 * pad) / max(y1 - y0, 1e-9)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for ci, (label, (x, y)) in enumerate(series_map.items()):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(
            f"{pad + (xi - x0) * sx:.2f},{height - pad - (yi - y0) * sy:.2f}" for xi, yi in zip(x[ok], y[ok])
        )
        color = colors[ci % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{pad + 4}" y="{pad + 14 * (ci + 1)}" fill="{color}" font-size="12">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def cmd_plot(args, cfg):
    fig = args.fig
    if fig == "fig4":
        layout = _load_layout(cfg)
        grid = ingest_mod.read_grid_csv(_require(args.grid, "complete grid"), layout)
        st = args.station or layout.stations[0]
        lane = args.lane or 1
        i = layout.station_index[st]
        n = np.asarray(grid.flow)[:, :, i, lane - 1]
        k = np.asarray(grid.occupancy)[:, :, i, lane - 1]
        v_ff = FreeFlowTable().lookup_for(st, lane, layout.lane_counts[i])
        mu, extrap, alpha = velocity_mod.fit_mean_length(
            n, k, v_ff, grid.slot_seconds, cfg.float("occupancy_percentile"), cfg.float("loess_span"), cfg.int("loess_degree")
        )
        sel = np.isfinite(k) & (k < alpha) & (n > 0)
        pts_t = np.nonzero(sel)[1]
        vals = v_ff * 1.4666666666666666 * k[sel] * grid.slot_seconds / n[sel]
        rows = [(int(t), float(v), "point") for t, v in zip(pts_t, vals)]
        rows += [(t, float(mu[t]), "curve") for t in range(grid.slots_per_day)]
        _write_series(args.out, ["slot", "length_ft", "series"], rows)
        if args.svg:
            _svg_chart(args.svg, {"points": (pts_t, vals), "curve": (np.arange(mu.size), mu)})
    elif fig in ("fig5", "fig6"):
        layout = _load_layout(cfg)
        field = velocity_mod.read_field_csv(_require(args.speed, "speed field"), layout)
        truth = pd.read_csv(_require(args.truth, "truth sidecar"))
        st = args.station or layout.stations[0]
        lane = args.lane or 1
        day = args.day or 0
        i = layout.station_index[st]
        est = np.asarray(field.speed)[day, :, i, lane - 1]
        sub = truth[(truth["station"] == st) & (truth["lane"] == lane) & (truth["day"] == day)].sort_values("slot")
        rows = [(int(t), float(v), "estimate") for t, v in enumerate(est) if np.isfinite(v)]
        rows += [(int(r.slot), float(r.true_speed_mph), "truth") for r in sub.itertuples()]
        _write_series(args.out, ["slot", "mph", "series"], rows)
        if args.svg:
            _svg_chart(
                args.svg,
                {
                    "estimate": (np.arange(est.size), est),
                    "truth": (sub["slot"].to_numpy(), sub["true_speed_mph"].to_numpy()),
                },
            )
    elif fig == "fig3":
        truth = pd.read_csv(_require(args.truth, "truth sidecar"))
        st = args.station or int(truth["station"].iloc[0])
        lane = args.lane or 1
        sub = truth[(truth["station"] == st) & (truth["lane"] == lane)]
        rows = [
            (int(r.slot), float(r.true_speed_mph), f"speed_day{int(r.day)}")
            for r in sub.itertuples()
        ]
        _write_series(args.out, ["slot", "value", "series"], rows)
    elif fig == "fig10":
        series = predict_mod.read_series_csv(_require(args.tt, "travel-time series"))
        rows = []
        for d in range(series.n_days):
            for j, slot in enumerate(series.depart_slots):
                if np.isfinite(series.realized[d, j]):
                    rows.append((int(slot), float(series.realized[d, j]), f"day{d}"))
        _write_series(args.out, ["slot", "minutes", "series"], rows)
        if args.svg:
            _svg_chart(
                args.svg,
                {
                    f"day{d}": (series.depart_slots, series.realized[d])
                    for d in range(min(series.n_days, 34))
                },
            )
    elif fig in ("fig11", "fig12", "fig13", "fig14"):
        rmse = pd.read_csv(_require(args.rmse, "evaluation output"))
        delta = 0 if fig in ("fig11", "fig12") else 60
        wanted = ("historical", "current", "regression") if fig in ("fig11", "fig13") else ("pca", "nn", "regression")
        sub = rmse[(rmse["delta"] == delta) & rmse["method"].isin(wanted)]
        if sub.empty:
            raise MissingUpstream(f"no rows for delta={delta} methods={wanted} in {args.rmse}")
        rows = [(r.tau, float(r.rmse_min), r.method) for r in sub.itertuples()]
        _write_series(args.out, ["tau", "rmse_min", "series"], rows)
        if args.svg:
            series_map = {}
            for m in wanted:
                s = sub[sub["method"] == m]
                x = [hhmm_to_minutes(t) for t in s["tau"]]
                series_map[m] = (np.asarray(x, dtype=float), s["rmse_min"].to_numpy())
            _svg_chart(args.svg, series_map)
    else:
        raise BadArgs(f"unknown figure id {fig!r}")
    print(f"plot: {fig} -> {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="loopgrid",
        description="Loop-detector pipeline: synthesize, ingest, screen, impute, estimate speeds, predict travel times.",
    )
    parser.add_argument("--config", help=f"flat key=value config file (default: ${ENV_CONFIG})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world (samples + layout + truth)")
    p.add_argument("--world", help="world config file")
    p.add_argument("--preset", help="built-in world: corridor | fault-suite | compact")
    p.add_argument("--seed", type=int, help="override the world seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth, needs_cfg=False)

    p = sub.add_parser("ingest", help="parse samples into a dense grid")
    p.add_argument("--samples", help="sample CSV (overrides config)")
    p.add_argument("--layout", help="layout CSV (overrides config)")
    p.add_argument("--base-interval-s", dest="base_interval_s", type=int)
    p.add_argument("--start-epoch", dest="start_epoch", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--out", required=True, help="grid CSV")
    p.set_defaults(func=cmd_ingest, needs_cfg=True)

    p = sub.add_parser("health", help="score detector-days and flag the grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--layout")
    p.add_argument("--flagged-grid", dest="flagged_grid", help="write the flagged grid here")
    p.add_argument("--detection-mode", dest="detection_mode", choices=["offline", "realtime"])
    p.add_argument("--washington", choices=["auto", "on", "off"])
    p.add_argument("--out", required=True, help="health report CSV")
    p.set_defaults(func=cmd_health, needs_cfg=True)

    p = sub.add_parser("impute", help="aggregate (optionally) and fill bad cells")
    p.add_argument("--grid", required=True, help="flagged grid CSV")
    p.add_argument("--layout")
    p.add_argument("--slot-seconds", dest="slot_seconds", type=int)
    p.add_argument("--model", help="write pair-regression model CSV here")
    p.add_argument("--report", help="write imputation report CSV here")
    p.add_argument("--out", required=True, help="complete grid CSV")
    p.set_defaults(func=cmd_impute, needs_cfg=True)

    p = sub.add_parser("fit-mu", help="fit stratified mean effective vehicle lengths")
    p.add_argument("--grid", required=True, help="complete grid CSV")
    p.add_argument("--layout")
    p.add_argument("--out", required=True, help="profile CSV")
    p.set_defaults(func=cmd_fit_mu, needs_cfg=True)

    p = sub.add_parser("speed", help="estimate the velocity field")
    p.add_argument("--grid", required=True, help="complete grid CSV")
    p.add_argument("--layout")
    p.add_argument("--mu", help="mean-length profile CSV (otherwise fitted in place)")
    p.add_argument("--speed-estimator", dest="speed_estimator", choices=["filtered", "preliminary", "coifman"])
    p.add_argument("--out", required=True, help="velocity field CSV")
    p.set_defaults(func=cmd_speed, needs_cfg=True)

    p = sub.add_parser("traveltime", help="walk the field into travel-time series")
    p.add_argument("--speed", required=True, help="velocity field CSV")
    p.add_argument("--layout")
    p.add_argument("--origin", dest="origin", type=int)
    p.add_argument("--destination", dest="destination", type=int)
    p.add_argument("--out", required=True, help="travel-time series CSV")
    p.set_defaults(func=cmd_traveltime, needs_cfg=True)

    p = sub.add_parser("fit-predictors", help="fit the varying-coefficient grid")
    p.add_argument("--tt", required=True, help="travel-time series CSV")
    p.add_argument("--arrival", action="store_true", help="fit arrival-indexed responses")
    p.add_argument("--sigma-k-minutes", dest="sigma_k_minutes", type=float)
    p.add_argument("--out", required=True, help="coefficient grid CSV")
    p.set_defaults(func=cmd_fit_predictors, needs_cfg=True)

    p = sub.add_parser("predict", help="one travel-time prediction")
    p.add_argument("--tt", required=True)
    p.add_argument("--coeffs", help="coefficient grid CSV (regression method)")
    p.add_argument("--depart", help="departure time HH:MM")
    p.add_argument("--arrive", help="desired arrival time HH:MM (arrival mode)")
    p.add_argument("--delta", type=float, default=0.0, help="horizon in minutes")
    p.add_argument("--method", default="regression")
    p.add_argument("--day", type=int, help="which day's observations to use (default last)")
    p.add_argument("--out", help="append the record to this CSV")
    p.set_defaults(func=cmd_predict, needs_cfg=True)

    p = sub.add_parser("eval", help="leave-one-day-out RMSE comparison")
    p.add_argument("--tt", required=True)
    p.add_argument("--speed", help="velocity field CSV (only for nn_metric=m1)")
    p.add_argument("--layout")
    p.add_argument("--eval-methods", dest="eval_methods")
    p.add_argument("--deltas-min", dest="deltas_min")
    p.add_argument("--taus")
    p.add_argument("--out", required=True, help="RMSE CSV")
    p.set_defaults(func=cmd_eval, needs_cfg=True)

    p = sub.add_parser("plot", help="emit plottable series for a figure id")
    p.add_argument("--fig", required=True, help="fig3|fig4|fig5|fig6|fig10|fig11|fig12|fig13|fig14")
    p.add_argument("--grid")
    p.add_argument("--speed")
    p.add_argument("--truth")
    p.add_argument("--tt")
    p.add_argument("--rmse")
    p.add_argument("--layout")
    p.add_argument("--station", type=int)
    p.add_argument("--lane", type=int)
    p.add_argument("--day", type=int)
    p.add_argument("--svg", help="also render a static SVG chart here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot, needs_cfg=True)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "needs_cfg", False):
            cfg_path = args.config or os.environ.get(ENV_CONFIG)
            cfg = Cfg(parse_flat_config(cfg_path, PIPELINE_DEFAULTS), args)
            return args.func(args, cfg)
        return args.func(args)
    except LoopgridError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
