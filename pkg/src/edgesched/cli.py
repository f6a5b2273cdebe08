"""Experiment driver: INI configuration, parameter sweeps, bound calculator and CSV/JSON export."""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .model import CompetitiveParams, ConfigError, GeoPoint, PolicyParams, SimConfig, TraceError, WirelessChannelParams
from .policy import POLICIES
from .sim import INTERVAL_FIELDS, derive_seed, run
from .traces import (
    SERVER_CORE_MIPS,
    SERVER_CORES,
    SERVICE_MIPS,
    SF_CENTER,
    TraceBundle,
    bundle_from_selection,
    densify_workloads,
    kmeans_rush_hour,
    load_mobility_csv,
    load_station_csv,
    load_workload_dir,
    synth_world,
)

log = logging.getLogger("edgesched")

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_RUNTIME = 0, 2, 3, 4

TABLE_FIELDS = ("sweep_value", "policy", "repetition", "overall_delay_ms", "migration_cost_km", "mean_overloaded")
METRICS = TABLE_FIELDS[3:]


@dataclass(frozen=True)
class ScenarioParams:
    """How the world is built: synthetic generator knobs plus the rush-hour pipeline for real traces."""

    n_stations: int = 147
    n_users: int = 1000
    side_m: float = 4000.0
    center_lat: float = SF_CENTER.lat
    center_lng: float = SF_CENTER.lng
    densify_multiplier: int = 2
    n_hotspots: int = 3
    hotspot_share: float = 0.6
    hotspot_sigma_m: float = 350.0
    speed_min_mps: float = 2.0
    speed_max_mps: float = 12.0
    workload_low: float = 0.1
    workload_high: float = 0.6
    kmeans_k: int = 10
    workload_sample_period_s: float = 300.0
    server_core_mips: tuple = SERVER_CORE_MIPS
    server_cores: int = SERVER_CORES
    service_mips: tuple = SERVICE_MIPS
    task_size_mi: float = 60.0
    transmit_power_w: float = 0.5

    def __post_init__(self):
        if self.n_stations < 1 or self.n_users < 1:
            raise ConfigError("n_stations and n_users must be >= 1")
        if self.densify_multiplier < 1:
            raise ConfigError("densify_multiplier must be >= 1")
        if not 0 <= self.speed_min_mps <= self.speed_max_mps:
            raise ConfigError("need 0 <= speed_min_mps <= speed_max_mps")
        if not 0 <= self.workload_low <= self.workload_high <= 1:
            raise ConfigError("need 0 <= workload_low <= workload_high <= 1")
        if self.kmeans_k < 1:
            raise ConfigError("kmeans_k must be >= 1")
        if not self.server_core_mips or not self.service_mips or min(self.server_core_mips + self.service_mips) <= 0:
            raise ConfigError("MIPS option lists must be nonempty and positive")
        if self.server_cores < 1 or self.task_size_mi <= 0 or self.transmit_power_w <= 0:
            raise ConfigError("server_cores, task_size_mi and transmit_power_w must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    scenario: ScenarioParams = field(default_factory=ScenarioParams)


_SECTIONS = ("simulation", "channel", "policy", "scenario")


def _scalar_fields(cls):
    return [f for f in fields(cls) if f.name not in ("channel", "policy")]


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(float(x)) for x in v)
    return str(v)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` sections; omitted keys keep their defaults, unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    def build(cls, section, defaults):
        vals = {}
        if cp.has_section(section):
            names = {f.name for f in _scalar_fields(cls)}
            for key, raw in cp.items(section):
                if key not in names:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                vals[key] = _coerce(f"[{section}] {key}", raw, getattr(defaults, key))
        return vals

    base = ExperimentConfig()
    channel = replace(base.sim.channel, **build(WirelessChannelParams, "channel", base.sim.channel))
    policy = replace(base.sim.policy, **build(PolicyParams, "policy", base.sim.policy))
    sim = replace(base.sim, channel=channel, policy=policy, **build(SimConfig, "simulation", base.sim))
    scenario = replace(base.scenario, **build(ScenarioParams, "scenario", base.scenario))
    return ExperimentConfig(sim, scenario)


def dump_config(cfg: ExperimentConfig) -> str:
    sections = {
        "simulation": cfg.sim,
        "channel": cfg.sim.channel,
        "policy": cfg.sim.policy,
        "scenario": cfg.scenario,
    }
    out = []
    for name, obj in sections.items():
        out.append(f"[{name}]")
        out += [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in _scalar_fields(type(obj))]
        out.append("")
    return "\n".join(out)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def competitive_bound(params: CompetitiveParams) -> float:
    """Upper bound ``1 + (2+e+d)JR / ((1+e+d)(J+R))`` on the competitive ratio."""
    J, R, e, d = params.J, params.R, params.epsilon, params.delta
    return 1.0 + (2.0 + e + d) * J * R / ((1.0 + e + d) * (J + R))


SWEEP_VARIABLES = ("distance_threshold", "server_count", "client_count")


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    repetitions: int = 1
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"unknown sweep variable {self.variable!r}; choose from {', '.join(SWEEP_VARIABLES)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        object.__setattr__(self, "values", tuple(self.values))

    def config_for(self, value) -> ExperimentConfig:
        cfg = self.base
        if self.variable == "distance_threshold":
            pol = replace(cfg.sim.policy, distance_threshold_m=float(value))
            return replace(cfg, sim=replace(cfg.sim, policy=pol))
        key = "n_stations" if self.variable == "server_count" else "n_users"
        return replace(cfg, scenario=replace(cfg.scenario, **{key: int(value)}))


def parse_sweep(arg: str, repetitions: int, base: ExperimentConfig) -> SweepSpec:
    name, sep, vals = arg.partition("=")
    if not sep:
        raise ConfigError(f"--sweep expects VAR=v1,v2,...; got {arg!r}")
    try:
        values = tuple(float(v) if name.strip() == "distance_threshold" else int(v)
                       for v in vals.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad sweep values {vals!r}") from None
    return SweepSpec(name.strip(), values, repetitions, base)


# world construction


@dataclass(frozen=True)
class TraceSet:
    """Raw real-format inputs, loaded once and reused by every sweep cell."""

    stations: list
    traces: list
    workloads: Optional[list] = None


def load_trace_dir(path, sample_period_s: float = 300.0, interval_s: float = 60.0) -> TraceSet:
    """``stations.csv`` and ``mobility.csv`` are required; a ``workloads/`` directory is optional."""
    root = Path(path)
    if not root.is_dir():
        raise TraceError(f"{root}: not a directory")
    stations = load_station_csv(root / "stations.csv")
    traces = load_mobility_csv(root / "mobility.csv")
    wl = root / "workloads"
    workloads = load_workload_dir(wl, sample_period_s, interval_s) if wl.is_dir() else None
    return TraceSet(stations, traces, workloads)


def _subsample(bundle: TraceBundle, n_stations: int, n_users: int, seed: int) -> TraceBundle:
    rng = np.random.default_rng(seed)
    st, users = bundle.stations, bundle.users
    if n_stations < len(st):
        keep = np.sort(rng.choice(len(st), n_stations, replace=False))
        st = [st[i] for i in keep]
    if n_users < len(users):
        keep = np.sort(rng.choice(len(users), n_users, replace=False))
        users = [users[i] for i in keep]
    server_ids = {s.edge_server_id for s in st}
    svc_ids = {u.service_id for u in users}
    return TraceBundle(st, [s for s in bundle.servers if s.id in server_ids], users,
                       [s for s in bundle.services if s.id in svc_ids], bundle.start_time, bundle.area)


def build_bundle(cfg: ExperimentConfig, seed: int, traces: Optional[TraceSet] = None) -> TraceBundle:
    sc = cfg.scenario
    if traces is None:
        bundle = synth_world(
            sc.n_stations, sc.n_users, cfg.sim.horizon_intervals, seed,
            center=GeoPoint(sc.center_lat, sc.center_lng), side_m=sc.side_m, interval_s=cfg.sim.interval_s,
            n_hotspots=sc.n_hotspots, hotspot_share=sc.hotspot_share, hotspot_sigma_m=sc.hotspot_sigma_m,
            speed_mps=(sc.speed_min_mps, sc.speed_max_mps), workload_range=(sc.workload_low, sc.workload_high),
            server_core_mips=sc.server_core_mips, server_cores=sc.server_cores, service_mips=sc.service_mips)
    else:
        sel = kmeans_rush_hour(traces.traces, sc.kmeans_k, traces.stations, seed=seed,
                               half_side_m=sc.side_m / 2, interval_s=cfg.sim.interval_s)
        n_int = sel.window[1] - sel.window[0]
        if n_int < cfg.sim.horizon_intervals:
            raise TraceError(f"rush-hour window holds {n_int} intervals, horizon needs {cfg.sim.horizon_intervals}")
        bundle = bundle_from_selection(traces.stations, traces.traces, sel, seed, cfg.sim.interval_s,
                                       traces.workloads, sc.server_core_mips, sc.server_cores, sc.service_mips)
        bundle = _subsample(bundle, sc.n_stations, sc.n_users, seed)
    for u in bundle.users:
        u.task_size_mi = sc.task_size_mi
        u.transmit_power_w = sc.transmit_power_w
    return densify_workloads(bundle, sc.densify_multiplier)


# sweeps


def _cell(args):
    cfg, traces, value, policy, rep, master = args
    world_seed = derive_seed(master, "world", value, rep)
    bundle = build_bundle(cfg, world_seed, traces)
    rep_ = run(bundle, cfg.sim, policy, seed=world_seed, policy_seed=derive_seed(master, value, policy, rep))
    agg = rep_.aggregate
    return {
        "sweep_value": value,
        "policy": policy,
        "repetition": rep,
        "overall_delay_ms": agg["overall_delay_ms"],
        "migration_cost_km": agg["total_migration_cost_km"],
        "mean_overloaded": agg["mean_overloaded_servers"],
    }


def run_sweep(spec: SweepSpec, policies, master_seed: Optional[int] = None, traces: Optional[TraceSet] = None,
              sink=None, jobs: int = 1) -> list:
    """One simulation per (value, policy, repetition), in that nesting order.

    All policies in a (value, repetition) cell share the world and backhaul
    seed ``hash(master, "world", value, rep)``; the policy stream is seeded
    with ``hash(master, value, policy, rep)``. Rows are written to ``sink`` as
    they finish, so a failing run leaves the completed rows behind.
    """
    for p in policies:
        if p.lower() not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; choose from {', '.join(POLICIES)}")
    master = spec.base.sim.rng_seed if master_seed is None else master_seed
    cells = [(spec.config_for(v), traces, v, p, r, master)
             for v in spec.values for p in policies for r in range(spec.repetitions)]
    writer = None
    if sink is not None:
        writer = csv.DictWriter(sink, fieldnames=TABLE_FIELDS, lineterminator="\n")
        writer.writeheader()
    rows = []

    def emit(row):
        rows.append(row)
        if writer is not None:
            writer.writerow(_fmt_row(row))
            sink.flush()

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for row in ex.map(_cell, cells):
                emit(row)
    else:
        for c in cells:
            emit(_cell(c))
    return rows


def _fmt_row(row: dict) -> dict:
    return {k: _fmt(v) for k, v in row.items()}


def table_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(_fmt_row(r) for r in rows)
    return buf.getvalue()


def emit_plot_data(rows, metric: str) -> str:
    """Pivot a sweep table to one line per sweep value with ``<policy>_mean`` and ``<policy>_std`` columns.

    The standard deviation is the sample one (ddof=1), 0 for a single repetition.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    values, policies, cells = [], [], {}
    for r in rows:
        if r["sweep_value"] not in values:
            values.append(r["sweep_value"])
        if r["policy"] not in policies:
            policies.append(r["policy"])
        cells.setdefault((r["sweep_value"], r["policy"]), []).append(float(r[metric]))
    header = ["sweep_value"] + [f"{p}_{s}" for p in policies for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for v in values:
        line = [_fmt(v)]
        for p in policies:
            xs = cells.get((v, p), [])
            if not xs:
                line += ["", ""]
                continue
            std = float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
            line += [_fmt(float(np.mean(xs))), _fmt(std)]
        w.writerow(line)
    return buf.getvalue()


# command line


def _parse_bound(arg: str) -> CompetitiveParams:
    parts = [p for p in arg.split(",") if p.strip()]
    if len(parts) not in (2, 4):
        raise ConfigError("--bound expects J,R or J,R,EPS,DELTA")
    try:
        J, R = int(parts[0]), int(parts[1])
        e, d = (float(parts[2]), float(parts[3])) if len(parts) == 4 else (0.0, 0.0)
    except ValueError:
        raise ConfigError(f"bad --bound value {arg!r}") from None
    return CompetitiveParams(J, R, e, d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgesched", description="Trace-driven mobile edge scheduling simulator.")
    ap.add_argument("--config", metavar="PATH", help="INI configuration file (defaults used if omitted)")
    ap.add_argument("--policy", metavar="NAME[,NAME...]", default="pdma,nf,nm,topk",
                    help=f"policies to run, from: {', '.join(POLICIES)}")
    ap.add_argument("--sweep", metavar="VAR=v1,v2,...",
                    help=f"sweep one variable ({', '.join(SWEEP_VARIABLES)})")
    ap.add_argument("--reps", metavar="N", type=int, default=1, help="repetitions per sweep value")
    ap.add_argument("--seed", metavar="S", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", metavar="DIR", default="out", help="output directory")
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--synth", action="store_true", help="generate a synthetic world (default)")
    src.add_argument("--traces", metavar="DIR", help="directory with stations.csv, mobility.csv [, workloads/]")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes")
    ap.add_argument("--bound", metavar="J,R[,EPS,DELTA]", help="print the competitive-ratio bound and exit")
    ap.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _single_run(cfg, policies, reps, master, traces, out: Path):
    """Without ``--sweep``: full per-interval metrics for each policy and repetition."""
    spec = SweepSpec("distance_threshold", (cfg.sim.policy.distance_threshold_m,), reps, cfg)
    reports, rows = [], []
    for rep in range(reps):
        world_seed = derive_seed(master, "world", spec.values[0], rep)
        bundle = build_bundle(cfg, world_seed, traces)
        for p in policies:
            r = run(bundle, cfg.sim, p, seed=world_seed, policy_seed=derive_seed(master, spec.values[0], p, rep))
            reports.append({"repetition": rep, **r.to_dict()})
            rows += [{"repetition": rep, **row} for row in r.csv_rows()]
            log.info("rep %d %s: %s", rep, p, r.aggregate)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("repetition", "policy") + INTERVAL_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(_fmt_row(r) for r in rows)
    summary = {}
    for p in policies:
        aggs = [r["aggregate"] for r in reports if r["policy"] == p]
        summary[p] = {k: float(np.mean([a[k] for a in aggs])) for k in aggs[0]}
    (out / "report.json").write_text(json.dumps(
        {"master_seed": master, "config": dump_config(cfg), "summary": summary, "runs": reports},
        sort_keys=True, indent=1))
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.bound:
            print(repr(competitive_bound(_parse_bound(args.bound))))
            return EXIT_OK
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, rng_seed=args.seed))
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        policies = [p.strip().lower() for p in args.policy.split(",") if p.strip()]
        if not policies:
            raise ConfigError("no policy given")
        for p in policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}; choose from {', '.join(POLICIES)}")
        if args.reps < 1:
            raise ConfigError("--reps must be >= 1")
        spec = parse_sweep(args.sweep, args.reps, cfg) if args.sweep else None
        traces = (load_trace_dir(args.traces, cfg.scenario.workload_sample_period_s, cfg.sim.interval_s)
                  if args.traces else None)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as e:
        print(f"trace error: {e}", file=sys.stderr)
        return EXIT_TRACE

    out = Path(args.out)
    master = cfg.sim.rng_seed
    try:
        out.mkdir(parents=True, exist_ok=True)
        if spec is None:
            summary = _single_run(cfg, policies, args.reps, master, traces, out)
            for p, agg in summary.items():
                print(f"{p:5s} delay={agg['overall_delay_ms']:.2f}ms cost={agg['total_migration_cost_km']:.2f}km "
                      f"overloaded={agg['mean_overloaded_servers']:.2f}")
            return EXIT_OK
        with open(out / "metrics.csv", "w", newline="") as fh:
            rows = run_sweep(spec, policies, master, traces, sink=fh, jobs=args.jobs)
        for m in METRICS:
            (out / f"figure_{m}.csv").write_text(emit_plot_data(rows, m))
        (out / "report.json").write_text(json.dumps(
            {"master_seed": master, "sweep": {"variable": spec.variable, "values": list(spec.values),
                                              "repetitions": spec.repetitions},
             "config": dump_config(cfg), "rows": rows}, sort_keys=True, indent=1))
        print(f"{len(rows)} runs written to {out}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as e:
        print(f"trace error: {e}", file=sys.stderr)
        return EXIT_TRACE
    except Exception as e:  # noqa: BLE001 - any engine failure maps to one exit code
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
