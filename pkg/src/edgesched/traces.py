"""Trace ingestion, synthetic world generation and rush-hour extraction."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .model import (
    BaseStation,
    ConfigError,
    EdgeServer,
    EdgeService,
    GeoPoint,
    MobileUser,
    MobilityTrace,
    TraceError,
    project,
    unproject,
)

log = logging.getLogger(__name__)

SERVER_CORE_MIPS = (2000.0, 3000.0, 4000.0)
SERVER_CORES = 8
SERVICE_MIPS = (1000.0, 1500.0, 2000.0, 2500.0)
SF_CENTER = GeoPoint(37.7793, -122.4192)


@dataclass
class TraceBundle:
    stations: list
    servers: list
    users: list
    services: list
    start_time: float = 0.0
    # (south-west, north-east) corners; users outside are idle for that interval
    area: Optional[tuple] = None

    def __post_init__(self):
        svc_ids = {s.id for s in self.services}
        for u in self.users:
            if u.service_id not in svc_ids:
                raise TraceError(f"user {u.id} has no workload trace")

    @property
    def workloads(self) -> dict:
        return {s.id: s.workload_trace for s in self.services}

    @property
    def ref_lat(self) -> float:
        return float(np.mean([s.location.lat for s in self.stations]))


@dataclass
class RushHourSelection:
    center: GeoPoint
    half_side_m: float
    selected_station_ids: set
    selected_user_ids: set
    window: tuple  # (start interval, end interval), end exclusive, relative to origin_time
    origin_time: float = 0.0
    inertia_history: list = field(default_factory=list)


def _is_header(row, numeric_cols) -> bool:
    """A first row is a header when none of its must-be-numeric columns parse."""
    for c in numeric_cols:
        try:
            float(row[c])
            return False
        except (ValueError, IndexError):
            pass
    return True


def _rows(path, numeric_cols=(0,)):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if rows and _is_header(rows[0][1], numeric_cols):
        rows = rows[1:]
    if not rows:
        raise TraceError(f"{path}: empty dataset")
    return rows


def load_station_csv(path) -> list:
    """Read ``id,lat,lng`` rows; every station carries one co-located server with the same id."""
    stations, seen = [], set()
    for lineno, row in _rows(path, (0, 1, 2)):
        try:
            sid = int(row[0])
            loc = GeoPoint(float(row[1]), float(row[2]))
        except (ValueError, IndexError) as e:
            raise TraceError(f"{path}:{lineno}: malformed station row {row!r}") from e
        if sid in seen:
            raise TraceError(f"{path}:{lineno}: duplicate station id {sid}")
        seen.add(sid)
        stations.append(BaseStation(sid, loc, sid))
    return stations


def write_station_csv(path, stations: Sequence[BaseStation]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lng"])
        for s in stations:
            w.writerow([s.id, repr(s.location.lat), repr(s.location.lng)])


def load_mobility_csv(path) -> list:
    """Read ``taxi_id,lat,lng,occupancy,timestamp`` rows into one trace per taxi.

    Traces come back ordered by taxi id; each trace's ``key`` is the taxi id.
    """
    per_taxi: dict = {}
    for lineno, row in _rows(path, (1, 2, 4)):
        try:
            key = row[0].strip()
            loc = GeoPoint(float(row[1]), float(row[2]))
            ts = float(row[4])
        except (ValueError, IndexError) as e:
            raise TraceError(f"{path}:{lineno}: malformed mobility row {row!r}") from e
        per_taxi.setdefault(key, []).append((ts, loc))
    traces = []
    for key in sorted(per_taxi, key=_natural_key):
        samples = sorted(per_taxi[key], key=lambda s: s[0])  # stable: first occurrence wins
        kept = []
        for ts, loc in samples:
            if kept and kept[-1][0] == ts:
                if kept[-1][1] != loc:
                    log.warning("taxi %s: conflicting samples at t=%s, keeping the first", key, ts)
                continue
            kept.append((ts, loc))
        traces.append(MobilityTrace(tuple(kept), key=key))
    return traces


def _natural_key(k: str):
    return (0, int(k), "") if k.lstrip("-").isdigit() else (1, 0, k)


def write_mobility_csv(path, traces: Sequence[MobilityTrace]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["taxi_id", "lat", "lng", "occupancy", "timestamp"])
        for i, tr in enumerate(traces):
            key = tr.key if tr.key is not None else str(i)
            for ts, loc in tr.samples:
                w.writerow([key, repr(loc.lat), repr(loc.lng), 0, repr(ts)])


def load_workload_dir(path, sample_period_s: float = 300.0, interval_s: float = 60.0,
                      horizon_intervals: Optional[int] = None) -> list:
    """PlanetLab-style directory: one file per VM, one integer CPU percentage per line.

    Each sample is held for ``sample_period_s`` and re-gridded onto ``interval_s``.
    """
    files = sorted(p for p in Path(path).iterdir() if p.is_file())
    if not files:
        raise TraceError(f"{path}: empty dataset")
    out = []
    for f in files:
        try:
            vals = [float(x) / 100.0 for x in f.read_text().split()]
        except ValueError as e:
            raise TraceError(f"{f}: non-numeric utilization sample") from e
        if not vals:
            continue
        n = horizon_intervals or int(len(vals) * sample_period_s / interval_s)
        idx = np.minimum((np.arange(n) * interval_s // sample_period_s).astype(int), len(vals) - 1)
        out.append([min(max(vals[i], 0.0), 1.0) for i in idx])
    if not out:
        raise TraceError(f"{path}: empty dataset")
    return out


def random_walk_workloads(rng: np.random.Generator, n_services: int, n_intervals: int,
                          low: float = 0.1, high: float = 0.6, step: float = 0.05) -> np.ndarray:
    """Utilization traces in [0, 1] from a reflected Gaussian random walk, shape (n_intervals, n_services)."""
    w = np.empty((max(n_intervals, 1), n_services))
    w[0] = rng.uniform(low, high, n_services)
    for t in range(1, len(w)):
        x = w[t - 1] + rng.normal(0.0, step, n_services)
        x = np.abs(x)
        w[t] = np.where(x > 1.0, 2.0 - x, x)
    return w[:n_intervals]


def _servers_for(stations, rng, core_mips=SERVER_CORE_MIPS, cores=SERVER_CORES) -> list:
    per_core = rng.choice(core_mips, size=len(stations))
    return [EdgeServer(id=s.edge_server_id, base_station_id=s.id,
                       capacity_mips=float(c * cores)) for s, c in zip(stations, per_core)]


def _services_for(n, workloads, rng, service_mips=SERVICE_MIPS):
    mips = rng.choice(service_mips, size=n)
    return [EdgeService(id=i, user_id=i, requested_mips=float(mips[i]),
                        workload_trace=[float(x) for x in workloads[:, i]]) for i in range(n)]


def synth_world(n_stations: int, n_users: int, horizon_intervals: int = 180, seed: int = 0,
                center: GeoPoint = SF_CENTER, side_m: float = 4000.0, interval_s: float = 60.0,
                n_hotspots: int = 3, hotspot_share: float = 0.6, hotspot_sigma_m: float = 350.0,
                speed_mps: tuple = (2.0, 12.0), workload_range: tuple = (0.1, 0.6),
                server_core_mips=SERVER_CORE_MIPS, server_cores: int = SERVER_CORES,
                service_mips=SERVICE_MIPS) -> TraceBundle:
    """Seeded desk-scale world: uniform stations, random-waypoint users drawn toward a few hotspots."""
    if n_stations < 1:
        raise ConfigError("need at least one station")
    if n_users < 1:
        raise ConfigError("need at least one user")
    rng = np.random.default_rng(seed)
    half = side_m / 2.0
    cx, cy = project(center, center.lat)

    sxy = rng.uniform(-half, half, size=(n_stations, 2))
    stations = [BaseStation(i, unproject(cx + x, cy + y, center.lat), i) for i, (x, y) in enumerate(sxy)]
    servers = _servers_for(stations, rng, server_core_mips, server_cores)

    hotspots = rng.uniform(-0.6 * half, 0.6 * half, size=(n_hotspots, 2))

    def waypoint(k):
        pts = rng.uniform(-half, half, size=(k, 2))
        if n_hotspots:
            hot = rng.random(k) < hotspot_share
            h = hotspots[rng.integers(n_hotspots, size=k)]
            pts = np.where(hot[:, None], h + rng.normal(0, hotspot_sigma_m, size=(k, 2)), pts)
        return np.clip(pts, -half, half)

    n_steps = max(horizon_intervals, 1)
    pos = np.empty((n_steps, n_users, 2))
    cur = waypoint(n_users)
    target = waypoint(n_users)
    speed = rng.uniform(*speed_mps, size=n_users)
    for t in range(n_steps):
        pos[t] = cur
        budget = speed * interval_s
        gap = target - cur
        dist = np.hypot(gap[:, 0], gap[:, 1])
        arrive = dist <= budget
        frac = np.where(arrive, 1.0, budget / np.maximum(dist, 1e-9))
        cur = cur + gap * frac[:, None]
        if arrive.any():
            k = int(arrive.sum())
            target[arrive] = waypoint(k)
            speed[arrive] = rng.uniform(*speed_mps, size=k)

    users = []
    for i in range(n_users):
        samples = tuple((t * interval_s, unproject(cx + pos[t, i, 0], cy + pos[t, i, 1], center.lat))
                        for t in range(n_steps))
        users.append(MobileUser(i, MobilityTrace(samples, key=str(i)), i))
    workloads = random_walk_workloads(rng, n_users, n_steps, *workload_range)
    services = _services_for(n_users, workloads, rng, service_mips)
    sw = unproject(cx - half, cy - half, center.lat)
    ne = unproject(cx + half, cy + half, center.lat)
    return TraceBundle(stations, servers, users, services, 0.0, (sw, ne))


def lloyd_kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd iterations from k-means++ seeds; returns (centers, labels, inertia per iteration)."""
    points = np.asarray(points, dtype=float)
    if len(points) < k:
        raise ValueError(f"{len(points)} points cannot form {k} clusters")
    k = min(k, len(np.unique(points, axis=0)))
    centers, _ = kmeans_plusplus(points, k, random_state=seed % 2**32)
    history = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        new = np.array([points[labels == c].mean(0) if np.any(labels == c) else centers[c]
                        for c in range(k)])
        shift = float(np.max(np.hypot(*(new - centers).T)))
        centers = new
        if shift <= tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(1)
    history.append(float(d2[np.arange(len(points)), labels].sum()))
    return centers, labels, history


def kmeans_rush_hour(traces: Sequence[MobilityTrace], k: int, stations: Sequence[BaseStation],
                     seed: int = 0, half_side_m: float = 2000.0, window_s: float = 3 * 3600.0,
                     interval_s: float = 60.0) -> RushHourSelection:
    """Densest-cluster square plus the window holding the most distinct users inside it."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not traces or not any(len(t) for t in traces):
        raise ValueError("no trace samples")
    ref_lat = float(np.mean([loc.lat for t in traces for _, loc in t.samples]))
    owner, ts, xy = [], [], []
    for ui, tr in enumerate(traces):
        for t, loc in tr.samples:
            owner.append(ui)
            ts.append(t)
            xy.append(project(loc, ref_lat))
    owner, ts, xy = np.array(owner), np.array(ts), np.array(xy)

    centers, labels, history = lloyd_kmeans(xy, k, seed)
    sizes = np.bincount(labels, minlength=len(centers))
    cxy = centers[int(np.argmax(sizes))]
    center = unproject(cxy[0], cxy[1], ref_lat)

    def inside(pts):
        return (np.abs(pts[:, 0] - cxy[0]) <= half_side_m) & (np.abs(pts[:, 1] - cxy[1]) <= half_side_m)

    sel_st = set()
    if stations:
        sxy = np.array([project(s.location, ref_lat) for s in stations]).reshape(-1, 2)
        sel_st = {s.id for s, ok in zip(stations, inside(sxy)) if ok}

    t0 = float(ts.min())
    n_bins = int((ts.max() - t0) // interval_s) + 1
    wbins = max(1, int(round(window_s / interval_s)))
    mask = inside(xy)
    hits = np.zeros((len(traces), n_bins), dtype=np.int32)
    np.add.at(hits, (owner[mask], ((ts[mask] - t0) // interval_s).astype(int)), 1)
    csum = np.concatenate([np.zeros((len(traces), 1), dtype=np.int64), np.cumsum(hits, 1)], 1)
    n_starts = max(1, n_bins - wbins + 1)
    starts = np.arange(n_starts)
    ends = np.minimum(starts + wbins, n_bins)
    present = (csum[:, ends] - csum[:, starts]) > 0
    counts = present.sum(0)
    best = int(np.argmax(counts))
    users = {i for i in np.flatnonzero(present[:, best])}
    return RushHourSelection(center, half_side_m, sel_st, users, (best, best + wbins), t0, history)


def bundle_from_selection(stations: Sequence[BaseStation], traces: Sequence[MobilityTrace],
                          selection: RushHourSelection, seed: int = 0, interval_s: float = 60.0,
                          workloads: Optional[list] = None, server_core_mips=SERVER_CORE_MIPS,
                          server_cores: int = SERVER_CORES, service_mips=SERVICE_MIPS) -> TraceBundle:
    """Restrict stations and users to a rush-hour selection and attach servers and services."""
    rng = np.random.default_rng(seed)
    st = [s for s in stations if s.id in selection.selected_station_ids]
    if not st:
        raise TraceError("rush-hour square contains no base stations")
    chosen = sorted(selection.selected_user_ids)
    n_int = selection.window[1] - selection.window[0]
    users = []
    for new_id, ui in enumerate(chosen):
        users.append(MobileUser(new_id, traces[ui], new_id))
    if workloads:
        # round-robin mapping of VM traces onto services
        w = np.array([[workloads[i % len(workloads)][t % len(workloads[i % len(workloads)])]
                       for i in range(len(users))] for t in range(n_int)]).reshape(n_int, len(users))
    else:
        w = random_walk_workloads(rng, len(users), n_int)
    services = _services_for(len(users), w, rng, service_mips)
    ref_lat = float(np.mean([loc.lat for tr in traces for _, loc in tr.samples]))
    cx, cy = project(selection.center, ref_lat)
    h = selection.half_side_m
    area = (unproject(cx - h, cy - h, ref_lat), unproject(cx + h, cy + h, ref_lat))
    start = selection.origin_time + selection.window[0] * interval_s
    return TraceBundle(st, _servers_for(st, rng, server_core_mips, server_cores), users, services, start, area)


def densify_workloads(bundle: TraceBundle, multiplier: int) -> TraceBundle:
    """Bundle co-deployed services: every requested MIPS is multiplied, utilization traces unchanged."""
    if multiplier < 1 or int(multiplier) != multiplier:
        raise ValueError("multiplier must be a positive integer")
    out = copy.deepcopy(bundle)
    for s in out.services:
        s.requested_mips *= multiplier
    return out


def station_density_per_km2(bundle: TraceBundle) -> float:
    sw, ne = bundle.area
    ref = 0.5 * (sw.lat + ne.lat)
    x0, y0 = project(sw, ref)
    x1, y1 = project(ne, ref)
    return len(bundle.stations) / (abs(x1 - x0) * abs(y1 - y0) / 1e6)


__all__ = [
    "TraceBundle", "RushHourSelection", "load_station_csv", "write_station_csv",
    "load_mobility_csv", "write_mobility_csv", "load_workload_dir", "synth_world",
    "lloyd_kmeans", "kmeans_rush_hour", "bundle_from_selection", "densify_workloads",
    "random_walk_workloads", "station_density_per_km2",
]
