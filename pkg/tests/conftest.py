import numpy as np
import pytest

from edgesched.model import (
    BaseStation,
    EdgeServer,
    EdgeService,
    GeoPoint,
    MobileUser,
    MobilityTrace,
    SimConfig,
    project,
    unproject,
)
from edgesched.network import DelayMatrix
from edgesched.traces import TraceBundle

REF = GeoPoint(37.0, -122.0)


def at(x_m, y_m):
    """GeoPoint offset from REF by (x, y) meters."""
    cx, cy = project(REF, REF.lat)
    return unproject(cx + x_m, cy + y_m, REF.lat)


def make_bundle(station_xy, user_paths, capacities=None, requested=None, workloads=None,
                interval_s=60.0, area=None):
    """Hand-built world.

    ``user_paths[i]`` is a list of (x, y) positions, one per interval.
    ``workloads[i]`` is a per-interval list, default 0.5 everywhere.
    """
    stations = [BaseStation(i, at(*xy), 100 + i) for i, xy in enumerate(station_xy)]
    capacities = capacities or [16000.0] * len(stations)
    servers = [EdgeServer(100 + i, i, float(c)) for i, c in enumerate(capacities)]
    users, services = [], []
    for i, path in enumerate(user_paths):
        samples = [(t * interval_s, at(*p)) for t, p in enumerate(path)]
        users.append(MobileUser(i, MobilityTrace(samples), 500 + i))
        req = requested[i] if requested else 2000.0
        wl = workloads[i] if workloads else [0.5] * len(path)
        services.append(EdgeService(500 + i, i, float(req), workload_trace=list(wl)))
    return TraceBundle(stations, servers, users, services, 0.0, area)


def fixed_matrix(station_ids, direct):
    m = np.array(direct, dtype=float)
    return DelayMatrix(0, list(station_ids), m)


@pytest.fixture
def cfg():
    return SimConfig(horizon_intervals=3, knn_k=1)


def start_world(bundle, config, direct=None, t=0, seed=0):
    """World positioned at interval ``t``; ``direct`` fixes the link matrix, else it is drawn."""
    from edgesched.network import regenerate_delay_matrix
    from edgesched.world import World

    w = World(bundle, config)
    if direct is None:
        m = regenerate_delay_matrix(w.stations, config, np.random.default_rng(seed), t)
    else:
        m = fixed_matrix(w.station_ids, direct)
    w.begin_interval(t, m)
    return w


class ScriptedRng:
    """Stands in for a Generator: hands out prepared uniform draws and logs the requests."""

    def __init__(self, draws):
        self.draws = list(draws)
        self.calls = []

    def random(self, size=None):
        n = 1 if size is None else size
        out, self.draws = self.draws[:n], self.draws[n:]
        self.calls.append(n)
        return out[0] if size is None else np.array(out)

    def integers(self, n):
        return 0


ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; echoed now and in the terminal summary."""

    def report(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
