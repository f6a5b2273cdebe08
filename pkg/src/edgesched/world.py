"""Mutable world state for one simulation run, held as flat numpy arrays.

Servers and stations share an index: server ``j`` sits at station ``j``.
Services and users share an index too: service ``r`` belongs to user ``r``.
"""

from __future__ import annotations

import numpy as np

from .model import ConfigError, MigrationRecord, SimConfig, distance_m, project
from .network import DelayMatrix, uplink_delay_ms


class PlacementFailure(RuntimeError):
    """No server could take the service and the spare pool is exhausted."""


class World:
    def __init__(self, bundle, config: SimConfig):
        self.config = config
        self.stations = list(bundle.stations)
        L = len(self.stations)
        if L == 0:
            raise ConfigError("world has no base stations")
        st_index = {s.id: i for i, s in enumerate(self.stations)}
        if len(st_index) != L:
            raise ConfigError("duplicate base-station ids")
        by_server = {s.id: s for s in bundle.servers}
        servers = []
        for s in self.stations:
            try:
                servers.append(by_server[s.edge_server_id])
            except KeyError:
                raise ConfigError(f"station {s.id} has no edge server {s.edge_server_id}") from None
        if len(servers) != len(bundle.servers):
            raise ConfigError("every edge server must sit at exactly one base station")
        self.server_ids = [s.id for s in servers]
        self.station_ids = [s.id for s in self.stations]
        self.J = L

        self.ref_lat = bundle.ref_lat
        self.st_xy = np.array([project(s.location, self.ref_lat) for s in self.stations]).reshape(-1, 2)
        self.cap = np.array([s.capacity_mips for s in servers], dtype=float)
        self.cap_ram = np.array([s.capacity_ram for s in servers], dtype=float)
        if np.any(self.cap <= 0):
            raise ConfigError("server capacity must be positive")
        self.powered = np.zeros(L, dtype=bool)

        users = sorted(bundle.users, key=lambda u: u.id)
        svc_by_id = {s.id: s for s in bundle.services}
        self.user_ids = [u.id for u in users]
        self.services = [svc_by_id[u.service_id] for u in users]
        self.service_ids = [s.id for s in self.services]
        R = self.R = len(users)
        self.req = np.array([s.requested_mips for s in self.services], dtype=float)
        self.ram = np.array([s.requested_ram for s in self.services], dtype=float)
        self.task_mi = np.array([u.task_size_mi for u in users], dtype=float)
        self.tx_power = np.array([u.transmit_power_w for u in users], dtype=float)
        if np.any(self.req <= 0):
            raise ConfigError("service requested MIPS must be positive")

        P = config.horizon_intervals
        short = [s.id for s in self.services if len(s.workload_trace) < P]
        if short:
            raise ConfigError(f"workload traces shorter than the horizon for services {short[:5]}")
        self.workload = np.array([s.workload_trace[:P] for s in self.services], dtype=float).T.reshape(P, R)

        self.user_xy, self.user_active = self._grid_positions(users, bundle, P)

        self.placement = np.full(R, -1, dtype=int)
        self.svc_xy = np.zeros((R, 2))
        self.reqsum = np.zeros(L)
        self.ramsum = np.zeros(L)
        self.load = np.zeros(L)

        self.t = -1
        self.fwd = np.zeros((L, L))
        self.cur_station = np.full(R, -1, dtype=int)
        self.uplink = np.zeros(R)
        self.active = np.zeros(R, dtype=bool)
        self.xy = np.zeros((R, 2))

    def _grid_positions(self, users, bundle, P):
        R = len(users)
        xy = np.zeros((P, R, 2))
        active = np.ones((P, R), dtype=bool)
        times = bundle.start_time + np.arange(P) * self.config.interval_s
        for r, u in enumerate(users):
            samples = u.trace.samples
            if not samples:
                raise ConfigError(f"user {u.id} has an empty trace")
            ts = np.array([s[0] for s in samples])
            pts = np.array([project(s[1], self.ref_lat) for s in samples])
            idx = np.maximum(np.searchsorted(ts, times, side="right") - 1, 0)
            xy[:, r] = pts[idx]
        if bundle.area is not None:
            sw, ne = bundle.area
            x0, y0 = project(sw, self.ref_lat)
            x1, y1 = project(ne, self.ref_lat)
            active = ((xy[..., 0] >= x0 - 1e-6) & (xy[..., 0] <= x1 + 1e-6)
                      & (xy[..., 1] >= y0 - 1e-6) & (xy[..., 1] <= y1 + 1e-6))
        return xy, active

    # per-interval state

    def begin_interval(self, t: int, matrix: DelayMatrix):
        self.t = t
        self.fwd = matrix.all_pairs()
        self.xy = self.user_xy[t]
        self.active = self.user_active[t]
        self._update_stations()
        self._recompute_load()

    def _update_stations(self):
        """Keep each user's station while within the distance threshold, else hand over to the nearest."""
        thr = self.config.policy.distance_threshold_m
        d = np.hypot(self.xy[:, None, 0] - self.st_xy[None, :, 0], self.xy[:, None, 1] - self.st_xy[None, :, 1])
        nearest = d.argmin(1)
        cur = self.cur_station
        keep = (cur >= 0) & (d[np.arange(self.R), np.maximum(cur, 0)] <= thr)
        self.cur_station = np.where(keep, cur, nearest)
        dist = d[np.arange(self.R), self.cur_station]
        self.uplink = uplink_delay_ms(self.config.channel, self.tx_power, dist, self.task_mi,
                                      self.config.bits_per_instruction)

    def _recompute_load(self):
        placed = self.placement >= 0
        w = self.workload[self.t] if self.t >= 0 else np.zeros(self.R)
        self.load = np.bincount(self.placement[placed], weights=(w * self.req)[placed], minlength=self.J)

    # placement bookkeeping

    def place(self, r: int, j: int):
        if self.placement[r] >= 0:
            raise RuntimeError(f"service {r} already placed on {self.placement[r]}")
        self.placement[r] = j
        self.reqsum[j] += self.req[r]
        self.ramsum[j] += self.ram[r]
        self.load[j] += self.workload[self.t, r] * self.req[r]
        self.powered[j] = True
        self.svc_xy[r] = self.st_xy[j]

    def remove(self, r: int) -> int:
        j = int(self.placement[r])
        if j < 0:
            raise RuntimeError(f"service {r} is not placed")
        self.placement[r] = -1
        self.reqsum[j] -= self.req[r]
        self.ramsum[j] -= self.ram[r]
        self.load[j] -= self.workload[self.t, r] * self.req[r]
        if not np.any(self.placement == j):
            self.reqsum[j] = self.ramsum[j] = self.load[j] = 0.0
        return j

    def hosted(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.placement == j)

    def utilization(self) -> np.ndarray:
        return self.load / self.cap

    def svc_cpu(self, r) -> np.ndarray:
        return self.workload[self.t, r] * self.req[r]

    def admissible(self, r: int) -> np.ndarray:
        """Servers whose requested MIPS and RAM stay within the admission caps with ``r`` added."""
        extra_req = np.where(self.placement[r] == np.arange(self.J), 0.0, self.req[r])
        extra_ram = np.where(self.placement[r] == np.arange(self.J), 0.0, self.ram[r])
        return ((self.reqsum + extra_req <= self.config.admission_cap * self.cap + 1e-9)
                & (self.ramsum + extra_ram <= self.cap_ram + 1e-9))

    def _shared(self) -> np.ndarray:
        """Per-server total that CPU is shared against: requested MIPS, or demand if so configured."""
        return self.load if self.config.share_cpu_by_demand else self.reqsum

    def candidate_delays(self, r: int) -> np.ndarray:
        """End-to-end delay (ms) service ``r`` would see on each server, counting itself in the sharing."""
        own = self.svc_cpu(r) if self.config.share_cpu_by_demand else self.req[r]
        total = self._shared() + np.where(self.placement[r] == np.arange(self.J), 0.0, own)
        w = self.req[r] * np.where(total > self.cap, self.cap / np.maximum(total, 1e-300), 1.0)
        comp = self.task_mi[r] / w * 1000.0
        return self.uplink[r] + self.fwd[self.cur_station[r]] + comp

    def within_reach(self, r: int, radius_m: float) -> np.ndarray:
        """Servers whose station lies within ``radius_m`` of user ``r``'s current station."""
        here = self.st_xy[self.cur_station[r]]
        return np.hypot(self.st_xy[:, 0] - here[0], self.st_xy[:, 1] - here[1]) <= radius_m

    def candidate_comm_delays(self, r: int) -> np.ndarray:
        """Uplink plus forwarding delay (ms) from user ``r``'s current station to every server."""
        return self.uplink[r] + self.fwd[self.cur_station[r]]

    def comm_delays(self) -> np.ndarray:
        """Uplink plus forwarding (ms) for every placed service; NaN where unplaced."""
        out = np.full(self.R, np.nan)
        placed = self.placement >= 0
        out[placed] = self.uplink[placed] + self.fwd[self.cur_station[placed], self.placement[placed]]
        return out

    def computation_delays(self) -> np.ndarray:
        """Computation delay (ms) of every placed service; NaN where unplaced."""
        out = np.full(self.R, np.nan)
        placed = self.placement >= 0
        j = self.placement[placed]
        total = self._shared()[j]
        w = self.req[placed] * np.where(total > self.cap[j], self.cap[j] / np.maximum(total, 1e-300), 1.0)
        out[placed] = self.task_mi[placed] / w * 1000.0
        return out

    def current_delays(self) -> np.ndarray:
        """Uplink + forwarding + computation (ms) for every placed service; NaN where unplaced."""
        out = self.computation_delays()
        placed = self.placement >= 0
        out[placed] += self.uplink[placed] + self.fwd[self.cur_station[placed], self.placement[placed]]
        return out

    def nearest_servers(self, xy) -> np.ndarray:
        """Server indices ordered by distance to ``xy``, ties by index."""
        d = np.hypot(self.st_xy[:, 0] - xy[0], self.st_xy[:, 1] - xy[1])
        return np.lexsort((np.arange(self.J), d))

    def record(self, r: int, src: int, dst: int) -> MigrationRecord:
        cost = distance_m(self.stations[src].location, self.stations[dst].location) / 1000.0
        return MigrationRecord(self.t, self.service_ids[r], self.server_ids[src], self.server_ids[dst], cost)

    def power_off_idle(self):
        counts = np.bincount(self.placement[self.placement >= 0], minlength=self.J)
        self.powered &= counts > 0

    def check_integrity(self):
        placed = self.placement >= 0
        if np.any(self.placement[placed] >= self.J):
            raise RuntimeError("service placed on unknown server")
        reqsum = np.bincount(self.placement[placed], weights=self.req[placed], minlength=self.J)
        if not np.allclose(reqsum, self.reqsum, rtol=1e-9, atol=1e-6):
            raise RuntimeError("requested-MIPS bookkeeping drifted")
        if np.any(~self.powered[self.placement[placed]]):
            raise RuntimeError("service hosted on a powered-off server")
