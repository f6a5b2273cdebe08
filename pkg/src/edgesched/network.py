"""Delay and cost arithmetic: wireless uplink, backhaul forwarding, computation, migration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components, csgraph_from_dense, dijkstra

from .model import (
    BaseStation,
    ConfigError,
    EdgeServer,
    EdgeService,
    MigrationRecord,
    MobileUser,
    SimConfig,
    WirelessChannelParams,
    distance_m,
    project,
)

log = logging.getLogger(__name__)


def station_xy(stations: Sequence[BaseStation], ref_lat: float | None = None) -> np.ndarray:
    if ref_lat is None:
        ref_lat = float(np.mean([s.location.lat for s in stations])) if stations else 0.0
    return np.array([project(s.location, ref_lat) for s in stations], dtype=float).reshape(-1, 2)


def knn_adjacency(xy: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbour adjacency; components are bridged by their closest pair."""
    n = len(xy)
    adj = np.zeros((n, n), dtype=bool)
    if n <= 1:
        return adj
    if k >= n:
        raise ConfigError(f"knn_k={k} must be smaller than the station count {n}")
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    np.fill_diagonal(d, np.inf)
    # stable sort so equidistant neighbours resolve by index
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    adj[rows, nbrs.ravel()] = True
    adj |= adj.T
    while True:
        ncomp, labels = connected_components(adj, directed=False)
        if ncomp == 1:
            return adj
        # join component 0 to its nearest foreign node
        inside = labels == 0
        sub = d[np.ix_(inside, ~inside)]
        a, b = np.unravel_index(np.argmin(sub), sub.shape)
        i = np.flatnonzero(inside)[a]
        j = np.flatnonzero(~inside)[b]
        adj[i, j] = adj[j, i] = True


@dataclass
class DelayMatrix:
    interval: int
    station_ids: list
    direct_delay_ms: np.ndarray  # inf where no direct link
    _paths: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def L(self) -> int:
        return len(self.station_ids)

    def index(self, station_id) -> int:
        try:
            return self.station_ids.index(station_id)
        except ValueError:
            raise KeyError(f"station {station_id} not in delay matrix") from None

    def all_pairs(self) -> np.ndarray:
        """All-pairs shortest forwarding delay (ms), cached."""
        if self._paths is None:
            if self.L:
                g = csgraph_from_dense(self.direct_delay_ms, null_value=np.inf)
                self._paths = dijkstra(g, directed=False)
            else:
                self._paths = np.zeros((0, 0))
        return self._paths


def regenerate_delay_matrix(stations: Sequence[BaseStation], config: SimConfig,
                            rng: np.random.Generator, interval: int = 0,
                            adjacency: np.ndarray | None = None) -> DelayMatrix:
    """Draw a fresh link-delay matrix over the kNN backhaul graph.

    Links are visited in row-major upper-triangle order and each consumes one
    uniform draw, so a seeded ``rng`` reproduces the matrix exactly.
    """
    if not stations:
        raise ConfigError("need at least one base station")
    n = len(stations)
    if adjacency is None:
        adjacency = knn_adjacency(station_xy(stations), config.knn_k)
    iu, ju = np.nonzero(np.triu(adjacency, 1))
    delays = rng.uniform(config.link_delay_min_ms, config.link_delay_max_ms, size=len(iu))
    m = np.full((n, n), np.inf)
    np.fill_diagonal(m, 0.0)
    m[iu, ju] = delays
    m[ju, iu] = delays
    return DelayMatrix(interval, [s.id for s in stations], m)


def forwarding_delay(matrix: DelayMatrix, src, dst) -> float:
    """Minimum-delay path between two stations over the backhaul (ms)."""
    i, j = matrix.index(src), matrix.index(dst)
    if i == j:
        return 0.0
    d = float(matrix.all_pairs()[i, j])
    if not np.isfinite(d):
        raise RuntimeError(f"station {dst} unreachable from {src}")
    return d


def transmission_rate(channel: WirelessChannelParams, transmit_power_w, distance):
    """Shannon rate (bit/s) with log-distance path loss ``a + b*log10(d_km)`` in dB.

    Distances below 1 m are clamped to 1 m (user co-located with its station).
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d < 1.0):
        log.debug("clamping %d sub-meter uplink distance(s) to 1 m", int(np.sum(d < 1.0)))
        d = np.maximum(d, 1.0)
    gain_db = channel.pathloss_a + channel.pathloss_b * np.log10(d / 1000.0)
    gain = 10.0 ** (gain_db / 10.0)
    rate = channel.bandwidth_hz * np.log2(1.0 + transmit_power_w / (gain * channel.noise_power_w))
    return float(rate) if rate.ndim == 0 else rate


def uplink_delay_ms(channel: WirelessChannelParams, transmit_power_w, distance,
                    task_size_mi, bits_per_instruction: float = 8.0):
    bits = np.asarray(task_size_mi, dtype=float) * bits_per_instruction
    return bits / transmission_rate(channel, transmit_power_w, distance) * 1000.0


def communication_delay(user: MobileUser, current_bs: BaseStation, serving_bs: BaseStation,
                        matrix: DelayMatrix, channel: WirelessChannelParams, t: float,
                        bits_per_instruction: float = 8.0) -> float:
    """Uplink time to the current station plus forwarding to the serving station (ms)."""
    d = distance_m(user.trace.position_at(t), current_bs.location)
    up = uplink_delay_ms(channel, user.transmit_power_w, d, user.task_size_mi, bits_per_instruction)
    return float(up) + forwarding_delay(matrix, current_bs.id, serving_bs.id)


def allocated_mips(requested, demand_total, capacity):
    """MIPS granted to a task: its full request, or a proportional share once the total exceeds capacity."""
    requested = np.asarray(requested, dtype=float)
    scale = np.where(demand_total > capacity, capacity / np.maximum(demand_total, 1e-300), 1.0)
    return requested * scale


def computation_delay(service: EdgeService, server: EdgeServer, co_hosted: Sequence[EdgeService],
                      interval: int, task_size_mi: float = 60.0, by_demand: bool = False) -> float:
    """Execution time (ms) of one task of ``service`` at ``interval``.

    ``co_hosted`` excludes the service itself. When the summed requested MIPS
    exceed capacity every task is slowed by the same factor. With
    ``by_demand`` the sum is over utilization times requested MIPS instead.
    """
    group = [service, *co_hosted]
    if by_demand:
        total = sum(s.workload_trace[interval] * s.requested_mips for s in group)
    else:
        total = sum(s.requested_mips for s in group)
    w = float(allocated_mips(service.requested_mips, total, server.capacity_mips))
    if w <= 0:
        raise ValueError(f"service {service.id} gets no CPU on server {server.id}")
    return task_size_mi / w * 1000.0


def migration_delay(source_bs, dest_bs, config: SimConfig) -> float:
    return 0.0 if source_bs == dest_bs else config.migration_downtime_ms


def migration_cost(record: MigrationRecord, stations: Mapping[int, BaseStation]) -> float:
    """Distance (km) between the source and destination servers' stations.

    ``stations`` is keyed by server id.
    """
    try:
        a = stations[record.source_server_id]
        b = stations[record.dest_server_id]
    except KeyError as e:
        raise ConfigError(f"unknown server {e.args[0]} in migration record") from None
    return distance_m(a.location, b.location) / 1000.0
