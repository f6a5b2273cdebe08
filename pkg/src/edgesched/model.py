"""Domain types shared by the simulator, the policies and the trace loaders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

EARTH_RADIUS_M = 6_371_008.8


class ConfigError(ValueError):
    """Invalid configuration or inconsistent world description."""


class TraceError(ValueError):
    """Unreadable or malformed trace input."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lng: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ConfigError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lng <= 180.0:
            raise ConfigError(f"longitude out of range: {self.lng}")


def project(point: GeoPoint, ref_lat: float, ref_lng: float = 0.0) -> tuple[float, float]:
    """Equirectangular projection to local (x, y) meters around ``ref_lat``."""
    x = math.radians(point.lng - ref_lng) * math.cos(math.radians(ref_lat)) * EARTH_RADIUS_M
    y = math.radians(point.lat) * EARTH_RADIUS_M
    return x, y


def unproject(x: float, y: float, ref_lat: float, ref_lng: float = 0.0) -> GeoPoint:
    lat = math.degrees(y / EARTH_RADIUS_M)
    lng = ref_lng + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(ref_lat))))
    return GeoPoint(lat, lng)


def distance_m(a: GeoPoint, b: GeoPoint) -> float:
    """Projected Euclidean distance in meters (equirectangular, mid-latitude reference)."""
    ref = 0.5 * (a.lat + b.lat)
    ax, ay = project(a, ref)
    bx, by = project(b, ref)
    return math.hypot(ax - bx, ay - by)


@dataclass(frozen=True)
class BaseStation:
    id: int
    location: GeoPoint
    edge_server_id: int


@dataclass
class EdgeServer:
    id: int
    base_station_id: int
    capacity_mips: float
    capacity_ram: float = 80e9
    capacity_storage: float = 10e12
    hosted_service_ids: set = field(default_factory=set)
    powered_on: bool = False


@dataclass(frozen=True)
class MobilityTrace:
    """Timestamped positions; position between samples holds the last sample."""

    samples: tuple
    key: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ts = [s[0] for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise TraceError("trace timestamps must be strictly increasing")

    def __len__(self):
        return len(self.samples)

    def position_at(self, t: float) -> GeoPoint:
        if not self.samples:
            raise TraceError("empty trace")
        # hold-last-sample; before the first sample hold the first one
        lo, hi = 0, len(self.samples)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.samples[mid][0] <= t:
                lo = mid + 1
            else:
                hi = mid
        return self.samples[max(lo - 1, 0)][1]


@dataclass
class MobileUser:
    id: int
    trace: MobilityTrace
    service_id: int
    task_size_mi: float = 60.0
    transmit_power_w: float = 0.5


@dataclass(frozen=True)
class MigrationRecord:
    interval: int
    service_id: int
    source_server_id: int
    dest_server_id: int
    cost: float

    def __post_init__(self):
        if self.source_server_id == self.dest_server_id:
            raise ValueError("migration source and destination must differ")
        if self.cost < 0:
            raise ValueError("migration cost must be nonnegative")


@dataclass
class EdgeService:
    id: int
    user_id: int
    requested_mips: float
    requested_ram: float = 8e9
    workload_trace: list = field(default_factory=list)
    current_server_id: Optional[int] = None
    migration_log: list = field(default_factory=list)


@dataclass(frozen=True)
class WirelessChannelParams:
    bandwidth_hz: float = 20e6
    noise_power_w: float = 2e-13
    pathloss_a: float = 127.0
    pathloss_b: float = 30.0

    def __post_init__(self):
        for name in ("bandwidth_hz", "noise_power_w", "pathloss_a", "pathloss_b"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class PolicyParams:
    assignment_shape_p: float = 1.0
    assignment_threshold_T: float = 0.9
    migration_shape_beta: float = 0.25
    migration_threshold_Th: float = 0.9
    delay_threshold_ms: float = 75.0
    distance_threshold_m: float = 1000.0
    topk_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.assignment_threshold_T <= 1:
            raise ConfigError("assignment threshold T must lie in (0, 1]")
        if not 0 < self.migration_threshold_Th <= 1:
            raise ConfigError("migration threshold T_h must lie in (0, 1]")
        if self.assignment_shape_p <= 0 or self.migration_shape_beta <= 0:
            raise ConfigError("shape parameters must be positive")
        if self.delay_threshold_ms <= 0:
            raise ConfigError("delay threshold must be positive")
        if self.distance_threshold_m <= 0:
            raise ConfigError("distance threshold must be positive")


@dataclass(frozen=True)
class SimConfig:
    interval_s: float = 60.0
    horizon_intervals: int = 180
    migration_downtime_ms: float = 50.0
    rng_seed: int = 0
    overload_threshold: float = 0.9
    link_delay_min_ms: float = 5.0
    link_delay_max_ms: float = 50.0
    knn_k: int = 10
    bits_per_instruction: float = 8.0
    admission_cap: float = 2.0
    failure_penalty_ms: Optional[float] = None  # defaults to 10 x delay threshold
    share_cpu_by_demand: bool = False
    channel: WirelessChannelParams = field(default_factory=WirelessChannelParams)
    policy: PolicyParams = field(default_factory=PolicyParams)

    def __post_init__(self):
        if self.interval_s <= 0:
            raise ConfigError("interval_s must be positive")
        if self.horizon_intervals < 0:
            raise ConfigError("horizon_intervals must be nonnegative")
        if self.link_delay_min_ms > self.link_delay_max_ms or self.link_delay_min_ms < 0:
            raise ConfigError("need 0 <= link_delay_min_ms <= link_delay_max_ms")
        if self.migration_downtime_ms < 0:
            raise ConfigError("migration downtime must be nonnegative")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")

    @property
    def penalty_ms(self) -> float:
        if self.failure_penalty_ms is None:
            return 10.0 * self.policy.delay_threshold_ms
        return self.failure_penalty_ms


@dataclass(frozen=True)
class CompetitiveParams:
    J: int
    R: int
    epsilon: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if self.J < 1 or self.R < 1:
            raise ConfigError("J and R must be >= 1")
        if self.epsilon < 0 or self.delta < 0:
            raise ConfigError("epsilon and delta must be >= 0")


UTILIZATION_CEILING = 1.5


def server_cpu_utilization(server: EdgeServer, services: Mapping[int, EdgeService], interval: int) -> float:
    """CPU utilization of ``server`` at ``interval``, clamped to [0, 1.5] for reporting."""
    load = 0.0
    for sid in sorted(server.hosted_service_ids):
        try:
            svc = services[sid]
        except KeyError:
            raise ConfigError(f"server {server.id} hosts unknown service {sid}") from None
        load += svc.workload_trace[interval] * svc.requested_mips
    return min(max(load / server.capacity_mips, 0.0), UTILIZATION_CEILING)
