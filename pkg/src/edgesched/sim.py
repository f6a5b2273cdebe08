"""Discrete-time engine: one pass per scheduling interval, three headline metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import SimConfig
from .network import knn_adjacency, migration_delay, regenerate_delay_matrix
from .policy import make_policy
from .world import PlacementFailure, World

INTERVAL_FIELDS = ("interval", "requests", "delay_sum_ms", "mean_delay_ms", "migrations_count",
                   "migration_cost_km", "overloaded_servers", "placement_failures")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class IntervalMetrics:
    interval: int
    requests: int
    delay_sum_ms: float
    mean_delay_ms: float
    migrations_count: int
    migration_cost_km: float
    overloaded_servers: int
    placement_failures: int


@dataclass
class MetricsReport:
    policy: str
    per_interval: list = field(default_factory=list)
    migrations: list = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        rows = self.per_interval
        n = sum(r.requests for r in rows)
        return {
            "overall_delay_ms": sum(r.delay_sum_ms for r in rows) / n if n else 0.0,
            "total_migration_cost_km": sum(r.migration_cost_km for r in rows),
            "mean_overloaded_servers": (sum(r.overloaded_servers for r in rows) / len(rows)) if rows else 0.0,
            "total_migrations": sum(r.migrations_count for r in rows),
            "total_placement_failures": sum(r.placement_failures for r in rows),
        }

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "aggregate": self.aggregate,
            "per_interval": [asdict(r) for r in self.per_interval],
            "migrations": [asdict(m) for m in self.migrations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def csv_rows(self) -> list:
        return [{"policy": self.policy, **asdict(r)} for r in self.per_interval]


def reports_to_csv(reports, fh=None) -> str:
    buf = fh or io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("policy",) + INTERVAL_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        w.writerows(rep.csv_rows())
    return buf.getvalue() if fh is None else ""


def run(bundle, config: SimConfig, policy: str, seed: int | None = None, check: bool = True,
        policy_seed: int | None = None) -> MetricsReport:
    """Simulate ``config.horizon_intervals`` intervals of ``bundle`` under the named policy.

    The backhaul delay stream depends only on ``seed`` (default ``config.rng_seed``),
    so every policy sees identical link delays. The policy stream is derived from
    ``(seed, name)`` unless ``policy_seed`` is given.
    """
    seed = config.rng_seed if seed is None else seed
    world = World(bundle, config)
    world_rng = np.random.default_rng(derive_seed(seed, "world"))
    pseed = derive_seed(seed, "policy", policy) if policy_seed is None else policy_seed
    pol = make_policy(policy, config.policy, np.random.default_rng(pseed))
    adjacency = knn_adjacency(world.st_xy, config.knn_k)
    penalty = config.penalty_ms
    report = MetricsReport(pol.name)

    for t in range(config.horizon_intervals):
        matrix = regenerate_delay_matrix(world.stations, config, world_rng, t, adjacency)
        world.begin_interval(t, matrix)
        failures0 = pol.failures

        unplaced_failures = 0
        for r in np.flatnonzero(world.active & (world.placement < 0)):
            try:
                world.place(int(r), pol.assign(world, int(r), initial=True))
            except PlacementFailure:
                unplaced_failures += 1

        moves = pol.migrate_pass(world)

        downtime = np.zeros(world.R)
        cost = 0.0
        for r, src, dst in moves:
            rec = world.record(r, src, dst)
            report.migrations.append(rec)
            cost += rec.cost
            downtime[r] += migration_delay(world.station_ids[src], world.station_ids[dst], config)

        delays = world.current_delays() + downtime
        act = world.active
        placed = world.placement >= 0
        delay_sum = float(delays[act & placed].sum()) + penalty * int(np.sum(act & ~placed))
        n_req = int(act.sum())
        overloaded = int(np.sum(world.powered & (world.utilization() > config.overload_threshold)))
        report.per_interval.append(IntervalMetrics(
            t, n_req, delay_sum, delay_sum / n_req if n_req else 0.0, len(moves), cost, overloaded,
            unplaced_failures + pol.failures - failures0))

        world.power_off_idle()
        if check:
            world.check_integrity()
    return report


def _run_star(args):
    return run(*args)


def compare_policies(bundle, config: SimConfig, policies, jobs: int = 1) -> dict:
    """Run each policy on identical world inputs; policy streams derive from (seed, name)."""
    args = [(bundle, config, p) for p in policies]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_run_star, args))
    else:
        reports = [run(*a) for a in args]
    return {p: rep for p, rep in zip(policies, reports)}
