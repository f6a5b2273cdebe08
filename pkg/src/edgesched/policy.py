"""Scheduling policies: probabilistic delay/mobility-aware (PDMA) and the NF, NM, Top-K baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import ConfigError, PolicyParams
from .world import PlacementFailure, World


class Verdict(Enum):
    ACCEPT = "accept"
    REJECT = "reject"


SCALE_UP = "scale_up"


@dataclass(frozen=True)
class AssignmentDecision:
    server: int
    verdict: Verdict
    trial_probability: float
    rng_draw: float


def assignment_probability(x, p: float, T: float):
    """Acceptance probability ``x**p (T - x) / M_p``; zero outside ``[0, T]``, peak 1 at ``pT/(p+1)``."""
    if p <= 0 or not 0 < T <= 1:
        raise ConfigError("need p > 0 and 0 < T <= 1")
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, 0.0, T)
    log_mp = p * math.log(p) - (p + 1) * math.log(p + 1) + (p + 1) * math.log(T)
    val = xc ** p * (T - xc) / math.exp(log_mp)
    val = np.where((x < 0) | (x > T), 0.0, np.clip(val, 0.0, 1.0))
    return float(val) if val.ndim == 0 else val


def high_migration_probability(x, T_h: float, beta: float):
    """Migration probability ``(1 + (x - 1)/(1 - T_h))**beta``, clamped to 0 below ``T_h`` and 1 above 1."""
    if T_h >= 1:
        raise ConfigError("T_h must be < 1 for the migration function")
    if beta <= 0:
        raise ConfigError("beta must be positive")
    x = np.clip(np.asarray(x, dtype=float), T_h, 1.0)
    base = np.clip(1.0 + (x - 1.0) / (1.0 - T_h), 0.0, 1.0)
    val = base ** beta
    return float(val) if val.ndim == 0 else val


def scale_up(world: World, r: int) -> int:
    """Power on an idle server: the one at the user's station, else the one nearest to it."""
    idle = ~world.powered & world.admissible(r)
    if not idle.any():
        raise PlacementFailure(f"no idle server left for service {r}")
    here = world.cur_station[r]
    for j in world.nearest_servers(world.st_xy[here]):
        if idle[j]:
            world.powered[j] = True
            return int(j)
    raise AssertionError("unreachable")


def pdma_assign(world: World, r: int, rng: np.random.Generator, params: PolicyParams,
                initial: bool = False, exclude=(), decisions: list | None = None):
    """One round of probabilistic assignment for service ``r``.

    Only powered servers within ``distance_threshold_m`` of the user's current
    station and under the delay threshold take part. Every server consumes one
    uniform draw, in ascending index order, whether or not it takes part.
    Returns a server index or ``SCALE_UP``.
    """
    if initial:
        world.svc_xy[r] = world.xy[r]
    draws = rng.random(world.J)
    util = world.utilization()
    prob = assignment_probability(util, params.assignment_shape_p, params.assignment_threshold_T)
    eligible = (world.powered & (world.candidate_comm_delays(r) < params.delay_threshold_ms)
                & world.within_reach(r, params.distance_threshold_m) & world.admissible(r))
    if len(exclude):
        eligible[list(exclude)] = False
    accept = eligible & (draws < prob)
    if decisions is not None:
        for j in np.flatnonzero(eligible):
            decisions.append(AssignmentDecision(int(j), Verdict.ACCEPT if accept[j] else Verdict.REJECT,
                                                float(prob[j]), float(draws[j])))
    cands = np.flatnonzero(accept)
    if len(cands) == 0:
        return SCALE_UP
    loc = world.svc_xy[r]
    dist = np.hypot(world.st_xy[cands, 0] - loc[0], world.st_xy[cands, 1] - loc[1])
    return int(cands[np.lexsort((cands, dist))[0]])


class SchedulingPolicy:
    """Common surface: ``assign`` places one service, ``migrate_pass`` runs once per interval.

    ``migrate_pass`` mutates the world and returns ``(service, source, dest)``
    triples for every service that changed server; failed reassignments are put
    back on their source and counted in ``failures``.
    """

    name = "base"

    def __init__(self, params: PolicyParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self.failures = 0

    def assign(self, world: World, r: int, initial: bool = False, exclude=()) -> int:
        raise NotImplementedError

    def migrate_pass(self, world: World) -> list:
        return []

    def _reassign(self, world: World, evicted: list, exclude=()) -> list:
        moves = []
        for r, src in evicted:
            try:
                dst = self.assign(world, r, exclude=exclude)
            except PlacementFailure:
                self.failures += 1
                dst = src
            world.place(r, dst)
            if dst != src:
                moves.append((r, src, dst))
        return moves

    def _delay_violations(self, world: World) -> list:
        """Evict every active service whose delay reaches the threshold, scanning servers in order."""
        td = self.params.delay_threshold_ms
        delays = world.comm_delays()
        hit = np.flatnonzero(world.active & (world.placement >= 0) & (delays >= td))
        return [(int(r), world.remove(int(r))) for r in sorted(hit, key=lambda r: (world.placement[r], r))]


class PDMAPolicy(SchedulingPolicy):
    name = "pdma"

    def assign(self, world, r, initial=False, exclude=()):
        j = pdma_assign(world, r, self.rng, self.params, initial=initial, exclude=exclude)
        if j == SCALE_UP:
            j = scale_up(world, r)
        return j

    def migrate_pass(self, world):
        moves = self._reassign(world, self._delay_violations(world))
        evicted, drained = self._drain_overloaded(world)
        moves += self._reassign(world, evicted, exclude=drained)
        return moves

    def _drain_overloaded(self, world):
        thr = world.config.overload_threshold
        evicted, drained = [], []
        util = world.utilization()
        for j in np.flatnonzero(world.powered & (util > thr)):
            prob = high_migration_probability(util[j], self.params.migration_threshold_Th,
                                              self.params.migration_shape_beta)
            if not self.rng.random() < prob:
                continue
            drained.append(int(j))
            hosted = world.hosted(j)
            # largest CPU consumer first, ties by service index
            order = hosted[np.lexsort((hosted, -world.svc_cpu(hosted)))]
            for r in order:
                if world.load[j] / world.cap[j] <= thr:
                    break
                evicted.append((int(r), world.remove(int(r))))
        return evicted, drained


class NearestFirstPolicy(SchedulingPolicy):
    """Keeps every service on the server at its user's current station."""

    name = "nf"

    def assign(self, world, r, initial=False, exclude=()):
        ok = world.admissible(r)
        if len(exclude):
            ok[list(exclude)] = False
        here = world.cur_station[r]
        if ok[here]:
            return int(here)
        for j in world.nearest_servers(world.xy[r]):
            if ok[j]:
                return int(j)
        raise PlacementFailure(f"no admissible server for service {r}")

    def migrate_pass(self, world):
        moves = []
        for r in np.flatnonzero(world.active & (world.placement >= 0)):
            src = int(world.placement[r])
            if src == world.cur_station[r]:
                continue
            world.remove(r)
            moves += self._reassign(world, [(int(r), src)])
        return moves


class NeverMigratePolicy(NearestFirstPolicy):
    name = "nm"

    def migrate_pass(self, world):
        return []


class TopKPolicy(SchedulingPolicy):
    """Uniform pick among the ``ceil(fraction * J)`` busiest admissible servers."""

    name = "topk"

    def assign(self, world, r, initial=False, exclude=()):
        ok = world.admissible(r)
        if len(exclude):
            ok[list(exclude)] = False
        cands = np.flatnonzero(ok)
        if len(cands) == 0:
            raise PlacementFailure(f"no admissible server for service {r}")
        util = world.utilization()[cands]
        ranked = cands[np.lexsort((cands, -util))]
        k = max(1, math.ceil(self.params.topk_fraction * world.J))
        top = ranked[:k]
        return int(top[self.rng.integers(len(top))])

    def migrate_pass(self, world):
        return self._reassign(world, self._delay_violations(world))


POLICIES = {cls.name: cls for cls in (PDMAPolicy, NearestFirstPolicy, NeverMigratePolicy, TopKPolicy)}


def make_policy(name: str, params: PolicyParams, rng: np.random.Generator) -> SchedulingPolicy:
    try:
        return POLICIES[name.lower()](params, rng)
    except KeyError:
        raise ConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}") from None
