"""Trace-driven simulator for scheduling edge services of mobile users across edge servers."""

from .cli import ExperimentConfig, ScenarioParams, SweepSpec, competitive_bound, emit_plot_data, run_sweep
from .model import (
    BaseStation,
    CompetitiveParams,
    ConfigError,
    EdgeServer,
    EdgeService,
    GeoPoint,
    MigrationRecord,
    MobileUser,
    MobilityTrace,
    PolicyParams,
    SimConfig,
    TraceError,
    WirelessChannelParams,
    server_cpu_utilization,
)
from .policy import POLICIES, assignment_probability, high_migration_probability, make_policy
from .sim import MetricsReport, compare_policies, run
from .traces import TraceBundle, densify_workloads, kmeans_rush_hour, synth_world
from .world import PlacementFailure, World

__version__ = "0.1.0"
