"""Swarm simulation: mobility, channel, perception, protocols, metrics."""

from .config import (
    ConfigError,
    ENV_PREFIX,
    PROTOCOLS,
    SWEEP_ENV_PREFIX,
    SimConfig,
    SweepSpec,
    load_config,
)
from .core import (
    Beacon,
    Channel,
    EcEvent,
    MetricsRecord,
    NeighborTrack,
    Perception,
    PolarMeasurement,
    UavNode,
    World,
    build_observation_sets,
    emit_beacon,
    intended_set,
    rssi_range_sample,
    run,
    run_details,
    run_world,
    sense_visual,
    step_mobility,
)

__all__ = [
    "Beacon",
    "Channel",
    "ConfigError",
    "ENV_PREFIX",
    "EcEvent",
    "MetricsRecord",
    "NeighborTrack",
    "Perception",
    "PolarMeasurement",
    "PROTOCOLS",
    "SWEEP_ENV_PREFIX",
    "SimConfig",
    "SweepSpec",
    "UavNode",
    "World",
    "build_observation_sets",
    "emit_beacon",
    "intended_set",
    "load_config",
    "rssi_range_sample",
    "run",
    "run_details",
    "run_world",
    "sense_visual",
    "step_mobility",
]
