"""Simulation configuration: the dataclass, validation, and file/env parsing.

Configuration files are INI-style: a ``[sim]`` section whose keys are
SimConfig field names, and an optional ``[sweep]`` section for the batch
front-end (axis lists over num_uavs / v_max / protocol, repetitions, job
cap).  Any environment variable ``DPIMAP_<FIELD>`` (or ``DPIMAP_SWEEP_<FIELD>``)
overrides the corresponding key.  Unknown sections or keys are errors so
typos in experiment scripts fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional

PROTOCOLS = ("broadcast", "feedback", "dpi")

ENV_PREFIX = "DPIMAP_"
SWEEP_ENV_PREFIX = "DPIMAP_SWEEP_"


class ConfigError(ValueError):
    """Raised for unparseable or invalid configuration input."""


@dataclass
class SimConfig:
    """All knobs of one simulation run.

    Values mirror the reference scenario: a 600x600x150 m region, random
    waypoint speeds in [v_min, v_max], 1 Hz beacons, 10 Hz visual sensing,
    150 m communication and sensing ranges, RSSI ranging noise 5/sqrt(10) m,
    3 m GNSS noise, and 10 emergency events per second.  Fields beyond that
    list expose documented implementation choices (sensor sigmas, filter
    process noise, association gate/blend, classification margins, lazy
    perception) with conservative defaults.
    """

    num_uavs: Optional[int] = None
    region: tuple = (600.0, 600.0, 150.0)
    v_min: float = 5.0
    v_max: float = 20.0
    beacon_interval: float = 1.0
    vd_interval: float = 0.1
    comm_range: float = 150.0
    sense_range: float = 150.0
    rssi_sigma: float = 5.0 / math.sqrt(10.0)
    gnss_sigma: float = 3.0
    ec_rate: float = 10.0
    alpha: float = 1.0
    epsilon: float = 0.02
    tx_airtime: float = 0.002
    proc_jitter_mean: float = 0.001
    duration: float = 5.0
    seed: int = 0
    protocol: str = "dpi"
    # Visual sensor noise and the synthetic appearance channel.
    range_sigma: float = 0.5
    azimuth_sigma: float = 0.02
    elevation_sigma: float = 0.02
    appearance_sigma: float = 0.05
    # Filter and association knobs.
    process_noise: float = 0.5
    gate_threshold: float = 0.5
    blend_gamma: float = 0.7
    # Velocity prior for freshly spawned tracks.  Relative speeds reach
    # 2*v_max, so zero means "derive from v_max" at world construction.
    spawn_velocity_sigma: float = 0.0
    track_timeout: float = 1.0
    ad_full_state_update: bool = False
    # Magnitude-aware cosine scales for the matcher's two feature slots
    # (meters for relative position, m/s for relative velocity); 0 disables
    # the magnitude factor for that slot, leaving the bare cosine.  Pure
    # direction cannot separate two neighbors on the same ray, so the
    # position slot defaults on; the velocity slot stays bare because
    # differenced velocities carry too much magnitude noise to compare.
    magnitude_scale_position: float = 10.0
    magnitude_scale_velocity: float = 0.0
    distinguishability_mode: str = "exactly_one"
    weights_source: str = "visual"
    # Emergency-communication scheduling and accounting.
    event_start: float = 0.0
    settle_timeout: float = 1.0
    # Classification slack for the dpi sender (m/s on the closing rate,
    # meters on the along-heading test).  Zero reproduces the ground-truth
    # predicate applied to estimates; positive values trade false misses
    # for false deliveries.
    dpi_closing_margin: float = 0.0
    dpi_behind_margin: float = 0.0
    # Perception control: "all" keeps every node's neighbor table; "senders"
    # only evaluates tables at upcoming event senders (identical per-sender
    # results, large speedup at high densities).
    perception_mode: str = "all"
    perception_warmup: float = 1.2
    log_path: Optional[str] = None

    def validate(self) -> list[str]:
        """All field-level problems, empty when the config is runnable."""
        problems = []
        if self.num_uavs is None:
            problems.append("num_uavs: required key is missing")
        elif int(self.num_uavs) < 1:
            problems.append(f"num_uavs: must be >= 1, got {self.num_uavs}")
        if len(self.region) != 3 or any(r <= 0 for r in self.region):
            problems.append(f"region: needs three positive extents, got {self.region}")
        if self.v_min <= 0 or self.v_max <= 0:
            problems.append("v_min/v_max: speeds must be positive")
        elif self.v_min > self.v_max:
            problems.append(f"v_min: {self.v_min} exceeds v_max {self.v_max}")
        for name in ("beacon_interval", "vd_interval", "ec_rate", "tx_airtime",
                     "proc_jitter_mean", "comm_range", "sense_range", "alpha",
                     "epsilon", "settle_timeout", "track_timeout"):
            if getattr(self, name) <= 0:
                problems.append(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("rssi_sigma", "gnss_sigma", "range_sigma", "azimuth_sigma",
                     "elevation_sigma", "appearance_sigma", "process_noise",
                     "magnitude_scale_position", "magnitude_scale_velocity",
                     "duration", "event_start",
                     "perception_warmup", "spawn_velocity_sigma",
                     "dpi_closing_margin", "dpi_behind_margin"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be nonnegative, got {getattr(self, name)}")
        if self.protocol not in PROTOCOLS:
            problems.append(f"protocol: must be one of {'/'.join(PROTOCOLS)}, got {self.protocol!r}")
        if not 0.0 <= self.gate_threshold <= 1.0:
            problems.append(f"gate_threshold: must lie in [0, 1], got {self.gate_threshold}")
        if not 0.0 <= self.blend_gamma <= 1.0:
            problems.append(f"blend_gamma: must lie in [0, 1], got {self.blend_gamma}")
        if self.distinguishability_mode not in ("exactly_one", "all_different"):
            problems.append("distinguishability_mode: must be exactly_one or all_different")
        if self.weights_source not in ("visual", "auditory"):
            problems.append("weights_source: must be visual or auditory")
        if self.perception_mode not in ("all", "senders"):
            problems.append("perception_mode: must be all or senders")
        return problems

    def validated(self) -> "SimConfig":
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class SweepSpec:
    """Batch axes for the sweep front-end; empty axes behave like one run."""

    num_uavs: list = field(default_factory=list)
    v_max: list = field(default_factory=list)
    protocol: list = field(default_factory=list)
    repetitions: int = 1
    job_cap: int = 10_000

    def validate(self) -> list[str]:
        problems = []
        if self.repetitions < 1:
            problems.append(f"repetitions: must be >= 1, got {self.repetitions}")
        if self.job_cap < 1:
            problems.append(f"job_cap: must be >= 1, got {self.job_cap}")
        for proto in self.protocol:
            if proto not in PROTOCOLS:
                problems.append(f"protocol: unknown protocol {proto!r}")
        return problems


def _coerce(name: str, text: str, example):
    """Parse one config string according to the default value's type."""
    text = text.strip()
    try:
        if isinstance(example, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(example, int) and not isinstance(example, bool):
            return int(text)
        if isinstance(example, float):
            return float(text)
        if isinstance(example, tuple):
            parts = [float(p) for p in text.replace(",", " ").split()]
            return tuple(parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} ({exc})") from None


_FIELD_EXAMPLES = {
    "num_uavs": 1, "seed": 1, "region": (1.0, 1.0, 1.0),
    "ad_full_state_update": False, "log_path": "",
}


def _sim_field_example(name: str):
    if name in _FIELD_EXAMPLES:
        return _FIELD_EXAMPLES[name]
    return getattr(SimConfig(), name)


_SIM_FIELDS = {f.name for f in dataclasses.fields(SimConfig)}
_SWEEP_LIST_FIELDS = {"num_uavs": int, "v_max": float, "protocol": str}


def _parse_sweep_value(name: str, text: str):
    if name in _SWEEP_LIST_FIELDS:
        caster = _SWEEP_LIST_FIELDS[name]
        try:
            return [caster(p) for p in text.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"sweep {name}: cannot parse {text!r}") from None
    if name in ("repetitions", "job_cap"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"sweep {name}: cannot parse {text!r}") from None
    raise ConfigError(f"sweep: unknown key {name!r}")


def load_config(path: str, environ: Optional[dict] = None
                ) -> tuple[SimConfig, SweepSpec]:
    """Parse a config file plus environment overrides; no validation yet.

    Raises ConfigError on unreadable files, unknown sections/keys, or
    unparseable values.  Call ``.validate()`` on the results to check ranges.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None

    for section in parser.sections():
        if section not in ("sim", "sweep"):
            raise ConfigError(f"unknown config section [{section}]")

    sim_kwargs = {}
    if parser.has_section("sim"):
        for key, value in parser.items("sim"):
            if key not in _SIM_FIELDS:
                raise ConfigError(f"unknown config key {key!r} in [sim]")
            sim_kwargs[key] = _coerce(key, value, _sim_field_example(key))
    sweep_kwargs = {}
    if parser.has_section("sweep"):
        for key, value in parser.items("sweep"):
            sweep_kwargs[key] = _parse_sweep_value(key, value)

    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if key.startswith(SWEEP_ENV_PREFIX):
            name = key[len(SWEEP_ENV_PREFIX):].lower()
            sweep_kwargs[name] = _parse_sweep_value(name, value)
        elif key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name not in _SIM_FIELDS:
                raise ConfigError(f"unknown config key {name!r} from {key}")
            sim_kwargs[name] = _coerce(name, value, _sim_field_example(name))

    return SimConfig(**sim_kwargs), SweepSpec(**sweep_kwargs)
