"""Discrete-time swarm simulator for emergency-communication protocols.

Models a UAV swarm under 3D random-waypoint mobility.  Every node beacons its
identity and GNSS-grade kinematics over radio (the auditory domain) and scans
its surroundings with a polar sensor (the visual domain).  Emergency events
pick senders at a configured rate; three protocols deliver the alert:

* ``broadcast``: one transmission to everyone in range,
* ``feedback``: query, per-neighbor kinematic replies, then unicasts to the
  neighbors the replies classify as intended,
* ``dpi``: the sender classifies intended neighbors from its fused neighbor
  table (visual tracks bound to heard identities) and unicasts immediately.

The channel is a carrier-sense model: a transmission waits for the sender's
neighborhood to fall silent, occupies it for the airtime, and reaches each
receiver after an exponential processing jitter.  All randomness flows
through counter-based streams keyed by (seed, purpose, tick, node), so runs
are reproducible and mobility/beacon content/event schedules stay identical
across protocols for paired comparisons.

For speed at high densities, per-node perception can be evaluated lazily only
at upcoming event senders (``perception_mode = "senders"``); each sender's
table is then warmed for ``perception_warmup`` seconds before its event,
which is enough for tracks and bindings to converge at the default noise
levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..association import associate
from ..identity import (
    AUDITORY,
    COST_CAP,
    VISUAL,
    DigitalIdentity,
    ObservationSet,
    PhysicalIdentity,
    WeightVector,
    cosine_matrix,
    distinguishability_profile,
)
from ..matching import cost_matrix_from_slots, solve_cost_matrix
from ..tracking import (
    ConvertedMeasurement,
    TrackState,
    convert_arrays,
    process_noise,
    transition_matrix,
)
from .config import ConfigError, SimConfig

# Stream tags for counter-based RNG derivation.
_S_INIT = 1
_S_MOBILITY = 2
_S_BEACON = 3
_S_VISUAL = 4
_S_EVENTS = 5
_S_JITTER = 6
_S_FEEDBACK = 7
_S_APPEARANCE = 8
_S_RSSI = 9

_STATIONARY_TOL = 1e-9

# Velocity differencing for the visual identity: the quotient of two noisy
# position frames only carries signal once the frames are far enough apart,
# so each track anchors an older frame and differences against it.  Young
# tracks fall back to the filter's velocity once enough updates have
# accumulated; before that they sit matching epochs out.
_ANCHOR_SPACING = 0.75
_VEL_BASELINE_MIN = 0.5
_VEL_BOOTSTRAP_UPDATES = 3

# Chi-square gate (3 dof, 99%) on the identity-fusion update so a transient
# wrong binding cannot drag a healthy track toward another node's claim.
_FUSION_GATE = 11.345

# Looser chi-square gate (3 dof, 99.9%) on visual updates: cross-overs in a
# dense swarm land tens of sigma out and would wreck the differenced
# velocity for the whole anchor window.
_VD_GATE = 16.266

# Pre-unicast sanity check: the bound track's range estimate must agree with
# the identity's latest RSSI range sample to within this many sigmas plus a
# floor for residual filter error.  A stale or swapped binding points at a
# node whose radio range no longer matches the tracked body, and the unicast
# would land on an uninvolved receiver.
_RSSI_CHECK_SIGMAS = 6.0
_RSSI_CHECK_FLOOR = 2.0

# Tracks this far beyond communication range are dropped from identity
# matching; a beacon audible two intervals ago cannot have carried its
# sender much past the radio horizon.
_BIM_RANGE_BUFFER = 25.0

# Identity-matching costs above this are capped outright.  A genuine
# candidate pair costs a few units even with every feature slot weak; a cost
# this high means some slot is fully dissimilar (an opposite-hemisphere
# position, an anti-parallel velocity) and the pair is physically absurd.
# Capping it lets the matcher treat the pair as forbidden instead of
# force-marrying leftovers through it.
_BIM_COST_GATE = 1e4


def _stream(seed: int, tag: int, a: int = 0, b: int = 0) -> np.random.Generator:
    """Independent generator keyed by (seed, purpose, tick, node)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(tag << 56),
                    np.uint64((a << 24) | b)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Node container and scalar mobility / sensing / beacon operations
# ---------------------------------------------------------------------------

@dataclass
class UavNode:
    """One UAV's ground-truth state plus its broadcastable identity."""

    did: DigitalIdentity
    position: np.ndarray
    velocity: np.ndarray
    waypoint: np.ndarray
    speed: float
    appearance_truth: np.ndarray
    neighbor_table: dict = field(default_factory=dict)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.waypoint = np.asarray(self.waypoint, dtype=float).reshape(3)
        self.appearance_truth = np.asarray(self.appearance_truth, dtype=float).reshape(3)


def step_mobility(node: UavNode, dt: float, region, rng: np.random.Generator,
                  v_min: float = 5.0, v_max: float = 20.0) -> UavNode:
    """Advance one node one step under the random-waypoint model.

    The node moves toward its waypoint at the leg's speed; when the waypoint
    is within one step's travel it lands there and draws a fresh uniform
    waypoint and speed (zero pause time).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    region = np.asarray(region, dtype=float)
    to_wp = node.waypoint - node.position
    dist = float(np.linalg.norm(to_wp))
    travel = node.speed * dt
    if travel >= dist - 1e-12:
        node.position = node.waypoint.copy()
        node.waypoint = rng.uniform(0.0, 1.0, size=3) * region
        node.speed = float(rng.uniform(v_min, v_max))
        heading = node.waypoint - node.position
        norm = float(np.linalg.norm(heading))
        node.velocity = (heading / norm * node.speed) if norm > 0 else np.zeros(3)
    else:
        direction = to_wp / dist
        node.position = node.position + direction * travel
        node.velocity = direction * node.speed
    return node


@dataclass
class Beacon:
    """One emitted radio beacon: identity plus self-reported kinematics."""

    did: DigitalIdentity
    position: np.ndarray
    velocity: np.ndarray
    timestamp: float = 0.0


def emit_beacon(node: UavNode, rng: np.random.Generator, gnss_sigma: float = 3.0,
                timestamp: float = 0.0) -> Beacon:
    """Build one beacon: true kinematics perturbed by GNSS-grade noise.

    Position noise is isotropic with ``gnss_sigma``; the self-reported
    velocity carries 0.1 * gnss_sigma per axis.
    """
    pos = node.position + rng.normal(size=3) * gnss_sigma
    vel = node.velocity + rng.normal(size=3) * (0.1 * gnss_sigma)
    return Beacon(did=node.did, position=pos, velocity=vel, timestamp=timestamp)


def rssi_range_sample(true_distance: float, rng: np.random.Generator,
                      rssi_sigma: float) -> float:
    """RSSI-derived range estimate: true distance plus Gaussian noise."""
    return float(true_distance + rng.normal() * rssi_sigma)


@dataclass
class PolarMeasurement:
    """Raw visual detection in the observer's frame: range and two angles."""

    range_m: float
    azimuth: float
    elevation: float


def sense_visual(observer: UavNode, target: UavNode, rng: np.random.Generator,
                 sense_range: float = 150.0, range_sigma: float = 0.5,
                 azimuth_sigma: float = 0.02, elevation_sigma: float = 0.02,
                 appearance_sigma: float = 0.05):
    """One polar detection of a target, or None when out of sensing range.

    The true relative vector maps to (range, azimuth, elevation) in the
    observer's axis-aligned frame (360-degree coverage), each perturbed by
    its configured Gaussian noise; the target's appearance vector is returned
    alongside with its own noise.
    """
    rel = target.position - observer.position
    dist = float(np.linalg.norm(rel))
    if dist > sense_range:
        return None
    azimuth = math.atan2(rel[1], rel[0])
    elevation = math.atan2(rel[2], math.hypot(rel[0], rel[1]))
    noisy = PolarMeasurement(
        range_m=max(dist + float(rng.normal()) * range_sigma, 1e-6),
        azimuth=azimuth + float(rng.normal()) * azimuth_sigma,
        elevation=elevation + float(rng.normal()) * elevation_sigma)
    appearance = target.appearance_truth + rng.normal(size=3) * appearance_sigma
    return noisy, appearance


# ---------------------------------------------------------------------------
# Carrier-sense channel
# ---------------------------------------------------------------------------

class Channel:
    """Shared-medium bookkeeping: per-node 'audible until' horizon.

    A transmission starts once the sender's neighborhood (itself included)
    has gone quiet, occupies the medium for the airtime, and pushes the
    horizon of every node in range.  Sequential calls in ready order realize
    per-node FIFO queues and neighborhood contention in one mechanism.
    """

    def __init__(self, num_nodes: int, tx_airtime: float):
        self.audible_until = np.zeros(num_nodes)
        self.tx_airtime = tx_airtime

    def transmit(self, sender: int, ready: float, in_range: np.ndarray) -> tuple:
        start = max(ready, float(self.audible_until[sender]))
        end = start + self.tx_airtime
        np.maximum(self.audible_until, end, where=in_range, out=self.audible_until)
        self.audible_until[sender] = max(self.audible_until[sender], end)
        return start, end


# ---------------------------------------------------------------------------
# Per-observer perception state (tracks, bindings, matching)
# ---------------------------------------------------------------------------

class NeighborTrack:
    """One tracked neighbor: filtered relative state plus match bookkeeping."""

    __slots__ = ("x", "P", "identity", "identity_epoch", "appearance",
                 "last_update", "meas_pos", "meas_time", "meas_count",
                 "ref_a_pos", "ref_a_time", "ref_b_pos", "ref_b_time",
                 "truth_source")

    def __init__(self, x, P, timestamp, appearance, truth_source):
        self.x = np.asarray(x, dtype=float)
        self.P = np.asarray(P, dtype=float)
        self.identity: Optional[int] = None
        self.identity_epoch = -1
        self.appearance = appearance
        self.last_update = timestamp
        self.meas_pos: Optional[np.ndarray] = None
        self.meas_time = timestamp
        self.meas_count = 0
        # Anchored earlier frames for velocity differencing: ref_b is the
        # newer anchor, promoted to ref_a once it is _ANCHOR_SPACING old.
        self.ref_a_pos: Optional[np.ndarray] = None
        self.ref_a_time = timestamp
        self.ref_b_pos: Optional[np.ndarray] = None
        self.ref_b_time = timestamp
        self.truth_source = truth_source

    def record_frame(self, position: np.ndarray, t: float) -> None:
        """Store the latest raw position frame and rotate the anchors."""
        self.meas_pos = position
        self.meas_time = t
        self.meas_count += 1
        if self.ref_b_pos is None:
            self.ref_b_pos, self.ref_b_time = position, t
        elif t - self.ref_b_time >= _ANCHOR_SPACING:
            self.ref_a_pos, self.ref_a_time = self.ref_b_pos, self.ref_b_time
            self.ref_b_pos, self.ref_b_time = position, t

    def frame_velocity(self, t: float) -> Optional[np.ndarray]:
        """Differenced velocity against the anchored frame, if old enough.

        Falls back to the filter's velocity estimate for tracks that have
        seen enough updates but no sufficiently old frame yet.  Returns None
        when neither source is trustworthy.
        """
        ref_pos, ref_time = self.ref_a_pos, self.ref_a_time
        if ref_pos is None:
            ref_pos, ref_time = self.ref_b_pos, self.ref_b_time
        if ref_pos is not None and t - ref_time >= _VEL_BASELINE_MIN \
                and self.meas_time > ref_time:
            return (self.meas_pos - ref_pos) / (self.meas_time - ref_time)
        if self.meas_count >= _VEL_BOOTSTRAP_UPDATES:
            return self.x[3:].copy()
        return None


class Perception:
    """One node's running perception: tracks, step timing, match counters."""

    __slots__ = ("tracks", "last_step", "own_pos", "own_vel", "last_bim",
                 "map_correct", "map_total")

    def __init__(self, t: float, own_pos: np.ndarray, own_vel: np.ndarray):
        self.tracks: list[NeighborTrack] = []
        self.last_step = t
        self.own_pos = own_pos.copy()
        self.own_vel = own_vel.copy()
        self.last_bim = -math.inf
        self.map_correct = 0
        self.map_total = 0


def _batch_predict(xs: np.ndarray, Ps: np.ndarray, dt: float, q: float):
    """Vectorized constant-velocity prediction over stacked tracks."""
    f = transition_matrix(dt)
    qm = process_noise(dt, q)
    xs2 = xs @ f.T
    Ps2 = np.einsum("ij,njk,lk->nil", f, Ps, f) + qm
    return xs2, (Ps2 + Ps2.transpose(0, 2, 1)) / 2.0


def _batch_update_position(xs: np.ndarray, Ps: np.ndarray, zs: np.ndarray,
                           Rs: np.ndarray):
    """Vectorized position-only update over stacked tracks."""
    pht = Ps[:, :, :3]
    s = Ps[:, :3, :3] + Rs
    gain = np.linalg.solve(s, pht.transpose(0, 2, 1)).transpose(0, 2, 1)
    innov = zs - xs[:, :3]
    xs2 = xs + np.einsum("nij,nj->ni", gain, innov)
    Ps2 = Ps - np.einsum("nij,njk->nik", gain, Ps[:, :3, :])
    return xs2, (Ps2 + Ps2.transpose(0, 2, 1)) / 2.0


# ---------------------------------------------------------------------------
# World state and the simulation loop
# ---------------------------------------------------------------------------

@dataclass
class EcEvent:
    """One emergency message: ground-truth audience and what actually happened."""

    sender: int
    created_at: float
    intended: frozenset
    deliveries: list          # (receiver, received_at), settled only
    ri: int = 0
    ru: int = 0
    ni: int = 0
    nu: int = 0


@dataclass
class MetricsRecord:
    """Aggregated outcome of one simulation run."""

    ri: int = 0
    ru: int = 0
    ni: int = 0
    nu: int = 0
    hit_rate: float = 0.0
    disturbance_rate: float = 0.0
    latency_mean_ms: float = 0.0
    latency_p50_ms: float = 0.0
    latency_p90_ms: float = 0.0
    mapping_accuracy: float = 0.0
    ad_range_p90_m: float = 0.0
    vd_range_p90_m: float = 0.0
    fused_range_p90_m: float = 0.0
    num_events: int = 0
    num_deliveries: int = 0


class World:
    """Mutable simulation state: truth arrays, channel, perception, logs."""

    def __init__(self, cfg: SimConfig):
        cfg.validated()
        self.cfg = cfg
        self.n = int(cfg.num_uavs)
        self.region = np.asarray(cfg.region, dtype=float)
        self.dt = cfg.vd_interval
        init = _stream(cfg.seed, _S_INIT)
        self.pos = init.uniform(0.0, 1.0, size=(self.n, 3)) * self.region
        self.way = init.uniform(0.0, 1.0, size=(self.n, 3)) * self.region
        self.spd = init.uniform(cfg.v_min, cfg.v_max, size=self.n)
        heading = self.way - self.pos
        norms = np.linalg.norm(heading, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        self.vel = heading / safe[:, None] * self.spd[:, None]
        self.vel[norms == 0] = 0.0
        self.appearance = _stream(cfg.seed, _S_APPEARANCE).uniform(0.0, 1.0, size=(self.n, 3))
        self.next_beacon = init.uniform(0.0, cfg.beacon_interval, size=self.n)
        self.channel = Channel(self.n, cfg.tx_airtime)
        self.mobility_rng = _stream(cfg.seed, _S_MOBILITY)
        self.jitter_rng = _stream(cfg.seed, _S_JITTER)
        self.pos_hist: list[np.ndarray] = []
        self.beacon_log: list[tuple] = []   # per tick: (idx, end, bpos, bvel)
        self.perception: dict[int, Perception] = {}
        self.events: list[EcEvent] = []
        self.latencies: list[float] = []
        self.ad_errors: list[float] = []
        self.vd_errors: list[float] = []
        self.fused_errors: list[float] = []
        self.map_correct = 0
        self.map_total = 0
        self.assoc_matches = 0
        self.assoc_swaps = 0
        # Spawned tracks know nothing about velocity; relative speeds span
        # roughly +/- 2 v_max per axis, hence the default prior below.
        self.spawn_vel_sigma = cfg.spawn_velocity_sigma or (
            2.0 * cfg.v_max / math.sqrt(3.0))

    # -- mobility ---------------------------------------------------------

    def advance_mobility(self):
        """Vectorized random-waypoint step for the whole swarm."""
        cfg = self.cfg
        to_wp = self.way - self.pos
        dist = np.linalg.norm(to_wp, axis=1)
        travel = self.spd * self.dt
        arrive = travel >= dist - 1e-12
        safe = np.where(dist > 0, dist, 1.0)
        direction = to_wp / safe[:, None]
        self.pos = np.where(arrive[:, None], self.way, self.pos + direction * travel[:, None])
        # Stable per-tick draw: one row per node whether or not it arrived.
        draws = self.mobility_rng.uniform(0.0, 1.0, size=(self.n, 4))
        if np.any(arrive):
            self.way[arrive] = draws[arrive, :3] * self.region
            self.spd[arrive] = cfg.v_min + draws[arrive, 3] * (cfg.v_max - cfg.v_min)
        heading = self.way - self.pos
        norms = np.linalg.norm(heading, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        self.vel = heading / safe[:, None] * self.spd[:, None]
        self.vel[norms == 0] = 0.0

    # -- beacons ----------------------------------------------------------

    def emit_beacons(self, tick: int, t: float):
        """Transmit all beacons whose phase falls inside this tick."""
        cfg = self.cfg
        idx_all, ready_all = [], []
        while True:
            due = self.next_beacon < t + self.dt - 1e-12
            if not np.any(due):
                break
            idx = np.flatnonzero(due)
            idx_all.append(idx)
            ready_all.append(self.next_beacon[idx].copy())
            self.next_beacon[idx] += cfg.beacon_interval
        if not idx_all:
            self.beacon_log.append(None)
            return
        idx = np.concatenate(idx_all)
        ready = np.concatenate(ready_all)
        by_node = np.argsort(idx, kind="stable")
        draws = _stream(cfg.seed, _S_BEACON, tick).normal(size=(idx.size, 6))
        bpos = self.pos[idx[by_node]] + draws[:, :3] * cfg.gnss_sigma
        bvel = self.vel[idx[by_node]] + draws[:, 3:] * (0.1 * cfg.gnss_sigma)
        idx, ready = idx[by_node], ready[by_node]
        order = np.lexsort((idx, ready))
        ends = np.empty(idx.size)
        for o in order:
            i = int(idx[o])
            in_range = np.linalg.norm(self.pos - self.pos[i], axis=1) <= cfg.comm_range
            _, end = self.channel.transmit(i, float(ready[o]), in_range)
            ends[o] = end
        self.beacon_log.append((idx, ends, bpos, bvel))

    def fresh_beacons(self, observer: int, tick: int, t: float) -> dict:
        """Latest audible beacon per identity, within the staleness window.

        Returns {node index: (position, velocity, end time, rssi range)} for
        beacons that finished transmitting by time t, were in communication
        range at emission, and are at most 2 * beacon_interval old.  The RSSI
        range sample is receiver-local and deterministic per (emission tick,
        receiver, sender).
        """
        cfg = self.cfg
        horizon = t - 2.0 * cfg.beacon_interval
        lookback = int(math.ceil(2.0 * cfg.beacon_interval / self.dt)) + 1
        heard: dict[int, tuple] = {}
        for tb in range(min(tick, len(self.beacon_log)) - 1,
                        max(-1, tick - 1 - lookback), -1):
            entry = self.beacon_log[tb]
            if entry is None:
                continue
            idx, ends, bpos, bvel = entry
            obs_pos = self.pos_hist[tb][observer]
            dists = np.linalg.norm(self.pos_hist[tb][idx] - obs_pos, axis=1)
            rssi_noise = None
            for k in range(idx.size):
                i = int(idx[k])
                if i == observer or i in heard:
                    continue
                if ends[k] > t or ends[k] < horizon or dists[k] > cfg.comm_range:
                    continue
                if rssi_noise is None:
                    rssi_noise = _stream(cfg.seed, _S_RSSI, tb, observer).normal(
                        size=idx.size)
                rng_sample = float(dists[k] + rssi_noise[k] * cfg.rssi_sigma)
                heard[i] = (bpos[k], bvel[k], float(ends[k]), rng_sample)
        return heard

    # -- perception (visual tracking + identity matching) ------------------

    def perception_step(self, obs: int, tick: int, t: float, collect: bool):
        """Advance one observer's neighbor table to time t.

        Predicts existing tracks (compensating the observer's own motion
        exactly), associates this tick's visual detections, updates matched
        tracks, spawns tentative tracks from the residue, and re-runs
        identity matching whenever fresh beacons have arrived.
        """
        cfg = self.cfg
        per = self.perception.get(obs)
        if per is None:
            per = Perception(t, self.pos[obs], self.vel[obs])
            self.perception[obs] = per

        # Predict across the gap since the last step, then correct for own
        # motion: the relative frame shifts by exactly the observer's own
        # displacement and velocity change, both known to the observer.
        gap = t - per.last_step
        if per.tracks and gap > 0:
            xs = np.stack([tr.x for tr in per.tracks])
            ps = np.stack([tr.P for tr in per.tracks])
            xs, ps = _batch_predict(xs, ps, gap, cfg.process_noise)
            own_disp_err = (self.pos[obs] - per.own_pos) - per.own_vel * gap
            own_dvel = self.vel[obs] - per.own_vel
            xs[:, :3] -= own_disp_err
            xs[:, 3:] -= own_dvel
            for k, tr in enumerate(per.tracks):
                tr.x, tr.P = xs[k], ps[k]
        per.tracks = [tr for tr in per.tracks
                      if t - tr.last_update <= cfg.track_timeout]

        # This tick's visual detections (all in-range targets, batched).
        rel = self.pos - self.pos[obs]
        dist = np.linalg.norm(rel, axis=1)
        in_sense = (dist <= cfg.sense_range)
        in_sense[obs] = False
        targets = np.flatnonzero(in_sense)
        vd_rng = _stream(cfg.seed, _S_VISUAL, tick, obs)
        measurements: list[ConvertedMeasurement] = []
        if targets.size:
            tr_rel = rel[targets]
            true_r = dist[targets]
            azimuth = np.arctan2(tr_rel[:, 1], tr_rel[:, 0])
            elevation = np.arctan2(tr_rel[:, 2], np.hypot(tr_rel[:, 0], tr_rel[:, 1]))
            noise = vd_rng.normal(size=(targets.size, 3))
            app_noise = vd_rng.normal(size=(targets.size, 3))
            r_m = np.maximum(true_r + noise[:, 0] * cfg.range_sigma, 1e-6)
            az_m = azimuth + noise[:, 1] * cfg.azimuth_sigma
            el_m = elevation + noise[:, 2] * cfg.elevation_sigma
            p, mu, cov = convert_arrays(r_m, az_m, el_m, cfg.range_sigma,
                                        cfg.azimuth_sigma, cfg.elevation_sigma)
            apps = self.appearance[targets] + app_noise * cfg.appearance_sigma
            measurements = [
                ConvertedMeasurement(position=p[k], bias=mu[k], covariance=cov[k],
                                     domain=VISUAL, timestamp=t, appearance=apps[k])
                for k in range(targets.size)]

        track_views = [TrackState(x=tr.x, P=tr.P, appearance=tr.appearance)
                       for tr in per.tracks]
        outcome = associate(measurements, track_views,
                            gate_threshold=cfg.gate_threshold,
                            blend_gamma=cfg.blend_gamma,
                            alpha=cfg.alpha, epsilon=cfg.epsilon)

        spawn_ks = list(outcome.unassociated_measurements)
        committed: list[tuple[int, int]] = []
        rejected: list[int] = []
        if outcome.mapping:
            # Innovation gate before committing updates: a cosine-matched
            # measurement that lands far outside the track's predicted
            # position ellipse is a cross-over, not an update.
            rows = [i for _, i in outcome.mapping]
            xs = np.stack([per.tracks[i].x for i in rows])
            ps = np.stack([per.tracks[i].P for i in rows])
            zs = np.stack([measurements[k].filter_position for k, _ in outcome.mapping])
            rs = np.stack([measurements[k].covariance for k, _ in outcome.mapping])
            innov = zs - xs[:, :3]
            s3 = ps[:, :3, :3] + rs
            m2 = np.einsum("ni,ni->n", innov,
                           np.linalg.solve(s3, innov[..., None])[..., 0])
            keep = m2 <= _VD_GATE
            xs2, ps2 = _batch_update_position(xs[keep], ps[keep], zs[keep], rs[keep])
            upd = 0
            for row, (k, i) in enumerate(outcome.mapping):
                tr = per.tracks[i]
                if not keep[row]:
                    rejected.append(k)
                    continue
                committed.append((k, i))
                m = measurements[k]
                self.assoc_matches += 1
                if tr.meas_count > 0 and int(targets[k]) != tr.truth_source:
                    self.assoc_swaps += 1
                tr.x, tr.P = xs2[upd], ps2[upd]
                upd += 1
                tr.record_frame(m.position, t)
                tr.last_update = t
                tr.appearance = m.appearance
                tr.truth_source = int(targets[k])

        if rejected:
            # Recovery pass: a gated-out measurement usually belongs to a
            # nearby track the cosine score crossed over.  Re-lock it to the
            # nearest still-open track inside the same gate before letting
            # the residue spawn duplicates.
            taken = {i for _, i in committed}
            open_idx = [i for i in range(len(per.tracks)) if i not in taken]
            for k in rejected:
                m = measurements[k]
                best_i, best_m2 = -1, _VD_GATE
                for i in open_idx:
                    tr = per.tracks[i]
                    d = m.filter_position - tr.x[:3]
                    s3 = tr.P[:3, :3] + m.covariance
                    m2 = float(d @ np.linalg.solve(s3, d))
                    if m2 < best_m2:
                        best_i, best_m2 = i, m2
                if best_i < 0:
                    spawn_ks.append(k)
                    continue
                tr = per.tracks[best_i]
                open_idx.remove(best_i)
                committed.append((k, best_i))
                self.assoc_matches += 1
                if tr.meas_count > 0 and int(targets[k]) != tr.truth_source:
                    self.assoc_swaps += 1
                xs2, ps2 = _batch_update_position(
                    tr.x[None], tr.P[None], m.filter_position[None],
                    m.covariance[None])
                tr.x, tr.P = xs2[0], ps2[0]
                tr.record_frame(m.position, t)
                tr.last_update = t
                tr.appearance = m.appearance
                tr.truth_source = int(targets[k])

        for k in spawn_ks:
            m = measurements[k]
            x = np.concatenate([m.filter_position, np.zeros(3)])
            P = np.zeros((6, 6))
            P[:3, :3] = m.covariance
            P[3:, 3:] = np.eye(3) * self.spawn_vel_sigma ** 2
            tr = NeighborTrack(x, P, t, m.appearance, int(targets[k]))
            tr.record_frame(m.position, t)
            per.tracks.append(tr)

        # Identity matching whenever new beacons arrived since the last one.
        heard = self.fresh_beacons(obs, tick, t)
        if heard and any(v[2] > per.last_bim for v in heard.values()):
            self._match_identities(per, obs, heard, tick, t, collect)
            per.last_bim = t

        if collect:
            for k, i in committed:
                tr = per.tracks[i]
                true_range = dist[tr.truth_source]
                self.vd_errors.append(abs(float(np.linalg.norm(measurements[k].position)) - true_range))
                self.fused_errors.append(abs(float(np.linalg.norm(tr.x[:3])) - true_range))
            for i, (_, _, end, rng_sample) in heard.items():
                if t - end <= self.dt:
                    self.ad_errors.append(abs(rng_sample - float(dist[i])))

        per.last_step = t
        per.own_pos = self.pos[obs].copy()
        per.own_vel = self.vel[obs].copy()

    def _bim_inputs(self, per: Perception, obs: int, heard: dict, t: float):
        """Feature stacks for identity matching: fresh tracks vs fresh beacons.

        A track joins the visual set once it can supply a usable relative
        velocity (see NeighborTrack.frame_velocity); brand-new spawns sit
        the epoch out.  When the sensor out-ranges the radio, tracks well
        beyond communication range cannot belong to any audible identity and
        are left out rather than letting them compete for beacons.
        """
        cfg = self.cfg
        reach = cfg.comm_range + _BIM_RANGE_BUFFER
        vd_tracks = []
        vels = []
        for tr in per.tracks:
            if t - tr.last_update >= 0.5 * self.dt:
                continue
            if cfg.sense_range > cfg.comm_range and \
                    float(np.linalg.norm(tr.meas_pos)) > reach:
                continue
            vel = tr.frame_velocity(t)
            if vel is None:
                continue
            vd_tracks.append(tr)
            vels.append(vel)
        vd_pos = np.array([tr.meas_pos for tr in vd_tracks]).reshape(-1, 3)
        vd_vel = np.array(vels).reshape(-1, 3)
        dids = sorted(heard)
        ad_pos = np.array([heard[i][0] for i in dids]).reshape(-1, 3) - self.pos[obs]
        ad_vel = np.array([heard[i][1] for i in dids]).reshape(-1, 3) - self.vel[obs]
        return vd_tracks, [vd_pos, vd_vel], dids, [ad_pos, ad_vel]

    def _match_identities(self, per: Perception, obs: int, heard: dict,
                          tick: int, t: float, collect: bool):
        """One identity-matching epoch: weights, costs, assignment, fusion."""
        cfg = self.cfg
        vd_tracks, vd_slots, dids, ad_slots = self._bim_inputs(per, obs, heard, t)
        if not vd_tracks or not dids:
            return
        source = vd_slots if cfg.weights_source == "visual" else ad_slots
        raw = np.array([
            float(np.mean(distinguishability_profile(
                cosine_matrix(slot, slot), mode=cfg.distinguishability_mode)))
            for slot in source])
        weights = WeightVector.from_raw(raw)
        scales = [cfg.magnitude_scale_position or None,
                  cfg.magnitude_scale_velocity or None]
        if scales == [None, None]:
            scales = None
        cost = cost_matrix_from_slots(vd_slots, ad_slots, weights,
                                      magnitude_scales=scales)
        cost.entries[cost.entries > _BIM_COST_GATE] = COST_CAP
        result = solve_cost_matrix(cost, alpha=cfg.alpha, epsilon=cfg.epsilon)
        for i_vd, j_ad, _ in result.pairs:
            tr = vd_tracks[i_vd]
            did = dids[j_ad]
            bpos, bvel, _, _ = heard[did]
            z = bpos - self.pos[obs]
            innov = z - tr.x[:3]
            s3 = tr.P[:3, :3] + np.eye(3) * cfg.gnss_sigma ** 2
            if float(innov @ np.linalg.solve(s3, innov)) > _FUSION_GATE:
                # The assignment engine pairs every audible identity with
                # somebody; a claim this far from the track is a forced
                # marriage, not evidence.  Refusing it keeps an older,
                # still-live binding for that identity authoritative.
                continue
            if tick > tr.identity_epoch:
                tr.identity, tr.identity_epoch = did, tick
            if cfg.ad_full_state_update:
                z6 = np.concatenate([z, bvel - self.vel[obs]])
                r6 = np.diag([cfg.gnss_sigma ** 2] * 3
                             + [(0.1 * cfg.gnss_sigma) ** 2] * 3)
                r6 += np.eye(6) * 1e-12
                s = tr.P + r6
                gain = np.linalg.solve(s, tr.P).T
                tr.x = tr.x + gain @ (z6 - tr.x)
                pnew = tr.P - gain @ tr.P
                tr.P = (pnew + pnew.T) / 2.0
            else:
                xs, ps = _batch_update_position(
                    tr.x[None], tr.P[None], z[None],
                    (np.eye(3) * max(cfg.gnss_sigma, 1e-6) ** 2)[None])
                tr.x, tr.P = xs[0], ps[0]
            if collect:
                per.map_total += 1
                self.map_total += 1
                if did == tr.truth_source:
                    per.map_correct += 1
                    self.map_correct += 1

    # -- intended-receiver ground truth and protocol classification --------

    def intended_mask(self, sender: int) -> np.ndarray:
        """Ground-truth intended set: in range, behind the sender, approaching."""
        cfg = self.cfg
        rel = self.pos - self.pos[sender]
        dist = np.linalg.norm(rel, axis=1)
        in_range = dist <= cfg.comm_range
        in_range[sender] = False
        v_s = self.vel[sender]
        approaching = np.einsum("ij,ij->i", self.vel - v_s, rel) < 0.0
        if np.linalg.norm(v_s) < _STATIONARY_TOL:
            behind = np.ones(self.n, dtype=bool)
        else:
            behind = rel @ v_s < 0.0
        return in_range & behind & approaching

    def _classify(self, rel_p: np.ndarray, rel_v: np.ndarray, v_own: np.ndarray,
                  range_est: float, behind_margin: float,
                  closing_margin: float) -> bool:
        """Intended-receiver predicate on estimated relative kinematics."""
        cfg = self.cfg
        if range_est > cfg.comm_range:
            return False
        norm_p = float(np.linalg.norm(rel_p))
        if norm_p < _STATIONARY_TOL:
            return False
        speed_own = float(np.linalg.norm(v_own))
        if speed_own >= _STATIONARY_TOL:
            along = float(rel_p @ v_own) / speed_own
            if along >= behind_margin:
                return False
        closing = float(rel_v @ rel_p) / norm_p
        return closing < closing_margin

    def classify_dpi(self, sender: int, tick: int, t: float) -> list[int]:
        """Intended set as the DPI sender estimates it from its neighbor table.

        Only tracks carrying a bound digital identity are addressable; a
        neighbor that is intended but unbound simply cannot be reached and
        shows up as a miss.  When several tracks claim the same identity the
        most recent binding wins.  Each candidate is verified against that
        identity's latest RSSI range sample before it is unicast to, so a
        binding that drifted onto the wrong body is dropped rather than
        disturbing an uninvolved node.
        """
        cfg = self.cfg
        per = self.perception.get(sender)
        entries: dict[int, tuple] = {}
        if per is not None:
            bound = [tr for tr in per.tracks if tr.identity is not None
                     and t - tr.last_update <= cfg.track_timeout]
            bound.sort(key=lambda tr: tr.identity_epoch)
            for tr in bound:
                entries[tr.identity] = (tr.x[:3], tr.x[3:])
        if not entries:
            return []
        heard = self.fresh_beacons(sender, tick, t)
        tol = _RSSI_CHECK_FLOOR + _RSSI_CHECK_SIGMAS * cfg.rssi_sigma
        chosen = []
        for did in sorted(entries):
            rel_p, rel_v = entries[did]
            sample = heard.get(did)
            if sample is None:
                continue
            range_est = float(np.linalg.norm(rel_p))
            if abs(sample[3] - range_est) > tol:
                continue
            if self._classify(rel_p, rel_v, self.vel[sender], range_est,
                              cfg.dpi_behind_margin, cfg.dpi_closing_margin):
                chosen.append(did)
        return chosen

    # -- events and protocols ----------------------------------------------

    def run_event(self, ev_idx: int, sender: int, t_evt: float, tick: int,
                  log_handle) -> EcEvent:
        """Execute one emergency event under the configured protocol."""
        cfg = self.cfg
        jit = self.jitter_rng
        rel = self.pos - self.pos[sender]
        dist = np.linalg.norm(rel, axis=1)
        in_range = dist <= cfg.comm_range
        in_range[sender] = False
        intended = self.intended_mask(sender)
        deliveries: list[tuple[int, float]] = []

        def unicast_batch(receivers, ready):
            mask = in_range.copy()
            mask[sender] = True
            for r in receivers:
                _, end = self.channel.transmit(sender, ready, mask)
                if in_range[r]:
                    deliveries.append((int(r), end + float(jit.exponential(cfg.proc_jitter_mean))))

        if cfg.protocol == "broadcast":
            mask = in_range.copy()
            mask[sender] = True
            _, end = self.channel.transmit(sender, t_evt, mask)
            receivers = np.flatnonzero(in_range)
            if receivers.size:
                recv = end + jit.exponential(cfg.proc_jitter_mean, size=receivers.size)
                deliveries.extend(zip(receivers.astype(int).tolist(), recv.tolist()))
        elif cfg.protocol == "feedback":
            mask = in_range.copy()
            mask[sender] = True
            _, q_end = self.channel.transmit(sender, t_evt, mask)
            neighbors = np.flatnonzero(in_range)
            t_classified = q_end
            chosen: list[int] = []
            if neighbors.size:
                reply_ready = q_end + jit.exponential(cfg.proc_jitter_mean, size=neighbors.size)
                recv_at_sender = np.empty(neighbors.size)
                for o in np.lexsort((neighbors, reply_ready)):
                    i = int(neighbors[o])
                    reply_mask = np.linalg.norm(self.pos - self.pos[i], axis=1) <= cfg.comm_range
                    _, r_end = self.channel.transmit(i, float(reply_ready[o]), reply_mask)
                    recv_at_sender[o] = r_end + float(jit.exponential(cfg.proc_jitter_mean))
                t_classified = float(np.max(recv_at_sender))
                fbd = _stream(cfg.seed, _S_FEEDBACK, ev_idx).normal(size=(neighbors.size, 7))
                rep_pos = self.pos[neighbors] + fbd[:, :3] * cfg.gnss_sigma
                rep_vel = self.vel[neighbors] + fbd[:, 3:6] * (0.1 * cfg.gnss_sigma)
                rssi = dist[neighbors] + fbd[:, 6] * cfg.rssi_sigma
                for k, i in enumerate(neighbors):
                    if self._classify(rep_pos[k] - self.pos[sender],
                                      rep_vel[k] - self.vel[sender],
                                      self.vel[sender], float(rssi[k]), 0.0, 0.0):
                        chosen.append(int(i))
            unicast_batch(chosen, t_classified)
        else:  # dpi
            chosen = self.classify_dpi(sender, tick, t_evt)
            unicast_batch(chosen, t_evt)

        settled = [(r, at) for r, at in deliveries
                   if at - t_evt <= cfg.settle_timeout]
        delivered = {r for r, _ in settled}
        intended_set = {int(i) for i in np.flatnonzero(intended)}
        ri = len(delivered & intended_set)
        ru = len(delivered - intended_set)
        ni = len(intended_set) - ri
        nu = int(np.count_nonzero(in_range & ~intended)) - ru
        event = EcEvent(sender=sender, created_at=t_evt,
                        intended=frozenset(intended_set), deliveries=settled,
                        ri=ri, ru=ru, ni=ni, nu=nu)
        self.latencies.extend((at - t_evt) * 1000.0 for _, at in settled)
        if log_handle is not None:
            samples = ",".join(f"{(at - t_evt) * 1000.0:.3f}" for _, at in settled)
            log_handle.write(
                f"sender={sender} created_at={t_evt:.3f} protocol={cfg.protocol} "
                f"intended={len(intended_set)} RI={ri} RU={ru} latency_ms={samples}\n")
        return event


def _percentile(samples: list[float], q: float) -> float:
    return float(np.percentile(np.asarray(samples), q)) if samples else 0.0


def _active_schedule(cfg: SimConfig, num_ticks: int, senders: np.ndarray,
                     event_ticks: np.ndarray) -> list:
    """Which observers run perception at each tick, per the perception mode."""
    if cfg.protocol != "dpi":
        return [() for _ in range(num_ticks)]
    if cfg.perception_mode == "all":
        everyone = tuple(range(int(cfg.num_uavs)))
        return [everyone for _ in range(num_ticks)]
    per_tick = [set() for _ in range(num_ticks)]
    warm_ticks = int(math.ceil(cfg.perception_warmup / cfg.vd_interval))
    for sender, etick in zip(senders, event_ticks):
        for tk in range(max(0, int(etick) - warm_ticks), min(int(etick) + 1, num_ticks)):
            per_tick[tk].add(int(sender))
    return [tuple(sorted(s)) for s in per_tick]


def run_world(world: World) -> MetricsRecord:
    """Drive one world to completion and aggregate its metrics."""
    cfg = world.cfg
    dt = world.dt
    num_ticks = int(round(cfg.duration / dt))
    event_times = []
    k = 0
    while True:
        t_evt = cfg.event_start + k / cfg.ec_rate
        if t_evt >= cfg.duration - 1e-12 or num_ticks == 0:
            break
        event_times.append(t_evt)
        k += 1
    event_times = np.asarray(event_times)
    senders = (_stream(cfg.seed, _S_EVENTS).integers(0, world.n, size=event_times.size)
               if event_times.size else np.empty(0, dtype=int))
    event_ticks = np.minimum((event_times / dt + 1e-9).astype(int), max(num_ticks - 1, 0))
    active = _active_schedule(cfg, num_ticks, senders, event_ticks)

    log_handle = open(cfg.log_path, "w", encoding="utf-8") if cfg.log_path else None
    try:
        ev_cursor = 0
        for tick in range(num_ticks):
            t = tick * dt
            world.pos_hist.append(world.pos.copy())
            for obs in active[tick]:
                world.perception_step(obs, tick, t, collect=True)
            while ev_cursor < event_times.size and event_ticks[ev_cursor] == tick:
                world.events.append(world.run_event(
                    ev_cursor, int(senders[ev_cursor]),
                    float(event_times[ev_cursor]), tick, log_handle))
                ev_cursor += 1
            world.emit_beacons(tick, t)
            world.advance_mobility()
    finally:
        if log_handle is not None:
            log_handle.close()

    rec = MetricsRecord()
    rec.num_events = len(world.events)
    rec.ri = sum(e.ri for e in world.events)
    rec.ru = sum(e.ru for e in world.events)
    rec.ni = sum(e.ni for e in world.events)
    rec.nu = sum(e.nu for e in world.events)
    rec.num_deliveries = sum(len(e.deliveries) for e in world.events)
    if rec.ri + rec.ni > 0:
        rec.hit_rate = rec.ri / (rec.ri + rec.ni)
    if rec.ru + rec.ri > 0:
        rec.disturbance_rate = rec.ru / (rec.ru + rec.ri)
    if world.latencies:
        rec.latency_mean_ms = float(np.mean(world.latencies))
        rec.latency_p50_ms = _percentile(world.latencies, 50.0)
        rec.latency_p90_ms = _percentile(world.latencies, 90.0)
    if world.map_total > 0:
        rec.mapping_accuracy = world.map_correct / world.map_total
    rec.ad_range_p90_m = _percentile(world.ad_errors, 90.0)
    rec.vd_range_p90_m = _percentile(world.vd_errors, 90.0)
    rec.fused_range_p90_m = _percentile(world.fused_errors, 90.0)
    return rec


def run(cfg: SimConfig) -> MetricsRecord:
    """Run one seeded simulation and return its aggregated metrics."""
    problems = cfg.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    return run_world(World(cfg))


def run_details(cfg: SimConfig) -> tuple[MetricsRecord, list[EcEvent]]:
    """Like run(), but also returns the per-event log for inspection."""
    problems = cfg.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    world = World(cfg)
    record = run_world(world)
    return record, world.events


# ---------------------------------------------------------------------------
# Observation-set construction (the identity-facing view of perception)
# ---------------------------------------------------------------------------

def build_observation_sets(world: World, observer: int, tick: int, t: float
                           ) -> tuple[ObservationSet, ObservationSet]:
    """Materialize the observer's current visual and auditory identity sets.

    The visual set holds one physical identity per freshly-updated track
    (relative position from the latest conversion, relative velocity finite-
    differenced over consecutive frames); the auditory set holds one per
    fresh beacon (self-reported kinematics made relative to the observer).
    """
    per = world.perception.get(observer)
    heard = world.fresh_beacons(observer, tick, t)
    if per is None:
        visual = ObservationSet(identities=[])
    else:
        vd_tracks, vd_slots, _, _ = world._bim_inputs(per, observer, heard, t)
        identities = [PhysicalIdentity(features=[vd_slots[0][k], vd_slots[1][k]],
                                       domain=VISUAL, epoch=tick)
                      for k in range(len(vd_tracks))]
        visual = ObservationSet(identities=identities)
    dids = sorted(heard)
    auditory = ObservationSet(
        identities=[PhysicalIdentity(
            features=[heard[i][0] - world.pos[observer],
                      heard[i][1] - world.vel[observer]],
            domain=AUDITORY, epoch=tick) for i in dids],
        digital_ids=[DigitalIdentity(i) for i in dids])
    return visual, auditory


def intended_set(world: World, sender: int) -> set:
    """Ground-truth intended receivers of a sender, as node indices."""
    return {int(i) for i in np.flatnonzero(world.intended_mask(sender))}
