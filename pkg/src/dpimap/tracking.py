"""Polar measurement conversion and per-neighbor constant-velocity filtering.

Visual detections arrive as (range, azimuth, elevation) with known Gaussian
noise.  ``convert_measurement`` turns one detection into an unbiased Cartesian
position with a matching noise covariance (multiplicative-bias compensation:
the raw trigonometric conversion shrinks positions by E[cos noise] factors,
which the lambda terms undo).  The filter side is a plain 6-state
constant-velocity Kalman filter fed by those conversions, with a fusion helper
that applies a visual and a radio measurement in sequence and identity
bookkeeping on the track.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .identity import AUDITORY, VISUAL, DigitalIdentity

# White-acceleration process noise spectral density, m^2/s^3.
DEFAULT_PROCESS_NOISE = 0.5
# Velocity standard deviation assigned to tracks spawned from a single
# position measurement (covers the plausible relative-speed envelope).
DEFAULT_SPAWN_VELOCITY_SIGMA = 10.0

# Position-only observation matrix for the 6-state model.
H_POSITION = np.hstack([np.eye(3), np.zeros((3, 3))])


@dataclass
class ConvertedMeasurement:
    """One Cartesian measurement: position, residual bias, noise covariance.

    ``position`` is the debias-scaled conversion (unbiased for the true
    position); ``bias`` is the small residual correction the filter subtracts
    before updating; ``covariance`` is the matching 3x3 measurement noise.
    """

    position: np.ndarray
    bias: np.ndarray
    covariance: np.ndarray
    domain: str = VISUAL
    timestamp: float = 0.0
    appearance: Optional[np.ndarray] = None

    @property
    def filter_position(self) -> np.ndarray:
        """The position actually handed to the filter (bias removed)."""
        return self.position - self.bias


def convert_arrays(range_m, azimuth, elevation, range_sigma: float,
                   azimuth_sigma: float, elevation_sigma: float):
    """Vectorized conversion core: returns (positions, biases, covariances).

    Accepts scalars or equal-length arrays for the polar coordinates and
    returns arrays shaped (..., 3), (..., 3) and (..., 3, 3).  The covariance
    uses the exact second moments of cos/sin under Gaussian angle noise
    (E[cos n] = exp(-sigma^2/2), E[cos 2n] = exp(-2 sigma^2)).
    """
    r = np.asarray(range_m, dtype=float)
    th = np.asarray(azimuth, dtype=float)
    ph = np.asarray(elevation, dtype=float)
    if range_sigma < 0 or azimuth_sigma < 0 or elevation_sigma < 0:
        raise ValueError("noise standard deviations must be nonnegative")

    lam_th = np.exp(-azimuth_sigma ** 2 / 2.0)
    lam_ph = np.exp(-elevation_sigma ** 2 / 2.0)
    lam2_th = np.exp(-2.0 * azimuth_sigma ** 2)
    lam2_ph = np.exp(-2.0 * elevation_sigma ** 2)

    cos_th, sin_th = np.cos(th), np.sin(th)
    cos_ph, sin_ph = np.cos(ph), np.sin(ph)
    inv = 1.0 / (lam_th * lam_ph)

    p = np.stack([inv * r * cos_ph * cos_th,
                  inv * r * cos_ph * sin_th,
                  (1.0 / lam_ph) * r * sin_ph], axis=-1)
    mu = np.stack([(inv - lam_th * lam_ph) * r * cos_th * cos_ph,
                   (inv - lam_th * lam_ph) * r * sin_th * cos_ph,
                   (1.0 / lam_ph - lam_ph) * r * sin_ph], axis=-1)

    rr = r ** 2 + range_sigma ** 2
    cos2th, sin2th = np.cos(2 * th), np.sin(2 * th)
    cos2ph, sin2ph = np.cos(2 * ph), np.sin(2 * ph)
    sq = (lam_th * lam_ph * r) ** 2

    r11 = rr * (1 + lam2_th * cos2th) * (1 + lam2_ph * cos2ph) / 4.0 \
        - sq * cos_th ** 2 * cos_ph ** 2
    r22 = rr * (1 - lam2_th * cos2th) * (1 + lam2_ph * cos2ph) / 4.0 \
        - sq * sin_th ** 2 * cos_ph ** 2
    r33 = rr * (1 - lam2_ph * cos2ph) / 2.0 - (lam_ph * r) ** 2 * sin_ph ** 2
    r12 = rr * lam2_th * sin2th * (1 + lam2_ph * cos2ph) / 4.0 \
        - sq * sin_th * cos_th * cos_ph ** 2
    r13 = rr * lam_th * lam2_ph * cos_th * sin2ph / 2.0 \
        - lam_th * lam_ph ** 2 * r ** 2 * cos_th * sin_ph * cos_ph
    r23 = rr * lam_th * lam2_ph * sin_th * sin2ph / 2.0 \
        - lam_th * lam_ph ** 2 * r ** 2 * sin_th * sin_ph * cos_ph

    cov = np.empty(r.shape + (3, 3))
    cov[..., 0, 0] = r11
    cov[..., 1, 1] = r22
    cov[..., 2, 2] = r33
    cov[..., 0, 1] = cov[..., 1, 0] = r12
    cov[..., 0, 2] = cov[..., 2, 0] = r13
    cov[..., 1, 2] = cov[..., 2, 1] = r23
    return p, mu, cov


def convert_measurement(range_m: float, azimuth: float, elevation: float,
                        range_sigma: float, azimuth_sigma: float,
                        elevation_sigma: float, domain: str = VISUAL,
                        timestamp: float = 0.0,
                        appearance: Optional[np.ndarray] = None
                        ) -> ConvertedMeasurement:
    """Convert one polar detection to an unbiased Cartesian measurement.

    The measured range must be positive; angles are radians (azimuth in the
    horizontal plane, elevation from it).
    """
    if range_m <= 0:
        raise ValueError(f"measured range must be positive, got {range_m}")
    p, mu, cov = convert_arrays(range_m, azimuth, elevation,
                                range_sigma, azimuth_sigma, elevation_sigma)
    return ConvertedMeasurement(position=p, bias=mu, covariance=cov,
                                domain=domain, timestamp=timestamp,
                                appearance=appearance)


@dataclass
class TrackState:
    """One neighbor's filtered state: position+velocity, covariance, identity.

    ``x`` is [px, py, pz, vx, vy, vz] in the observer's relative frame;
    ``P`` its 6x6 covariance.  ``identity`` is the bound digital identity
    (None while unbound) and ``identity_epoch`` the binding's epoch so newer
    bindings win.
    """

    x: np.ndarray
    P: np.ndarray
    timestamp: float = 0.0
    identity: Optional[DigitalIdentity] = None
    identity_epoch: int = -1
    appearance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(6)
        self.P = np.asarray(self.P, dtype=float).reshape(6, 6)

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[3:]


def transition_matrix(dt: float) -> np.ndarray:
    """Constant-velocity transition: position advances by velocity * dt."""
    f = np.eye(6)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    return f


def process_noise(dt: float, q: float = DEFAULT_PROCESS_NOISE) -> np.ndarray:
    """White-acceleration process noise Q = q * G G^T, G = [dt^2/2 I; dt I]."""
    g = np.vstack([np.eye(3) * dt ** 2 / 2.0, np.eye(3) * dt])
    return q * (g @ g.T)


def track_from_measurement(m: ConvertedMeasurement,
                           velocity_sigma: float = DEFAULT_SPAWN_VELOCITY_SIGMA
                           ) -> TrackState:
    """Spawn a tentative track from one unassociated measurement.

    Position comes straight from the measurement with its noise covariance;
    velocity starts at zero with a wide prior.
    """
    x = np.concatenate([m.filter_position, np.zeros(3)])
    P = np.zeros((6, 6))
    P[:3, :3] = m.covariance
    P[3:, 3:] = np.eye(3) * velocity_sigma ** 2
    return TrackState(x=x, P=P, timestamp=m.timestamp, appearance=m.appearance)


def kf_predict(track: TrackState, dt: float,
               q: float = DEFAULT_PROCESS_NOISE) -> TrackState:
    """Advance a track by dt under the constant-velocity model."""
    if dt < 0:
        raise ValueError(f"prediction interval must be nonnegative, got {dt}")
    f = transition_matrix(dt)
    x = f @ track.x
    P = f @ track.P @ f.T + process_noise(dt, q)
    return replace(track, x=x, P=(P + P.T) / 2.0, timestamp=track.timestamp + dt)


def kf_update_linear(track: TrackState, z: np.ndarray, noise: np.ndarray,
                     observation: np.ndarray) -> TrackState:
    """General linear measurement update (z = observation @ x + noise).

    Raises numpy.linalg.LinAlgError when the innovation covariance is
    singular.  The posterior covariance is symmetrized to keep repeated
    updates numerically well-behaved.
    """
    z = np.asarray(z, dtype=float)
    noise = np.asarray(noise, dtype=float)
    h = np.asarray(observation, dtype=float)
    innovation = z - h @ track.x
    s = h @ track.P @ h.T + noise
    gain = np.linalg.solve(s.T, (track.P @ h.T).T).T
    x = track.x + gain @ innovation
    P = (np.eye(6) - gain @ h) @ track.P
    return replace(track, x=x, P=(P + P.T) / 2.0)


def kf_update(track: TrackState, m: ConvertedMeasurement) -> TrackState:
    """Position-only update from a converted measurement (bias removed)."""
    updated = kf_update_linear(track, m.filter_position, m.covariance, H_POSITION)
    if m.appearance is not None:
        updated.appearance = m.appearance
    return updated


def fuse_domains(track: TrackState,
                 visual: Optional[ConvertedMeasurement] = None,
                 auditory: Optional[ConvertedMeasurement] = None) -> TrackState:
    """Apply the visual then the auditory measurement of one fusion epoch.

    Either side may be absent.  For this linear model the update order only
    matters at numerical roundoff level.
    """
    if visual is not None:
        track = kf_update(track, visual)
    if auditory is not None:
        track = kf_update(track, auditory)
    return track


def bind_identity(track: TrackState, identity: DigitalIdentity,
                  epoch: int) -> TrackState:
    """Bind a digital identity to the track; newer epochs replace older ones.

    A binding carrying an epoch not newer than the current one is a no-op, so
    stale match results cannot overwrite fresher ones.
    """
    if track.identity is not None and epoch <= track.identity_epoch:
        return track
    return replace(track, identity=identity, identity_epoch=epoch)


def nees(track: TrackState, true_state: np.ndarray) -> float:
    """Normalized estimation error squared against a ground-truth state."""
    err = track.x - np.asarray(true_state, dtype=float).reshape(6)
    return float(err @ np.linalg.solve(track.P, err))
