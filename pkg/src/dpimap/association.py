"""Frame-to-frame association of visual measurements with predicted tracks.

Between identity-matching epochs, each fresh visual detection must be handed
to the track it continues.  Scores are clamped cosines between the measured
position and each track's predicted position, optionally blended with
appearance similarity; a gate zeroes implausible pairs; the assignment reuses
the cost-matrix machinery so the result is one-to-one with leftovers reported
both ways.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .identity import COST_CAP, SIMILARITY_FLOOR, cosine_matrix
from .matching import AUCTION_ALPHA, AUCTION_EPSILON, CostMatrix, solve_cost_matrix
from .tracking import H_POSITION, ConvertedMeasurement, TrackState

DEFAULT_GATE_THRESHOLD = 0.5
DEFAULT_BLEND_GAMMA = 0.7

# Scale of the distance-based tie-break perturbation; far below any genuine
# cost difference at gate-passing scores (costs there are at most 2).
_TIE_BREAK_SCALE = 1e-9


@dataclass
class AssociationResult:
    """One-to-one association outcome plus the unmatched residue."""

    mapping: list[tuple[int, int]]           # (measurement index, track index)
    unassociated_measurements: list[int]
    unassociated_tracks: list[int]


def association_scores(measurements: Sequence[ConvertedMeasurement],
                       tracks: Sequence[TrackState],
                       blend_gamma: Optional[float] = DEFAULT_BLEND_GAMMA,
                       observation: np.ndarray = H_POSITION) -> np.ndarray:
    """Score matrix S[k, i] between measurement k and track i, in [0, 1].

    The positional score is the clamped cosine between the measured position
    and the track's predicted observation.  When ``blend_gamma`` is set and
    both sides carry an appearance vector, the score becomes
    gamma * positional + (1 - gamma) * appearance-cosine; pairs lacking
    appearance fall back to the pure positional score.
    """
    if blend_gamma is not None and not 0.0 <= blend_gamma <= 1.0:
        raise ValueError("blend_gamma must lie in [0, 1]")
    if not measurements or not tracks:
        return np.zeros((len(measurements), len(tracks)))
    obs = np.asarray(observation, dtype=float)
    positions = np.vstack([m.position for m in measurements])
    predicted = np.vstack([obs @ t.x for t in tracks])
    scores = cosine_matrix(positions, predicted)
    if blend_gamma is not None:
        with_app_m = [k for k, m in enumerate(measurements) if m.appearance is not None]
        with_app_t = [i for i, t in enumerate(tracks) if t.appearance is not None]
        if with_app_m and with_app_t:
            app_m = np.vstack([measurements[k].appearance for k in with_app_m])
            app_t = np.vstack([tracks[i].appearance for i in with_app_t])
            blended = cosine_matrix(app_m, app_t)
            rows = np.asarray(with_app_m)[:, None]
            cols = np.asarray(with_app_t)[None, :]
            scores[rows, cols] = (blend_gamma * scores[rows, cols]
                                  + (1.0 - blend_gamma) * blended)
    return scores


def gate(scores: np.ndarray, threshold: float = DEFAULT_GATE_THRESHOLD) -> np.ndarray:
    """Zero out scores below the gate threshold (their cost becomes the cap)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("gate threshold must lie in [0, 1]")
    gated = np.array(scores, dtype=float)
    gated[gated < threshold] = 0.0
    return gated


def associate(measurements: Sequence[ConvertedMeasurement],
              tracks: Sequence[TrackState],
              gate_threshold: float = DEFAULT_GATE_THRESHOLD,
              blend_gamma: Optional[float] = DEFAULT_BLEND_GAMMA,
              observation: np.ndarray = H_POSITION,
              alpha: float = AUCTION_ALPHA,
              epsilon: float = AUCTION_EPSILON) -> AssociationResult:
    """Associate measurements with tracks by maximal gated similarity.

    Equivalent to minimizing reciprocal similarity with the one-to-one
    matcher; geometric ties (collinear predictions) break toward the smaller
    Euclidean distance between measurement and prediction, then the lower
    index.  Measurements or tracks whose every option is gated out land in
    the unassociated lists.
    """
    num_m, num_t = len(measurements), len(tracks)
    if num_m == 0 or num_t == 0:
        return AssociationResult(mapping=[],
                                 unassociated_measurements=list(range(num_m)),
                                 unassociated_tracks=list(range(num_t)))
    scores = gate(association_scores(measurements, tracks,
                                     blend_gamma=blend_gamma,
                                     observation=observation),
                  threshold=gate_threshold)
    obs = np.asarray(observation, dtype=float)
    positions = np.vstack([m.position for m in measurements])
    predicted = np.vstack([obs @ t.x for t in tracks])
    costs = np.minimum(1.0 / np.maximum(scores, SIMILARITY_FLOOR), COST_CAP)
    dists = np.linalg.norm(positions[:, None, :] - predicted[None, :, :], axis=2)
    costs = costs + _TIE_BREAK_SCALE * dists / (1.0 + dists)
    side = max(num_m, num_t)
    entries = np.full((side, side), COST_CAP)
    entries[:num_m, :num_t] = costs
    cost_matrix = CostMatrix(entries=entries, num_visual=num_m, num_auditory=num_t)
    solved = solve_cost_matrix(cost_matrix, alpha=alpha, epsilon=epsilon)

    mapping = [(k, i) for k, i, c in solved.pairs if c < COST_CAP]
    mapped_m = {k for k, _ in mapping}
    mapped_t = {i for _, i in mapping}
    return AssociationResult(
        mapping=mapping,
        unassociated_measurements=[k for k in range(num_m) if k not in mapped_m],
        unassociated_tracks=[i for i in range(num_t) if i not in mapped_t])
