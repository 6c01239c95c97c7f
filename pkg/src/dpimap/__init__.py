"""Dual-domain identity mapping for UAV swarms.

Matches digital identities heard over radio with physical identities seen by
onboard sensors, fuses both into per-neighbor tracks, and ships a swarm
simulator plus CLI for evaluating emergency-communication protocols on top.
"""

from .association import AssociationResult, associate, association_scores, gate
from .identity import (
    AUDITORY,
    COST_CAP,
    SIMILARITY_FLOOR,
    VISUAL,
    ZERO_NORM_TOL,
    DigitalIdentity,
    ObservationSet,
    PhysicalIdentity,
    WeightVector,
    cosine_matrix,
    cosine_similarity,
    distinguishability,
    distinguishability_profile,
    dynamic_weights,
    matching_cost,
    pairwise_similarity,
)
from .matching import (
    AUCTION_ALPHA,
    AUCTION_EPSILON,
    AssignmentResult,
    AuctionState,
    CostMatrix,
    bim_match,
    brute_force_match,
    build_cost_matrix,
    cost_matrix_from_slots,
    exchange_pass,
    initial_match,
    resolve_conflicts,
    solve_cost_matrix,
)
from .tracking import (
    ConvertedMeasurement,
    TrackState,
    bind_identity,
    convert_arrays,
    convert_measurement,
    fuse_domains,
    kf_predict,
    kf_update,
    kf_update_linear,
    nees,
    process_noise,
    track_from_measurement,
    transition_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "AUDITORY", "VISUAL", "ZERO_NORM_TOL", "SIMILARITY_FLOOR", "COST_CAP",
    "DigitalIdentity", "PhysicalIdentity", "ObservationSet", "WeightVector",
    "cosine_similarity", "cosine_matrix", "distinguishability",
    "distinguishability_profile", "dynamic_weights",
    "pairwise_similarity", "matching_cost",
    "AUCTION_ALPHA", "AUCTION_EPSILON", "CostMatrix", "AuctionState",
    "AssignmentResult", "build_cost_matrix", "cost_matrix_from_slots",
    "initial_match", "resolve_conflicts", "exchange_pass",
    "solve_cost_matrix", "bim_match", "brute_force_match",
    "ConvertedMeasurement", "TrackState", "convert_measurement",
    "convert_arrays", "transition_matrix", "process_noise",
    "track_from_measurement", "kf_predict", "kf_update", "kf_update_linear",
    "fuse_domains", "bind_identity", "nees",
    "AssociationResult", "association_scores", "gate", "associate",
    "__version__",
]
