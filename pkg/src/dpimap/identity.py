"""Identity containers and the similarity algebra used to compare them.

A UAV perceives each neighbor through two channels: radio beacons carrying a
digital identity (D-ID) plus self-reported kinematics, and onboard sensors
producing anonymous physical observations (P-ID).  This module defines the
containers for both kinds of identity and the similarity machinery (clamped
cosine, per-feature distinguishability, dynamic weights, weighted harmonic
similarity, matching cost) that the bipartite matcher consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

# Norms below this are treated as zero vectors in cosine comparisons.
ZERO_NORM_TOL = 1e-9
# Per-slot similarity floor applied before harmonic averaging (avoids 1/0).
SIMILARITY_FLOOR = 1e-6
# Sentinel cost: caps real costs and marks virtual padding in cost matrices.
COST_CAP = 1e6

VISUAL = "visual"
AUDITORY = "auditory"

# Distinguishability variants (see distinguishability()).
DISTINGUISH_EXACTLY_ONE = "exactly_one"
DISTINGUISH_ALL_DIFFERENT = "all_different"


def _as_feature(values) -> np.ndarray:
    """Validate and return one feature vector as a float array.

    Feature vectors must be 1-D, at least 2-dimensional (cosine of scalars is
    just a sign) and finite.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"feature vector must be 1-D with dimension >= 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature vector entries must be finite")
    return arr


@dataclass(frozen=True)
class DigitalIdentity:
    """Opaque unique network address of one UAV (the D-ID)."""

    address: Hashable

    def __str__(self) -> str:
        return str(self.address)


@dataclass
class PhysicalIdentity:
    """One observed UAV's physical features in one domain at one epoch.

    ``features`` is an ordered list of K_f feature vectors (slot k holds one
    feature, e.g. relative position or relative velocity).  All identities
    compared in a matching call must share K_f and per-slot dimensions.
    """

    features: list[np.ndarray]
    domain: str
    epoch: int = 0

    def __post_init__(self):
        if self.domain not in (VISUAL, AUDITORY):
            raise ValueError(f"domain must be '{VISUAL}' or '{AUDITORY}', got {self.domain!r}")
        if len(self.features) < 1:
            raise ValueError("a physical identity needs at least one feature slot")
        self.features = [_as_feature(f) for f in self.features]

    @property
    def num_slots(self) -> int:
        return len(self.features)


@dataclass
class ObservationSet:
    """All physical identities one node collected in one domain at one epoch.

    Auditory sets carry exactly one DigitalIdentity per member (beacons are
    signed); visual sets carry none (sensors see anonymous bodies).
    """

    identities: list[PhysicalIdentity] = field(default_factory=list)
    digital_ids: Optional[list[DigitalIdentity]] = None

    def __post_init__(self):
        if self.identities:
            ref = self.identities[0]
            for ident in self.identities[1:]:
                if ident.domain != ref.domain or ident.epoch != ref.epoch:
                    raise ValueError("all identities in a set must share domain and epoch")
                if ident.num_slots != ref.num_slots:
                    raise ValueError("all identities in a set must share the feature schema")
                for a, b in zip(ident.features, ref.features):
                    if a.shape != b.shape:
                        raise ValueError("per-slot feature dimensions must match across the set")
        if self.domain == AUDITORY:
            if self.digital_ids is None or len(self.digital_ids) != len(self.identities):
                raise ValueError("auditory sets need one digital identity per member")
        elif self.digital_ids is not None:
            raise ValueError("visual sets must not carry digital identities")

    @property
    def domain(self) -> str:
        return self.identities[0].domain if self.identities else (
            AUDITORY if self.digital_ids is not None else VISUAL)

    @property
    def size(self) -> int:
        return len(self.identities)

    @property
    def num_slots(self) -> int:
        return self.identities[0].num_slots if self.identities else 0

    def feature_slot(self, k: int) -> list[np.ndarray]:
        """All members' feature vectors for slot k, in member order."""
        return [ident.features[k] for ident in self.identities]


@dataclass
class WeightVector:
    """Per-feature-slot weights: raw distinguishability means and normalized form."""

    raw: np.ndarray
    normalized: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        self.normalized = np.asarray(self.normalized, dtype=float)
        if self.raw.shape != self.normalized.shape or self.raw.ndim != 1:
            raise ValueError("raw and normalized weights must be 1-D with equal length")
        if np.any(self.normalized < 0) or abs(self.normalized.sum() - 1.0) > 1e-9:
            raise ValueError("normalized weights must be nonnegative and sum to 1")

    @classmethod
    def from_raw(cls, raw) -> "WeightVector":
        """Normalize raw weights to sum 1; all-zero raw falls back to uniform."""
        raw = np.asarray(raw, dtype=float)
        total = raw.sum()
        if total <= 0:
            normalized = np.full(raw.shape, 1.0 / raw.size)
        else:
            normalized = raw / total
        return cls(raw=raw, normalized=normalized)

    @classmethod
    def uniform(cls, num_slots: int) -> "WeightVector":
        return cls.from_raw(np.ones(num_slots))


def cosine_matrix(a, b, magnitude_scale: Optional[float] = None) -> np.ndarray:
    """Clamped cosine similarities between two stacks of vectors.

    ``a`` is (Ka, d) and ``b`` (Kb, d); the result is (Ka, Kb) and matches
    cosine_similarity entrywise, including the zero-norm conventions and the
    optional magnitude damping.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero_a = na < ZERO_NORM_TOL
    zero_b = nb < ZERO_NORM_TOL
    denom = np.outer(np.where(zero_a, 1.0, na), np.where(zero_b, 1.0, nb))
    scores = np.clip((a @ b.T) / denom, 0.0, None)
    both_zero = np.outer(zero_a, zero_b)
    either_zero = zero_a[:, None] | zero_b[None, :]
    scores[either_zero] = 0.0
    scores[both_zero] = 1.0
    if magnitude_scale is not None:
        if magnitude_scale <= 0:
            raise ValueError("magnitude_scale must be positive")
        scores *= np.exp(-np.abs(na[:, None] - nb[None, :]) / magnitude_scale)
    return scores


def cosine_similarity(a, b, magnitude_scale: Optional[float] = None) -> float:
    """Clamped cosine similarity of two feature vectors, in [0, 1].

    Negative cosines clamp to 0 so the score composes like a probability.
    Zero vectors (norm below ZERO_NORM_TOL) compare as identical when both are
    zero (two hovering UAVs have the same relative velocity) and as maximally
    different when only one is.

    With ``magnitude_scale`` set, the score is additionally damped by
    exp(-|‖a‖-‖b‖| / magnitude_scale), which separates collinear vectors of
    different length.  Off by default: the plain cosine is the reference
    behavior.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_TOL and nb < ZERO_NORM_TOL:
        return 1.0
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        return 0.0
    score = max(0.0, float(np.dot(a, b) / (na * nb)))
    if magnitude_scale is not None:
        if magnitude_scale <= 0:
            raise ValueError("magnitude_scale must be positive")
        score *= float(np.exp(-abs(na - nb) / magnitude_scale))
    return score


def distinguishability_profile(similarities: np.ndarray,
                               mode: str = DISTINGUISH_EXACTLY_ONE) -> np.ndarray:
    """All members' distinguishability given their pairwise similarity matrix.

    ``similarities`` is the (K, K) clamped-cosine matrix of one feature slot
    (the diagonal is ignored).  Row i of the result is

        p_i = sum_{j != i} D(i,j) * prod_{m != i, m != j} (1 - D(i,m))

    in the default mode, or prod_{j != i} (1 - D(i,j)) in 'all_different'
    mode.  Computed matrix-wise with explicit handling of exact-1 entries
    (whose complement products would otherwise divide by zero).
    """
    if mode not in (DISTINGUISH_EXACTLY_ONE, DISTINGUISH_ALL_DIFFERENT):
        raise ValueError(f"unknown distinguishability mode {mode!r}")
    d = np.clip(np.array(similarities, dtype=float), 0.0, 1.0)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if n == 1:
        return np.ones(1)
    np.fill_diagonal(d, 0.0)
    g = 1.0 - d
    np.fill_diagonal(g, 1.0)

    if mode == DISTINGUISH_ALL_DIFFERENT:
        return np.prod(g, axis=1)

    zero_counts = np.sum(g == 0.0, axis=1)
    profile = np.zeros(n)
    # No identical twin: p_i = P_i * sum_j d_ij / g_ij with P_i = prod_m g_im.
    safe = zero_counts == 0
    if np.any(safe):
        prods = np.prod(g[safe], axis=1)
        profile[safe] = prods * np.sum(d[safe] / g[safe], axis=1)
    # Exactly one twin: only the j with d_ij = 1 contributes.
    single = zero_counts == 1
    for i in np.flatnonzero(single):
        j = int(np.flatnonzero(g[i] == 0.0)[0])
        mask = np.ones(n, dtype=bool)
        mask[j] = False
        profile[i] = d[i, j] * np.prod(g[i, mask])
    # Two or more twins: every term carries a zero factor.
    return np.clip(profile, 0.0, 1.0)


def distinguishability(feature_slot: Sequence[np.ndarray], i: int,
                       mode: str = DISTINGUISH_EXACTLY_ONE) -> float:
    """How informative member i's feature is within one slot, in [0, 1].

    The default evaluates the probability that the feature pairs member i
    with exactly one other member; ``mode='all_different'`` instead returns
    the probability the feature differs from every other member (the two
    readings the source material supports; the first is the default).  A
    singleton slot scores 1: with nothing to confuse, the feature is fully
    distinguishing.
    """
    n = len(feature_slot)
    if n < 1:
        raise ValueError("feature slot must have at least one member")
    if not 0 <= i < n:
        raise ValueError(f"index {i} out of range for slot of size {n}")
    if n == 1:
        return 1.0
    stacked = np.vstack([np.asarray(f, dtype=float) for f in feature_slot])
    return float(distinguishability_profile(cosine_matrix(stacked, stacked), mode=mode)[i])


def dynamic_weights(obs_set: ObservationSet, mode: str = DISTINGUISH_EXACTLY_ONE) -> WeightVector:
    """Per-slot weights: mean member distinguishability, normalized to sum 1.

    Computed over whichever set is passed in; the pipeline feeds the visual
    set by convention.  All-zero raw weights fall back to uniform.
    """
    if obs_set.size == 0:
        raise ValueError("cannot compute weights for an empty observation set")
    raw = np.empty(obs_set.num_slots)
    for k in range(obs_set.num_slots):
        slot = np.vstack(obs_set.feature_slot(k))
        profile = distinguishability_profile(cosine_matrix(slot, slot), mode=mode)
        raw[k] = float(profile.mean())
    return WeightVector.from_raw(raw)


def pairwise_similarity(vf: PhysicalIdentity, af: PhysicalIdentity, w: WeightVector,
                        magnitude_scales: Optional[Sequence[Optional[float]]] = None) -> float:
    """Weighted harmonic mean of per-slot cosine similarities, in (0, 1].

    s = [ sum_k w'_k / D_k ]^{-1} with each D_k floored at SIMILARITY_FLOOR
    so one orthogonal slot drives the score toward zero without dividing by
    zero.  ``magnitude_scales`` optionally enables the magnitude-aware cosine
    per slot (None entries keep the plain cosine).
    """
    if vf.num_slots != af.num_slots:
        raise ValueError("identities must share the feature schema")
    weights = w.normalized
    if len(weights) != vf.num_slots:
        raise ValueError("weight vector length must equal the number of feature slots")
    if magnitude_scales is None:
        magnitude_scales = [None] * vf.num_slots
    denom = 0.0
    for k in range(vf.num_slots):
        d = cosine_similarity(vf.features[k], af.features[k], magnitude_scale=magnitude_scales[k])
        denom += weights[k] / max(d, SIMILARITY_FLOOR)
    return 1.0 / denom


def matching_cost(s: float) -> float:
    """Reciprocal similarity, capped at COST_CAP; the matcher's currency."""
    if s <= 0:
        raise ValueError(f"similarity must be positive, got {s}")
    return min(1.0 / s, COST_CAP)
