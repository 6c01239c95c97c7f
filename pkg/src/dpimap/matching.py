"""One-to-one matching of visual and auditory identity sets.

Pipeline: build a padded square cost matrix from pairwise similarities, take
per-row argmin as the initial match, resolve conflicts with a forward
epsilon-auction (per-column prices, Gauss-Seidel bidding), then run a local
exchange pass that trades matched pairs to flatten cost outliers.  The
brute-force reference solver is kept alongside for validation.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .identity import (
    COST_CAP,
    SIMILARITY_FLOOR,
    ObservationSet,
    WeightVector,
    cosine_matrix,
    dynamic_weights,
)

# Default auction parameters: bid scaling and minimum price increment.
AUCTION_ALPHA = 1.0
AUCTION_EPSILON = 0.02

# Tolerances for the exchange-pass tie guards (absolute, on cost scale).
_EXCHANGE_SUM_TOL = 1e-12
_EXCHANGE_STD_TOL = 1e-15


@dataclass
class CostMatrix:
    """Square matching-cost matrix with virtual padding bookkeeping.

    Rows are visual identities, columns auditory.  A rectangular problem is
    padded to side max(K_v, K_a) with COST_CAP entries; padded rows/columns
    are "virtual" and their assignments are stripped from results.  An empty
    side yields an empty matrix.
    """

    entries: np.ndarray
    num_visual: int
    num_auditory: int

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        side = self.entries.shape[0] if self.entries.size else 0
        expected = max(self.num_visual, self.num_auditory)
        if self.num_visual == 0 or self.num_auditory == 0:
            expected = 0
        if self.entries.shape != (expected, expected) or side != expected:
            raise ValueError(
                f"entries must be square of side {expected}, got {self.entries.shape}")

    @property
    def side(self) -> int:
        return self.entries.shape[0]

    def is_virtual_row(self, i: int) -> bool:
        return i >= self.num_visual

    def is_virtual_col(self, j: int) -> bool:
        return j >= self.num_auditory


@dataclass
class AuctionState:
    """Mutable auction bookkeeping: prices, tentative assignment, bid queue."""

    prices: np.ndarray
    row_to_col: np.ndarray   # -1 where unassigned
    col_to_row: np.ndarray   # -1 where unassigned
    unassigned: deque = field(default_factory=deque)
    iterations: int = 0


@dataclass
class AssignmentResult:
    """Final matching: real pairs with costs, leftovers, and cost statistics.

    ``f1`` is the mean matched cost and ``f2`` the population standard
    deviation of matched costs, both over N = min(K_v, K_a) pairs; they are
    0.0 when no real pairs exist.
    """

    pairs: list[tuple[int, int, float]]
    unmatched_visual: list[int]
    unmatched_auditory: list[int]
    f1: float
    f2: float

    @property
    def assignment_matrix(self) -> np.ndarray:
        """0/1 matrix over real indices with a 1 per matched (visual, auditory)."""
        num_v = len(self.unmatched_visual) + len(self.pairs)
        num_a = len(self.unmatched_auditory) + len(self.pairs)
        mat = np.zeros((num_v, num_a), dtype=np.int8)
        for i, j, _ in self.pairs:
            mat[i, j] = 1
        return mat

    @property
    def total_cost(self) -> float:
        return float(sum(c for _, _, c in self.pairs))


def cost_matrix_from_slots(visual_slots: Sequence[np.ndarray],
                           auditory_slots: Sequence[np.ndarray],
                           w: WeightVector,
                           magnitude_scales: Optional[Sequence[Optional[float]]] = None
                           ) -> CostMatrix:
    """Vectorized cost-matrix construction from per-slot feature stacks.

    ``visual_slots[k]`` is the (K_v, d_k) stack of slot-k features (likewise
    for auditory).  Entrywise identical to building costs via
    pairwise_similarity and matching_cost: the reciprocal of the weighted
    harmonic similarity is just the weighted sum of reciprocal floored
    cosines, capped at COST_CAP.
    """
    kv = visual_slots[0].shape[0] if visual_slots else 0
    ka = auditory_slots[0].shape[0] if auditory_slots else 0
    if kv == 0 or ka == 0:
        return CostMatrix(entries=np.zeros((0, 0)), num_visual=kv, num_auditory=ka)
    if magnitude_scales is None:
        magnitude_scales = [None] * len(visual_slots)
    weights = w.normalized
    if len(weights) != len(visual_slots) or len(visual_slots) != len(auditory_slots):
        raise ValueError("weights and slot stacks must agree on the number of slots")
    reciprocal = np.zeros((kv, ka))
    for k, (vf, af) in enumerate(zip(visual_slots, auditory_slots)):
        sims = cosine_matrix(vf, af, magnitude_scale=magnitude_scales[k])
        reciprocal += weights[k] / np.maximum(sims, SIMILARITY_FLOOR)
    costs = np.minimum(reciprocal, COST_CAP)
    side = max(kv, ka)
    entries = np.full((side, side), COST_CAP)
    entries[:kv, :ka] = costs
    return CostMatrix(entries=entries, num_visual=kv, num_auditory=ka)


def build_cost_matrix(visual_set: ObservationSet, auditory_set: ObservationSet,
                      w: WeightVector,
                      magnitude_scales: Optional[Sequence[Optional[float]]] = None
                      ) -> CostMatrix:
    """Pairwise matching costs between two observation sets, square-padded."""
    kv, ka = visual_set.size, auditory_set.size
    if kv == 0 or ka == 0:
        return CostMatrix(entries=np.zeros((0, 0)), num_visual=kv, num_auditory=ka)
    visual_slots = [np.vstack(visual_set.feature_slot(k)) for k in range(visual_set.num_slots)]
    auditory_slots = [np.vstack(auditory_set.feature_slot(k)) for k in range(auditory_set.num_slots)]
    return cost_matrix_from_slots(visual_slots, auditory_slots, w,
                                  magnitude_scales=magnitude_scales)


def initial_match(cost: CostMatrix) -> np.ndarray:
    """Per-row argmin assignment (ties to the lowest column); may conflict."""
    if cost.side == 0:
        return np.empty(0, dtype=int)
    return np.argmin(cost.entries, axis=1)


# Ratio between consecutive slack levels in the coarse-to-fine schedule.
_EPSILON_PHASE_SCALE = 10.0


def resolve_conflicts(cost: CostMatrix, state: Optional[AuctionState] = None,
                      alpha: float = AUCTION_ALPHA,
                      epsilon: float = AUCTION_EPSILON) -> AuctionState:
    """Forward epsilon-auction that turns the initial match into a one-to-one one.

    Seeding keeps every uncontested argmin; each contested column keeps its
    cheapest bidder (lowest row on ties) and the rest queue up.  Unassigned
    rows then bid in FIFO order: row i takes its cheapest effective column j1
    (entry plus price) and raises its price by alpha * (second_best - best +
    epsilon), evicting any current owner.

    When the cost spread dwarfs epsilon, bidding starts at a coarser slack
    and tightens it by factors of ten down to the configured epsilon
    (epsilon scaling); each tightening re-queues exactly the rows whose held
    column is no longer within the new slack of their cheapest option.  The
    schedule is sized to the spread of the sub-cap entries alone: capped
    pairs are as bad as going unmatched, so prices never need to climb to
    their scale.

    The sub-cap sizing has one blind spot: when the viable entries admit no
    perfect matching, somebody has to swallow a capped pair, and reaching it
    means walking a viable column's price across the whole cap gap in
    slack-sized steps.  Each phase therefore carries an iteration budget;
    a phase that fails to drain inside it gets a ten-times-coarser phase
    spliced in front (repeatedly if needed), and the descent then runs back
    down through the spliced levels.  That is still plain epsilon scaling,
    just extended upward on demand, so the guarantee below is unaffected.

    Prices never decrease, the final phase runs at the configured epsilon,
    and with alpha <= 1 the final matching is within side * alpha * epsilon
    of the optimal total cost; without the scaling, near-tied rows can walk
    prices across the full cost range in epsilon-sized steps.
    """
    if alpha <= 0 or epsilon <= 0:
        raise ValueError("alpha and epsilon must be positive")
    n = cost.side
    if state is None:
        state = _seed_state(cost)
    if n == 0:
        return state
    entries = cost.entries
    max_iterations = n * n * (COST_CAP / (alpha * epsilon) + 1.0)
    finite = entries[entries < COST_CAP]
    spread = float(finite.max() - finite.min()) if finite.size else 0.0
    slacks = [epsilon]
    while slacks[-1] * _EPSILON_PHASE_SCALE < spread / 2.0:
        slacks.append(slacks[-1] * _EPSILON_PHASE_SCALE)
    slacks.reverse()
    idx = 0
    escalations = 0
    while idx < len(slacks):
        slack = slacks[idx]
        if idx > 0 or escalations > 0:
            _queue_slack_violators(entries, state, slack)
        budget = (64.0 + 16.0 * n * n + 4.0 * n * (spread / slack + 1.0)) * 2.0 ** escalations
        if _bid_until_assigned(entries, state, alpha, slack, max_iterations, budget):
            idx += 1
            escalations = 0
        else:
            top = float(entries.max() - entries.min())
            ladder = [slack * _EPSILON_PHASE_SCALE]
            while ladder[-1] * _EPSILON_PHASE_SCALE < top / 2.0:
                ladder.append(ladder[-1] * _EPSILON_PHASE_SCALE)
            slacks[idx:idx] = ladder[::-1]
            escalations += 1
    return state


def _bid_until_assigned(entries: np.ndarray, state: AuctionState, alpha: float,
                        slack: float, max_iterations: float,
                        budget: float = np.inf) -> bool:
    """One auction phase: drain the unassigned queue at the given slack.

    Returns False if the budget ran out first (queue left non-empty)."""
    n = entries.shape[0]
    spent = 0
    while state.unassigned:
        spent += 1
        if spent > budget:
            return False
        state.iterations += 1
        if state.iterations > max_iterations:
            raise RuntimeError("auction failed to terminate within its iteration bound")
        i = state.unassigned.popleft()
        effective = entries[i] + state.prices
        j1 = int(np.argmin(effective))
        if n > 1:
            best = float(effective[j1])
            effective[j1] = np.inf
            increment = alpha * (float(effective.min()) - best + slack)
        else:
            increment = alpha * slack
        state.prices[j1] += increment
        previous = state.col_to_row[j1]
        if previous >= 0:
            state.row_to_col[previous] = -1
            state.unassigned.append(int(previous))
        state.row_to_col[i] = j1
        state.col_to_row[j1] = i
    return True


def _queue_slack_violators(entries: np.ndarray, state: AuctionState,
                           slack: float) -> None:
    """Unassign rows whose held column exceeds their cheapest option + slack."""
    held = np.flatnonzero(state.row_to_col >= 0)
    if held.size == 0:
        return
    effective = entries[held] + state.prices
    cols = state.row_to_col[held]
    bad = effective[np.arange(held.size), cols] > effective.min(axis=1) + slack + 1e-12
    for i, j in zip(held[bad], cols[bad]):
        state.row_to_col[i] = -1
        state.col_to_row[j] = -1
        state.unassigned.append(int(i))


def _seed_state(cost: CostMatrix) -> AuctionState:
    """Auction state seeded from the initial match, conflicts queued.

    Virtual padding columns start with a negative price that discounts them
    to just above the dearest viable real entry: the auction is free to start
    from any price vector, and without the discount every row that must end
    up virtual first walks a real column's price all the way to COST_CAP.
    """
    n = cost.side
    state = AuctionState(prices=np.zeros(n),
                         row_to_col=np.full(n, -1, dtype=int),
                         col_to_row=np.full(n, -1, dtype=int))
    if n == 0:
        return state
    if cost.num_auditory < n:
        real = cost.entries[:, :cost.num_auditory]
        viable = real[real < COST_CAP]
        if viable.size:
            state.prices[cost.num_auditory:] = float(viable.max()) + 1.0 - COST_CAP
    wanted = initial_match(cost)
    for j in range(n):
        bidders = np.flatnonzero(wanted == j)
        if bidders.size == 0:
            continue
        winner = bidders[np.argmin(cost.entries[bidders, j])]
        state.row_to_col[winner] = j
        state.col_to_row[j] = winner
    state.unassigned.extend(int(i) for i in range(n) if state.row_to_col[i] < 0)
    return state


def exchange_pass(cost: CostMatrix, row_to_col: np.ndarray) -> np.ndarray:
    """Swap matched partners wherever that flattens the cost profile.

    Pairs are scanned from most expensive down.  A swap of (i,j) and (p,q)
    into (i,q) and (p,j) is taken only when it is an all-around improvement:

      * the scanned cost dominates both cross costs,
        c(i,j) >= max(c(i,q), c(p,j));
      * the more expensive of the two pairs strictly drops,
        max(c(i,q), c(p,j)) < max(c(i,j), c(p,q));
      * the summed cost of the two pairs does not grow;
      * the standard deviation of all matched costs does not grow.

    The last two guards keep the pass from undoing the auction's near-optimal
    total while it narrows the spread.  Among eligible partners the swap with
    the lowest resulting pair maximum wins (then lowest p, then lowest q); the
    scan restarts after every swap and stops at a full quiet pass.
    """
    entries = cost.entries
    n = cost.side
    assignment = np.array(row_to_col, dtype=int)
    if n < 2:
        return assignment

    rows = np.arange(n)
    improved = True
    while improved:
        improved = False
        costs = entries[rows, assignment]
        order = np.lexsort((rows, -costs))
        sum1 = float(np.sum(costs))
        sum2 = float(np.sum(costs * costs))
        current_std = math.sqrt(max(sum2 / n - (sum1 / n) ** 2, 0.0))
        for i in order:
            j = assignment[i]
            c_ij = float(entries[i, j])
            # Candidate partners evaluated in one shot: partner p currently
            # holds q = assignment[p]; the swap would cost c(i,q) and c(p,j).
            c_pq = costs
            c_iq = entries[i, assignment]
            c_pj = entries[:, j]
            high = np.maximum(c_iq, c_pj)
            new_sum1 = sum1 - c_ij - c_pq + c_iq + c_pj
            new_sum2 = sum2 - c_ij * c_ij - c_pq * c_pq + c_iq * c_iq + c_pj * c_pj
            new_std = np.sqrt(np.maximum(new_sum2 / n - (new_sum1 / n) ** 2, 0.0))
            eligible = ((c_ij >= high)
                        & (high < np.maximum(c_ij, c_pq))
                        & (c_iq + c_pj <= c_ij + c_pq + _EXCHANGE_SUM_TOL)
                        & (new_std <= current_std + _EXCHANGE_STD_TOL))
            eligible[i] = False
            if np.any(eligible):
                ranked = np.where(eligible, high, np.inf)
                p = int(np.flatnonzero(ranked == ranked.min())[0])
                assignment[i], assignment[p] = assignment[p], j
                improved = True
                break
    return assignment


def _finalize(cost: CostMatrix, row_to_col: np.ndarray) -> AssignmentResult:
    """Strip virtual pairs and compute cost statistics over the real ones."""
    pairs = []
    for i, j in enumerate(row_to_col):
        if i < cost.num_visual and j < cost.num_auditory:
            pairs.append((int(i), int(j), float(cost.entries[i, j])))
    pairs.sort()
    matched_v = {i for i, _, _ in pairs}
    matched_a = {j for _, j, _ in pairs}
    unmatched_v = [i for i in range(cost.num_visual) if i not in matched_v]
    unmatched_a = [j for j in range(cost.num_auditory) if j not in matched_a]
    if pairs:
        values = np.array([c for _, _, c in pairs])
        f1 = float(values.mean())
        f2 = float(np.sqrt(np.mean((values - f1) ** 2)))
    else:
        f1 = f2 = 0.0
    return AssignmentResult(pairs=pairs, unmatched_visual=unmatched_v,
                            unmatched_auditory=unmatched_a, f1=f1, f2=f2)


def _viable_components(viable: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Connected components of the bipartite viability graph.

    Rows and columns joined by sub-cap entries form a component; rows or
    columns with no viable entry at all belong to none.  Components come out
    ordered by their lowest row index, members sorted.
    """
    kv, ka = viable.shape
    row_open = viable.any(axis=1)
    col_open = viable.any(axis=0)
    comps = []
    for r0 in range(kv):
        if not row_open[r0]:
            continue
        in_rows = np.zeros(kv, dtype=bool)
        in_cols = np.zeros(ka, dtype=bool)
        in_rows[r0] = True
        frontier = in_rows.copy()
        while True:
            new_cols = col_open & ~in_cols & viable[frontier].any(axis=0)
            if not new_cols.any():
                break
            in_cols |= new_cols
            new_rows = row_open & ~in_rows & viable[:, new_cols].any(axis=1)
            if not new_rows.any():
                break
            in_rows |= new_rows
            frontier = new_rows
        row_open &= ~in_rows
        col_open &= ~in_cols
        comps.append((np.flatnonzero(in_rows), np.flatnonzero(in_cols)))
    return comps


def _solve_assignment(cost: CostMatrix, alpha: float, epsilon: float) -> np.ndarray:
    """Row-to-column permutation minimizing total cost (within the epsilon bound).

    Capped entries mark pairs as bad as staying unmatched, so the problem
    splits along them: each connected component of sub-cap entries is
    auctioned independently (singleton components shortcut to an argmin) and
    the leftovers are paired up arbitrarily but deterministically, which
    costs exactly the cap per pair either way.
    """
    n = cost.side
    viable = cost.entries[:cost.num_visual, :cost.num_auditory] < COST_CAP
    if viable.all():
        return resolve_conflicts(cost, alpha=alpha, epsilon=epsilon).row_to_col
    comps = _viable_components(viable)
    row_to_col = np.full(n, -1, dtype=int)
    col_taken = np.zeros(n, dtype=bool)
    for rows, cols in comps:
        if rows.size == 1 and cols.size == 1:
            row_to_col[rows[0]] = cols[0]
        elif rows.size == 1:
            row_to_col[rows[0]] = cols[int(np.argmin(cost.entries[rows[0], cols]))]
        elif cols.size == 1:
            row_to_col[rows[int(np.argmin(cost.entries[rows, cols[0]]))]] = cols[0]
        else:
            side = max(rows.size, cols.size)
            sub = np.full((side, side), COST_CAP)
            sub[:rows.size, :cols.size] = cost.entries[np.ix_(rows, cols)]
            subcost = CostMatrix(entries=sub, num_visual=rows.size,
                                 num_auditory=cols.size)
            state = resolve_conflicts(subcost, alpha=alpha, epsilon=epsilon)
            for r_local, c_local in enumerate(state.row_to_col[:rows.size]):
                if c_local < cols.size:
                    row_to_col[rows[r_local]] = cols[c_local]
    assigned = row_to_col[row_to_col >= 0]
    col_taken[assigned] = True
    spare = iter(np.flatnonzero(~col_taken))
    for i in np.flatnonzero(row_to_col < 0):
        row_to_col[i] = next(spare)
    return row_to_col


def solve_cost_matrix(cost: CostMatrix, alpha: float = AUCTION_ALPHA,
                      epsilon: float = AUCTION_EPSILON) -> AssignmentResult:
    """Full matcher on a prebuilt cost matrix: auction, exchange, strip."""
    if cost.side == 0:
        return _finalize(cost, np.empty(0, dtype=int))
    assignment = _solve_assignment(cost, alpha=alpha, epsilon=epsilon)
    final = exchange_pass(cost, assignment)
    return _finalize(cost, final)


def bim_match(visual_set: ObservationSet, auditory_set: ObservationSet,
              w: Optional[WeightVector] = None,
              alpha: float = AUCTION_ALPHA, epsilon: float = AUCTION_EPSILON,
              magnitude_scales: Optional[Sequence[Optional[float]]] = None
              ) -> AssignmentResult:
    """Match a visual against an auditory observation set end to end.

    Builds weights from the visual set when none are supplied, then runs the
    cost-matrix pipeline.  Returns real (visual, auditory, cost) pairs plus
    the unmatched leftovers of the larger side.
    """
    if w is None:
        if visual_set.size == 0:
            w = WeightVector.uniform(max(visual_set.num_slots, auditory_set.num_slots, 1))
        else:
            w = dynamic_weights(visual_set)
    cost = build_cost_matrix(visual_set, auditory_set, w, magnitude_scales=magnitude_scales)
    return solve_cost_matrix(cost, alpha=alpha, epsilon=epsilon)


def brute_force_match(cost: CostMatrix, objective: str = "sum") -> AssignmentResult:
    """Exhaustive reference solver for validation; sides capped at 8.

    ``objective='sum'`` minimizes total real matched cost;
    ``'sum_plus_std'`` minimizes total plus population standard deviation.
    Ties break lexicographically on the column permutation, so the result is
    deterministic.
    """
    if objective not in ("sum", "sum_plus_std"):
        raise ValueError(f"unknown objective {objective!r}")
    n = cost.side
    if n == 0:
        return _finalize(cost, np.empty(0, dtype=int))
    if min(cost.num_visual, cost.num_auditory) > 8:
        raise ValueError("brute force is limited to 8 real rows/columns per side")
    rows = np.arange(n)
    best_perm = None
    best_value = None
    for perm in itertools.permutations(range(n)):
        cols = np.array(perm)
        real = (rows < cost.num_visual) & (cols < cost.num_auditory)
        values = cost.entries[rows[real], cols[real]]
        total = float(values.sum())
        if objective == "sum_plus_std":
            std = float(np.std(values)) if values.size else 0.0
            value = total + std
        else:
            value = total
        if best_value is None or value < best_value - 1e-15:
            best_value = value
            best_perm = cols
    return _finalize(cost, best_perm)
