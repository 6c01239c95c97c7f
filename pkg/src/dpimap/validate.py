"""Self-check suites: matcher optimality oracles and filter consistency.

Each check runs a seeded experiment against an independent oracle (brute
force enumeration, Monte Carlo statistics) and reports a metric next to the
threshold it must clear.  The CLI ``validate`` subcommand prints these
reports; the test suite asserts on the same functions so there is exactly
one implementation of each oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .matching import (AUCTION_ALPHA, AUCTION_EPSILON, CostMatrix,
                       brute_force_match, exchange_pass, solve_cost_matrix,
                       _finalize, _solve_assignment)
from .tracking import (DEFAULT_PROCESS_NOISE, convert_arrays,
                       convert_measurement, kf_predict, kf_update, nees,
                       process_noise, track_from_measurement,
                       transition_matrix)

_MATCHER_SEED = 20240531
_SEPARATED_SEED = 911
_CONVERSION_SEED = 77001
_FILTER_SEED = 424242


@dataclass
class CheckResult:
    """One validation check: a metric, the bar it must clear, the verdict."""
    name: str
    metric: float
    threshold: str
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name}: {self.metric:.6g} vs {self.threshold} ... {verdict}"


def random_reciprocal_matrices(count: int = 1000, side: int = 5,
                               seed: int = _MATCHER_SEED) -> list[np.ndarray]:
    """Seeded random cost matrices: entries uniform in (0, 1], reciprocated."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        u = 1.0 - rng.uniform(0.0, 1.0, size=(side, side))
        out.append(1.0 / u)
    return out


def separated_matrices(count: int = 500, side: int = 5,
                       seed: int = _SEPARATED_SEED) -> list[np.ndarray]:
    """Matrices whose diagonal is far cheaper than everything else."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        m = rng.uniform(50.0, 100.0, size=(side, side))
        np.fill_diagonal(m, rng.uniform(1.0, 2.0, size=side))
        out.append(m)
    return out


def matcher_suite() -> list[CheckResult]:
    """Matcher checks: auction bound, separated exactness, exchange balance."""
    matrices = random_reciprocal_matrices()
    side = matrices[0].shape[0]
    bound = side * AUCTION_ALPHA * AUCTION_EPSILON
    within = 0
    worst_gap = -math.inf
    max_regressions = 0
    spread_regressions = 0
    for m in matrices:
        cost = CostMatrix(entries=m.copy(), num_visual=side, num_auditory=side)
        result = solve_cost_matrix(cost)
        optimum = brute_force_match(
            CostMatrix(entries=m.copy(), num_visual=side, num_auditory=side))
        gap = result.total_cost - optimum.total_cost
        worst_gap = max(worst_gap, gap)
        if gap <= bound + 1e-9:
            within += 1

        # Exchange balancing on the same instance: compare the assignment
        # before and after the pass.
        cost2 = CostMatrix(entries=m.copy(), num_visual=side, num_auditory=side)
        raw = _solve_assignment(cost2, AUCTION_ALPHA, AUCTION_EPSILON)
        before = _finalize(cost2, raw)
        after = _finalize(cost2, exchange_pass(cost2, raw.copy()))
        max_before = max(c for _, _, c in before.pairs)
        max_after = max(c for _, _, c in after.pairs)
        if max_after > max_before:
            max_regressions += 1
        if after.f2 > before.f2:
            spread_regressions += 1

    checks = [
        CheckResult(name="auction total within brute-force bound",
                    metric=within,
                    threshold=f"= {len(matrices)} instances (worst gap "
                              f"{worst_gap:.4f}, bound {bound:.4f})",
                    passed=within == len(matrices)),
        CheckResult(name="exchange never raises max pair cost",
                    metric=max_regressions, threshold="= 0 regressions",
                    passed=max_regressions == 0),
        CheckResult(name="exchange never raises cost spread",
                    metric=spread_regressions, threshold="= 0 regressions",
                    passed=spread_regressions == 0),
    ]

    exact = 0
    separated = separated_matrices()
    for m in separated:
        cost = CostMatrix(entries=m.copy(), num_visual=m.shape[0],
                          num_auditory=m.shape[1])
        result = solve_cost_matrix(cost)
        if [(i, j) for i, j, _ in result.pairs] == [
                (k, k) for k in range(m.shape[0])]:
            exact += 1
    checks.insert(1, CheckResult(
        name="separated instances solved exactly",
        metric=exact, threshold=f"= {len(separated)} instances",
        passed=exact == len(separated)))
    return checks


def conversion_check(draws: int = 1_000_000,
                     seed: int = _CONVERSION_SEED) -> list[CheckResult]:
    """Monte Carlo unbiasedness of the polar-to-Cartesian conversion.

    Samples noisy polar measurements around a fixed truth point, converts
    them, and compares the sample mean and covariance of the converted
    positions with the truth position and the analytic noise covariance
    evaluated at the truth point.
    """
    r, th, ph = 100.0, math.pi / 4.0, math.pi / 6.0
    sr, sa, se = 1.0, 0.1, 0.1
    truth = np.array([r * math.cos(ph) * math.cos(th),
                      r * math.cos(ph) * math.sin(th),
                      r * math.sin(ph)])
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(draws, 3))
    p, _, _ = convert_arrays(r + noise[:, 0] * sr, th + noise[:, 1] * sa,
                             ph + noise[:, 2] * se, sr, sa, se)
    mean = p.mean(axis=0)
    stderr = p.std(axis=0, ddof=1) / math.sqrt(draws)
    bias_in_se = np.abs(mean - truth) / stderr
    _, _, analytic = convert_arrays(r, th, ph, sr, sa, se)
    empirical = np.cov(p.T)
    frob = float(np.linalg.norm(empirical - analytic)
                 / np.linalg.norm(analytic))
    return [
        CheckResult(name="conversion bias per axis",
                    metric=float(bias_in_se.max()),
                    threshold="<= 4 standard errors", passed=bool(
                        np.all(bias_in_se <= 4.0))),
        CheckResult(name="conversion covariance Frobenius error",
                    metric=frob, threshold="<= 0.03", passed=frob <= 0.03),
    ]


def filter_consistency_check(num_tracks: int = 100, num_steps: int = 100,
                             burn_in: int = 10, dt: float = 0.1,
                             seed: int = _FILTER_SEED) -> list[CheckResult]:
    """Filter consistency on simulated constant-velocity tracks.

    Truth follows the filter's own motion model (constant velocity plus
    white acceleration), measurements are noisy polar detections from a
    static observer at the origin.  Mean NEES over all tracks and steps
    after burn-in should sit near the state dimension; the filtered
    position should beat the raw converted measurement almost always.
    """
    q = DEFAULT_PROCESS_NOISE
    sr, sa, se = 0.5, 0.02, 0.02
    rng = np.random.default_rng(seed)
    F = transition_matrix(dt)
    Q = process_noise(dt, q)
    chol = np.linalg.cholesky(Q + 1e-12 * np.eye(6))
    nees_values = []
    wins = 0
    for _ in range(num_tracks):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        truth = np.concatenate([direction * rng.uniform(40.0, 80.0),
                                rng.normal(scale=5.0, size=3)])

        def measure(state):
            px, py, pz = state[:3]
            true_r = float(np.linalg.norm(state[:3]))
            az = math.atan2(py, px)
            el = math.atan2(pz, math.hypot(px, py))
            n = rng.normal(size=3)
            return convert_measurement(max(true_r + n[0] * sr, 1e-6),
                                       az + n[1] * sa, el + n[2] * se,
                                       sr, sa, se)

        m = measure(truth)
        track = track_from_measurement(m)
        filt_sq, raw_sq = [], []
        for step in range(1, num_steps):
            truth = F @ truth + chol @ rng.normal(size=6)
            track = kf_predict(track, dt, q)
            m = measure(truth)
            track = kf_update(track, m)
            if step >= burn_in:
                nees_values.append(nees(track, truth))
            filt_sq.append(float(np.sum((track.x[:3] - truth[:3]) ** 2)))
            raw_sq.append(float(np.sum((m.position - truth[:3]) ** 2)))
        if math.sqrt(np.mean(filt_sq)) < math.sqrt(np.mean(raw_sq)):
            wins += 1
    mean_nees = float(np.mean(nees_values))
    return [
        CheckResult(name="mean NEES after burn-in", metric=mean_nees,
                    threshold="in [5.0, 7.0]",
                    passed=5.0 <= mean_nees <= 7.0),
        CheckResult(name="filtered RMSE beats raw conversion",
                    metric=wins, threshold=f">= 95 of {num_tracks} tracks",
                    passed=wins >= 95),
    ]


def filter_suite() -> list[CheckResult]:
    """Conversion Monte Carlo checks plus track-level filter consistency."""
    return conversion_check() + filter_consistency_check()


def run_suite(name: str) -> list[CheckResult]:
    """Run a named suite: ``matcher``, ``filter``, or ``all``."""
    if name == "matcher":
        return matcher_suite()
    if name == "filter":
        return filter_suite()
    if name == "all":
        return matcher_suite() + filter_suite()
    raise ValueError(f"unknown suite {name!r}: expected matcher, filter, or all")


def format_report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
