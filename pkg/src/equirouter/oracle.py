"""Ground-truth routing rule, margins, label-noise intervention, Monte Carlo.

The oracle picks, per query and budget, the feasible model with the highest
true performance, breaking ties by lowest cost and then lowest index. The
same lexicographic rule is reused by every learned router, applied to its
own scores/predicted costs, so it lives here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import RoutingTable
from .rng import STREAM_MC, STREAM_NOISE, make_rng


@dataclass(frozen=True)
class FeasibleSet:
    """Models whose cost stays within the budget for one query.

    When no model is affordable the cheapest one is force-included and
    `clamped` is set: deployment must answer every query.
    """

    query_index: int
    budget: float
    members: tuple[int, ...]
    clamped: bool


def feasible_set(table: RoutingTable, n: int, budget: float) -> FeasibleSet:
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    costs = table.cost[n]
    members = np.flatnonzero(costs <= budget)
    clamped = members.size == 0
    if clamped:
        members = np.array([np.argmin(costs)])
    return FeasibleSet(
        query_index=int(n),
        budget=float(budget),
        members=tuple(int(j) for j in members),
        clamped=bool(clamped),
    )


def argmax_lexicographic(scores: np.ndarray, costs: np.ndarray) -> int:
    """Index maximizing score; ties broken by lower cost, then lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    best = scores.max()
    cand = np.flatnonzero(scores == best)
    cheapest = costs[cand].min()
    return int(cand[costs[cand] == cheapest][0])


def select_under_budget(
    scores: np.ndarray, filter_costs: np.ndarray, budget: float
) -> tuple[int, bool]:
    """Apply the routing rule for one query.

    Restrict to models with filter_costs <= budget (falling back to the
    single cheapest model when none qualifies), then pick by
    (max score, min filter cost, min index).
    """
    feasible = np.flatnonzero(filter_costs <= budget)
    if feasible.size == 0:
        return int(np.argmin(filter_costs)), True
    j = argmax_lexicographic(scores[feasible], filter_costs[feasible])
    return int(feasible[j]), False


def select_under_budget_batch(
    scores: np.ndarray, filter_costs: np.ndarray, budget: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized routing rule over (N, K) score and cost matrices.

    Returns (choices, clamped) of shape (N,). Identical, by construction,
    to applying select_under_budget row by row.
    """
    feas = filter_costs <= budget
    clamped = ~feas.any(axis=1)
    # clamped rows fall back to the cheapest model (lowest index on ties)
    fallback = np.argmin(filter_costs, axis=1)

    masked_scores = np.where(feas, scores, -np.inf)
    best = masked_scores.max(axis=1, keepdims=True)
    is_best = feas & (masked_scores == best)
    masked_costs = np.where(is_best, filter_costs, np.inf)
    min_cost = masked_costs.min(axis=1, keepdims=True)
    is_pick = is_best & (masked_costs == min_cost)
    choices = np.argmax(is_pick, axis=1)  # first True = lowest index
    choices = np.where(clamped, fallback, choices)
    return choices.astype(np.int64), clamped


def oracle_select(table: RoutingTable, n: int, budget: float) -> int:
    """Budget-feasible model with highest true performance, cheapest on ties."""
    choice, _ = select_under_budget(table.perf[n], table.cost[n], budget)
    return choice


def oracle_select_batch(
    table: RoutingTable, indices: np.ndarray, budget: float
) -> np.ndarray:
    choices, _ = select_under_budget_batch(
        table.perf[indices], table.cost[indices], budget
    )
    return choices


def margin(table: RoutingTable, n: int, budget: float) -> float | None:
    """Gap between best and second-best feasible performance; None if |F| < 2."""
    fs = feasible_set(table, n, budget)
    if len(fs.members) < 2:
        return None
    a = np.sort(table.perf[n, list(fs.members)])
    return float(a[-1] - a[-2])


@dataclass(frozen=True)
class MarginStats:
    """Distribution of top-two performance gaps at one budget."""

    margins: np.ndarray  # defined margins only, queries with |F| >= 2
    tie_rate: float
    cdf_at: dict[float, float]


def margin_stats(
    table: RoutingTable, budget: float, thresholds: list[float]
) -> MarginStats:
    if sorted(thresholds) != list(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    values = [margin(table, n, budget) for n in range(table.n_queries)]
    margins = np.array([v for v in values if v is not None], dtype=np.float64)
    if margins.size == 0:
        raise ValueError("no query has >= 2 feasible models at this budget")
    tie_rate = float(np.mean(margins == 0.0))
    cdf = {float(t): float(np.mean(margins <= t)) for t in thresholds}
    if 0.0 not in cdf:
        cdf[0.0] = tie_rate
    return MarginStats(margins=margins, tie_rate=tie_rate, cdf_at=cdf)


@dataclass(frozen=True)
class NoiseConfig:
    """Additive Gaussian label noise: perf + N(0, sigma^2), seeded."""

    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def inject_noise(table: RoutingTable, cfg: NoiseConfig) -> RoutingTable:
    """Copy of the table with i.i.d. Gaussian noise added to every perf entry.

    Costs and embeddings are untouched; sigma = 0 returns a bit-identical
    copy. Deterministic for a fixed config.
    """
    if cfg.sigma == 0.0:
        return replace(table)
    rng = make_rng(cfg.seed, STREAM_NOISE)
    noisy = table.perf + cfg.sigma * rng.standard_normal(table.perf.shape)
    return replace(table, perf=noisy)


def mc_selection_frequencies(
    a: np.ndarray, sigma: float, trials: int, seed: int
) -> np.ndarray:
    """Empirical win frequencies of argmax(a + noise) over repeated trials.

    Noise is i.i.d. N(0, sigma^2) per model per trial; exact argmax ties go
    to the lowest index. Frequencies sum to 1.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("mean vector must be nonempty")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = make_rng(seed, STREAM_MC)
    wins = np.zeros(a.size, dtype=np.int64)
    # chunked so trials=1e5 x K stays cache-friendly
    chunk = 65536
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        noisy = a[None, :] + sigma * rng.standard_normal((m, a.size))
        wins += np.bincount(np.argmax(noisy, axis=1), minlength=a.size)
        done += m
    return wins / trials


def mc_standard_errors(freq: np.ndarray, trials: int) -> np.ndarray:
    """Binomial standard error of each estimated frequency."""
    return np.sqrt(freq * (1.0 - freq) / trials)


def write_margin_cdf_csv(stats: MarginStats, path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "cdf"])
        for t in sorted(stats.cdf_at):
            w.writerow([repr(t), repr(stats.cdf_at[t])])


def write_mc_frequencies_csv(
    freq: np.ndarray, trials: int, path: Path | str
) -> None:
    err = mc_standard_errors(freq, trials)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "frequency", "stderr"])
        for j, (f, e) in enumerate(zip(freq, err)):
            w.writerow([j, repr(float(f)), repr(float(e))])
