"""Budget-sweep harness and metrics: nAUC, peak score, QNC, RCI, call rates,
training-set evaluation and the oracle-noise sensitivity curve.

A sweep routes every split query at each budget on a grid and records the
mean realized performance and mean realized cost; realized costs are always
the true costs, even when the budget filter ran on predicted costs, because
deployment pays true prices. Aggregation uses numpy means in fixed index
order (pairwise summation), so results are order-independent and
reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import RoutingTable
from .oracle import select_under_budget_batch
from .rng import STREAM_NOISE, make_rng
from .router import CostPredictorParams, Router, filter_costs, router_scores

QNC_SENTINEL = "/"


@dataclass(frozen=True)
class SweepPoint:
    budget: float
    mean_cost: float
    mean_perf: float
    calls: tuple[int, ...]  # selections per model at this budget
    clamped: int  # queries whose feasible set needed the cheapest-model fallback


@dataclass(frozen=True)
class SweepCurve:
    """Points of one budget sweep, sorted by mean realized cost."""

    points: tuple[SweepPoint, ...]

    def __post_init__(self):
        xs = [p.mean_cost for p in self.points]
        if any(xs[i] > xs[i + 1] for i in range(len(xs) - 1)):
            raise ValueError("sweep points must be sorted by mean cost")


def budget_grid(
    table: RoutingTable, indices: Sequence[int], n_points: int = 100
) -> np.ndarray:
    """Evenly spaced budgets from the cheapest per-query minimum cost to the
    single largest cost on the split, endpoints included."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("split is empty")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    costs = table.cost[indices]
    lo = float(costs.min(axis=1).min())
    hi = float(costs.max())
    return np.linspace(lo, hi, n_points)


def sweep(
    router: Router,
    table: RoutingTable,
    indices: Sequence[int],
    grid: Sequence[float],
    cost_source: str = "oracle",
    cost_predictor: CostPredictorParams | None = None,
) -> SweepCurve:
    """Route every split query at each budget; scores and filter costs are
    computed once per query since they do not depend on the budget."""
    indices = np.asarray(indices, dtype=np.int64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("budget grid is empty")
    scores = router_scores(router, table, indices)
    fcosts = filter_costs(router, table, indices, cost_source, cost_predictor)
    true_perf = table.perf[indices]
    true_cost = table.cost[indices]
    rows = np.arange(indices.size)
    K = table.n_models

    points = []
    for budget in grid:
        choices, clamped = select_under_budget_batch(scores, fcosts, budget)
        points.append(
            SweepPoint(
                budget=float(budget),
                mean_cost=float(np.mean(true_cost[rows, choices])),
                mean_perf=float(np.mean(true_perf[rows, choices])),
                calls=tuple(int(c) for c in np.bincount(choices, minlength=K)),
                clamped=int(clamped.sum()),
            )
        )
    points.sort(key=lambda p: (p.mean_cost, p.budget))
    return SweepCurve(points=tuple(points))


def _as_xy(curve) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve, SweepCurve):
        pts = [(p.mean_cost, p.mean_perf) for p in curve.points]
    else:
        pts = [(float(x), float(y)) for x, y in curve]
    pts.sort(key=lambda t: t[0])
    xs = np.array([x for x, _ in pts])
    ys = np.array([y for _, y in pts])
    return xs, ys


def _merge_equal_cost(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge points with identical mean cost, keeping the max performance;
    zero-width segments would otherwise make the integral ill-defined."""
    out_x, out_y = [], []
    for x, y in zip(xs, ys):
        if out_x and x == out_x[-1]:
            out_y[-1] = max(out_y[-1], y)
        else:
            out_x.append(x)
            out_y.append(y)
    return np.array(out_x), np.array(out_y)


def nauc(curve) -> float:
    """Trapezoidal area under the performance-cost curve, normalized by the
    cost range. Accepts a SweepCurve or an iterable of (cost, perf) pairs."""
    xs, ys = _merge_equal_cost(*_as_xy(curve))
    if xs.size < 2 or xs[-1] == xs[0]:
        raise ValueError(
            "degenerate cost range: every curve point has the same mean cost "
            "(constant routing policy across budgets)"
        )
    area = float(np.sum((ys[1:] + ys[:-1]) / 2.0 * np.diff(xs)))
    return area / float(xs[-1] - xs[0])


def peak_score(curve) -> tuple[float, float]:
    """(max performance on the curve, cost at the peak); ties take the
    lowest cost among maximizers."""
    xs, ys = _as_xy(curve)
    if xs.size == 0:
        raise ValueError("empty curve")
    best = ys.max()
    at = xs[ys == best].min()
    return float(best), float(at)


def strongest_standalone(
    table: RoutingTable, indices: Sequence[int]
) -> tuple[float, float, int]:
    """(a_max, x_max, j_max): best single-model mean performance on the split,
    that model's mean cost, and its index (ties to the lowest index)."""
    indices = np.asarray(indices, dtype=np.int64)
    means = table.perf[indices].mean(axis=0)
    j_max = int(np.argmax(means))
    return float(means[j_max]), float(table.cost[indices, j_max].mean()), j_max


def qnc_from_curve(curve, a_max: float, x_max: float) -> tuple[float | None, float | None]:
    """(absolute QNC, QNC / x_max): minimal mean cost on the curve reaching
    the best standalone quality, or (None, None) when never reached."""
    xs, ys = _merge_equal_cost(*_as_xy(curve))
    reached = xs[ys >= a_max]
    if reached.size == 0:
        return None, None
    q = float(reached.min())
    return q, q / x_max


def qnc(curve, table: RoutingTable, indices: Sequence[int]) -> tuple[float | None, float | None]:
    a_max, x_max, _ = strongest_standalone(table, indices)
    return qnc_from_curve(curve, a_max, x_max)


# ---------------------------------------------------------------------------
# routing collapse index


@dataclass(frozen=True)
class CollapseRecord:
    n: int  # query index in the table
    m_n: int  # selected model
    a_selected: float
    a_star: float
    x_n: int  # strictly cheaper models
    k_n: int  # strictly cheaper models matching or beating the selection
    s_n: float


@dataclass(frozen=True)
class CollapseReport:
    records: tuple[CollapseRecord, ...]
    rci: float
    call_rates: tuple[float, ...]


def rci(
    table: RoutingTable, selections: Sequence[int], indices: Sequence[int]
) -> CollapseReport:
    """Mean per-query collapse score.

    Per query: a_star is the best performance over the full pool; S_n the
    models strictly cheaper than the selection. The score is 1 when the
    selection is not performance-optimal; otherwise the fraction of strictly
    cheaper models matching or exceeding it (0 when none are cheaper).
    Performance comparisons use exact float equality: tables are ground
    truth, an epsilon would silently change the index.
    """
    indices = np.asarray(indices, dtype=np.int64)
    selections = np.asarray(selections, dtype=np.int64)
    if selections.shape != indices.shape:
        raise ValueError("need exactly one selection per split query")
    K = table.n_models
    if selections.size and (selections.min() < 0 or selections.max() >= K):
        raise ValueError("selection index out of range")

    records = []
    scores = np.empty(indices.size)
    for i, (n, m) in enumerate(zip(indices, selections)):
        a_row = table.perf[n]
        c_row = table.cost[n]
        a_star = float(a_row.max())
        a_sel = float(a_row[m])
        cheaper = c_row < c_row[m]
        x_n = int(cheaper.sum())
        k_n = int(np.sum(cheaper & (a_row >= a_sel)))
        if a_sel < a_star:
            s = 1.0
        elif x_n > 0:
            s = k_n / x_n
        else:
            s = 0.0
        scores[i] = s
        records.append(
            CollapseRecord(
                n=int(n), m_n=int(m), a_selected=a_sel, a_star=a_star,
                x_n=x_n, k_n=k_n, s_n=s,
            )
        )
    rates = np.bincount(selections, minlength=K) / max(selections.size, 1)
    return CollapseReport(
        records=tuple(records),
        rci=float(scores.mean()) if scores.size else 0.0,
        call_rates=tuple(float(r) for r in rates),
    )


def call_rate_curve(curve: SweepCurve) -> list[tuple[float, tuple[float, ...]]]:
    """Per-budget per-model call shares (each row sums to 1), budget order."""
    rows = []
    for p in sorted(curve.points, key=lambda p: p.budget):
        total = sum(p.calls)
        rows.append((p.budget, tuple(c / total for c in p.calls)))
    return rows


# ---------------------------------------------------------------------------
# metric bundle


@dataclass(frozen=True)
class MetricsSummary:
    nauc: float
    peak_score: float
    peak_cost: float
    qnc: float | None  # None = never reaches the strongest standalone quality
    qnc_relative: float | None
    rci: float
    a_max: float
    x_max: float
    j_max: int


def metrics_summary(
    curve: SweepCurve,
    table: RoutingTable,
    indices: Sequence[int],
    router: Router,
    cost_source: str = "oracle",
    cost_predictor: CostPredictorParams | None = None,
) -> MetricsSummary:
    """Curve metrics plus the collapse index of the unconstrained-budget
    selections of the same router."""
    indices = np.asarray(indices, dtype=np.int64)
    a_max, x_max, j_max = strongest_standalone(table, indices)
    q_abs, q_rel = qnc_from_curve(curve, a_max, x_max)
    ps, pc = peak_score(curve)
    scores = router_scores(router, table, indices)
    fcosts = filter_costs(router, table, indices, cost_source, cost_predictor)
    choices, _ = select_under_budget_batch(scores, fcosts, math.inf)
    report = rci(table, choices, indices)
    return MetricsSummary(
        nauc=nauc(curve),
        peak_score=ps,
        peak_cost=pc,
        qnc=q_abs,
        qnc_relative=q_rel,
        rci=report.rci,
        a_max=a_max,
        x_max=x_max,
        j_max=j_max,
    )


def training_set_eval(
    train_fn: Callable[[RoutingTable, np.ndarray, np.ndarray], Router],
    table: RoutingTable,
    n_points: int = 100,
    cost_source: str = "oracle",
    cost_predictor: CostPredictorParams | None = None,
) -> tuple[MetricsSummary, SweepCurve]:
    """Train on the full table and evaluate on the same queries.

    `train_fn(table, train_indices, valid_indices)` receives every query as
    training data and an empty validation set; the sweep then runs over the
    identical queries. Removes any train-test gap, so collapse observed here
    cannot be blamed on distribution shift.
    """
    all_idx = np.arange(table.n_queries, dtype=np.int64)
    router = train_fn(table, all_idx, np.array([], dtype=np.int64))
    grid = budget_grid(table, all_idx, n_points)
    curve = sweep(router, table, all_idx, grid, cost_source, cost_predictor)
    summary = metrics_summary(curve, table, all_idx, router, cost_source, cost_predictor)
    return summary, curve


@dataclass(frozen=True)
class NoiseRow:
    sigma: float
    accuracy: float  # mean realized true performance
    strongest_share: float  # call share of the most expensive model


def noise_sensitivity(
    table: RoutingTable,
    sigmas: Sequence[float],
    budget: float,
    seed: int,
    indices: Sequence[int] | None = None,
) -> list[NoiseRow]:
    """Noisy-oracle routing at one budget for each noise scale.

    For each sigma the rule is argmax of (true perf + Gaussian noise) within
    the true-cost feasible set, ties broken by true cost then index; sigma=0
    reproduces the exact oracle. Noise streams are derived per sigma index,
    so rows are independent and the whole call is deterministic in `seed`.
    """
    if indices is None:
        indices = np.arange(table.n_queries, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    costs = table.cost[indices]
    perf = table.perf[indices]
    strongest = int(np.argmax(costs.mean(axis=0)))
    rows = np.arange(indices.size)

    out = []
    for i, sigma in enumerate(sigmas):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        noisy = perf
        if sigma > 0:
            rng = make_rng(seed, STREAM_NOISE, i)
            noisy = perf + sigma * rng.standard_normal(perf.shape)
        choices, _ = select_under_budget_batch(noisy, costs, budget)
        out.append(
            NoiseRow(
                sigma=float(sigma),
                accuracy=float(np.mean(perf[rows, choices])),
                strongest_share=float(np.mean(choices == strongest)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# file emission (consumed by external plotting, byte-deterministic)


def write_curve_csv(curve: SweepCurve, path: Path | str) -> None:
    K = len(curve.points[0].calls)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["budget", "mean_cost", "mean_perf"]
            + [f"calls_model_{j}" for j in range(K)]
            + ["clamped"]
        )
        for p in curve.points:
            w.writerow(
                [repr(p.budget), repr(p.mean_cost), repr(p.mean_perf)]
                + list(p.calls)
                + [p.clamped]
            )


def metrics_to_dict(summary: MetricsSummary) -> dict:
    return {
        "nauc": summary.nauc,
        "peak_score": summary.peak_score,
        "peak_cost": summary.peak_cost,
        "qnc": QNC_SENTINEL if summary.qnc is None else summary.qnc,
        "qnc_relative": (
            QNC_SENTINEL if summary.qnc_relative is None else summary.qnc_relative
        ),
        "rci": summary.rci,
        "a_max": summary.a_max,
        "x_max": summary.x_max,
        "j_max": summary.j_max,
    }


def write_metrics_json(summary: MetricsSummary, path: Path | str) -> None:
    Path(path).write_text(json.dumps(metrics_to_dict(summary), sort_keys=True) + "\n")


def write_rci_csv(report: CollapseReport, path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "m_n", "a_sel", "a_star", "x_n", "k_n", "s_n"])
        for r in report.records:
            w.writerow(
                [r.n, r.m_n, repr(r.a_selected), repr(r.a_star), r.x_n, r.k_n, repr(r.s_n)]
            )


def write_noise_csv(rows: Sequence[NoiseRow], path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "accuracy", "strongest_share"])
        for r in rows:
            w.writerow([repr(r.sigma), repr(r.accuracy), repr(r.strongest_share)])


def write_callrates_csv(
    rates: Sequence[tuple[float, tuple[float, ...]]], path: Path | str
) -> None:
    K = len(rates[0][1])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["budget"] + [f"share_model_{j}" for j in range(K)])
        for budget, shares in rates:
            w.writerow([repr(budget)] + [repr(s) for s in shares])
