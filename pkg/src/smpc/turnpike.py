"""Distributional turnpike diagnostics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import grid_dp, scenario
from .model import DiscreteDistribution, StationaryEstimate, SystemModel

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.05, 0.1, 0.2)


def wasserstein1(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Exact W1 on the real line: integral of ``|F_p - F_q|``."""
    xs = np.union1d(p.values, q.values)
    if xs.size < 2:
        return 0.0
    diff = np.abs(p.cdf(xs[:-1]) - q.cdf(xs[:-1]))
    return float(np.dot(diff, np.diff(xs)))


def _relative_gap(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def estimate_stationary(model: SystemModel, x0: float = 3.0, N_long: int = 15,
                        mid_fraction: float = 0.5, table: Optional[grid_dp.ValueTable] = None,
                        solution: Optional[scenario.OcpSolution] = None,
                        grid_size: int = grid_dp.DEFAULT_GRID_SIZE,
                        **solve_opts) -> StationaryEstimate:
    """Stationary law and cost from the middle of a long optimal trajectory.

    The law at ``k* = round(mid_fraction * N_long)`` of the exact tree
    solution is the estimate. A second, independent estimate is the grid-DP
    marginal ``V_{N+1}(x0) - V_N(x0)``; both are kept in ``provenance`` and a
    warning is logged when they differ by more than 2%.
    """
    if N_long < 10:
        raise ValueError("N_long must be >= 10")
    if solution is None:
        solution = scenario.solve(model, x0, N_long, **solve_opts)
    k_star = int(math.floor(mid_fraction * N_long + 0.5))
    dists = scenario.optimal_state_distributions(solution)
    costs = scenario.stage_costs(solution.tree)
    mid_cost = float(costs[k_star])
    if table is None or table.horizon < N_long + 1:
        table = grid_dp.backward_induction(model, N_long + 1, grid_size=grid_size)
    marginal = float(table.value(x0, N_long + 1) - table.value(x0, N_long))
    gap = _relative_gap(mid_cost, marginal)
    if gap > 0.02:
        log.warning("stationary cost estimates disagree by %.2f%% (%g vs %g)",
                    100 * gap, mid_cost, marginal)
    provenance = dict(x0=x0, N_long=N_long, k_star=k_star, mid_fraction=mid_fraction,
                      mid_horizon_estimate=mid_cost, marginal_estimate=marginal,
                      relative_disagreement=gap)
    return StationaryEstimate(state_distribution=dists[k_star], stationary_cost=mid_cost,
                              provenance=provenance)


@dataclass
class TurnpikeProfile:
    horizon: int
    distances: np.ndarray
    thresholds: tuple
    exceptional_counts: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "k", "distance"])
        for k, d in enumerate(self.distances):
            w.writerow([self.horizon, k, repr(float(d))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"N": self.horizon, "thresholds": list(self.thresholds),
                "counts": list(self.exceptional_counts)}


def exceptional_counts(distances: Sequence[float], thresholds: Sequence[float]) -> tuple:
    d = np.asarray(distances)
    return tuple(int(np.count_nonzero(d > eps)) for eps in thresholds)


def turnpike_profile(model: SystemModel, x0: float, N: int, stationary: StationaryEstimate,
                     thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                     solution: Optional[scenario.OcpSolution] = None,
                     **solve_opts) -> TurnpikeProfile:
    """W1 distance of each optimal state law to the stationary estimate."""
    if solution is None:
        solution = scenario.solve(model, x0, N, **solve_opts)
    target = stationary.state_distribution
    dists = scenario.optimal_state_distributions(solution)
    distances = np.array([wasserstein1(d, target) for d in dists])
    thresholds = tuple(float(t) for t in thresholds)
    return TurnpikeProfile(horizon=N, distances=distances, thresholds=thresholds,
                           exceptional_counts=exceptional_counts(distances, thresholds))


def stationary_summary(est: StationaryEstimate) -> str:
    return json.dumps({"stationary_cost": est.stationary_cost, **est.provenance},
                      sort_keys=True)
