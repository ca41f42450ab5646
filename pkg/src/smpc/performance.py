"""Empirical checks of closed-loop performance against the stationary cost."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import grid_dp, mpc, scenario
from .model import StationaryEstimate, SystemModel

DEFAULT_K_MIN = 20


def linear_growth_check(series: mpc.PerformanceSeries,
                        K_min: int = DEFAULT_K_MIN) -> Tuple[float, float]:
    """Least-squares slope and R^2 of cumulative cost over ``K in [K_min, K_max]``."""
    K_max = series.K_max
    if K_max < 2 * K_min:
        raise ValueError(f"K_max={K_max} must be >= 2*K_min={2 * K_min}")
    Ks = np.arange(K_min, K_max + 1, dtype=float)
    y = series.cumulative[K_min - 1:]
    slope, intercept = np.polyfit(Ks, y, 1)
    resid = y - (slope * Ks + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(r2)


@dataclass
class HorizonPerformance:
    N: int
    averaged_cost_limit: float
    ci_halfwidth: float
    delta_estimate: float
    slope: float
    slope_r2: float
    overtaking_margin: Optional[list] = None

    @property
    def undershoots(self) -> bool:
        """Averaged cost significantly below the stationary cost."""
        return self.delta_estimate < -self.ci_halfwidth


@dataclass
class PerformanceReport:
    stationary_cost: float
    K_max: int
    horizons: Dict[int, HorizonPerformance] = field(default_factory=dict)

    def delta_nonincreasing(self) -> bool:
        """``delta(N)`` does not grow with ``N`` beyond the confidence noise."""
        Ns = sorted(self.horizons)
        for a, b in zip(Ns, Ns[1:]):
            ha, hb = self.horizons[a], self.horizons[b]
            if hb.delta_estimate > ha.delta_estimate + ha.ci_halfwidth + hb.ci_halfwidth:
                return False
        return True

    def delta_strictly_decreasing(self) -> bool:
        """Each larger ``N`` improves ``delta`` by more than the combined CI."""
        Ns = sorted(self.horizons)
        for a, b in zip(Ns, Ns[1:]):
            ha, hb = self.horizons[a], self.horizons[b]
            if not ha.delta_estimate - hb.delta_estimate > ha.ci_halfwidth + hb.ci_halfwidth:
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "stationary_cost": self.stationary_cost,
            "K_max": self.K_max,
            "delta_nonincreasing": self.delta_nonincreasing(),
            "horizons": {str(N): asdict(h) for N, h in sorted(self.horizons.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def averaged_performance(series_by_N: Mapping[int, mpc.PerformanceSeries],
                         stationary: StationaryEstimate,
                         K_min: int = DEFAULT_K_MIN) -> PerformanceReport:
    """``delta(N)`` estimates: averaged cost at ``K_max`` minus the stationary cost."""
    K_maxes = {s.K_max for s in series_by_N.values()}
    if len(K_maxes) != 1:
        raise ValueError("all series must share K_max")
    K_max = K_maxes.pop()
    report = PerformanceReport(stationary_cost=stationary.stationary_cost, K_max=K_max)
    for N, series in sorted(series_by_N.items()):
        ci = float(series.ci_halfwidth[-1]) / K_max
        if not math.isfinite(ci):
            ci = 0.0
        avg = float(series.averaged[-1])
        if K_max >= 2 * K_min:
            slope, r2 = linear_growth_check(series, K_min)
        else:
            slope, r2 = float("nan"), float("nan")
        report.horizons[N] = HorizonPerformance(
            N=N, averaged_cost_limit=avg, ci_halfwidth=ci,
            delta_estimate=avg - stationary.stationary_cost, slope=slope, slope_r2=r2)
    return report


def overtaking_comparison(model: SystemModel, x0: float, N_mpc: int, K: int,
                          reference_horizon: int, delta_estimate: float,
                          table: Optional[grid_dp.ValueTable] = None,
                          reference: Optional[scenario.OcpSolution] = None,
                          mpc_stage_costs: Optional[np.ndarray] = None,
                          **solve_opts) -> np.ndarray:
    """Margin ``sum_{k<K'} [l_ref(k) - l_mpc(k)] + K' * delta`` for ``K' = 1..K``.

    ``l_ref`` comes from the exact tree solution on ``reference_horizon``
    (a finite proxy for the infinite-horizon optimum) and ``l_mpc`` from
    exact closed-loop law propagation, so neither side carries sampling
    noise.
    """
    if reference_horizon < K + N_mpc:
        raise ValueError(f"reference_horizon={reference_horizon} must be >= "
                         f"K + N_mpc = {K + N_mpc}")
    if reference is None:
        try:
            reference = scenario.solve(model, x0, reference_horizon, **solve_opts)
        except scenario.NodeCapExceeded as exc:
            raise scenario.NodeCapExceeded(f"{exc}; reduce K") from None
    l_ref = scenario.stage_costs(reference.tree)[:K]
    if mpc_stage_costs is None:
        if table is None:
            table = grid_dp.backward_induction(model, N_mpc)
        ens = mpc.run_algorithm1(model, mpc.GridPolicy(table, N_mpc), x0, K)
        mpc_stage_costs = ens.stage_costs
    l_mpc = np.asarray(mpc_stage_costs, dtype=float)[:K]
    Ks = np.arange(1, K + 1)
    return np.cumsum(l_ref - l_mpc) + Ks * delta_estimate


def shifted_at(series: mpc.PerformanceSeries, stationary_cost: float) -> Tuple[float, float]:
    """Shifted cumulative cost and CI half-width at ``K_max``."""
    s = series.with_stationary(stationary_cost)
    ci = float(s.ci_halfwidth[-1])
    return float(s.shifted_cumulative[-1]), (0.0 if not math.isfinite(ci) else ci)
