"""Closed-loop stochastic MPC.

Two ways to run the same feedback ``mu_N``:

* :func:`run_algorithm2` / :func:`monte_carlo` measure the realized state
  along sampled noise paths and apply ``mu_N`` to it.
* :func:`run_algorithm1` pushes the whole state law through the closed
  loop, atom by atom, which gives exact expected stage costs.

Both call the same pointwise feedback, so their expected cumulative costs
coincide; :mod:`tests.test_mpc` checks this statistically.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import grid_dp, scenario
from .model import DiscreteDistribution, SystemModel, merge_atoms

log = logging.getLogger(__name__)

Z95 = 1.959963984540054
DEFAULT_SUPPORT_CAP = 100_000
ENSEMBLE_MERGE_TOL = 1e-9


# -- feedback sources ---------------------------------------------------------

class GridPolicy:
    """``mu_N`` from a grid-DP value table, re-optimized at each query."""

    vectorized = True

    def __init__(self, table: grid_dp.ValueTable, N: int):
        if N > table.horizon:
            raise ValueError(f"value table horizon {table.horizon} < N={N}")
        self.table = table
        self.N = N
        self.warnings: List[str] = []

    def __call__(self, x) -> np.ndarray:
        return grid_dp.feedback_many(self.table, x, self.N)


class TreePolicy:
    """``mu_N`` from an exact scenario-tree solve at every measured state.

    With ``warm_start`` the previous solution's controls seed the next
    solve.
    """

    vectorized = False

    def __init__(self, model: SystemModel, N: int, warm_start: bool = True,
                 grad_tol: float = 1e-8, max_iters: int = 500):
        self.model = model
        self.N = N
        self.warm_start = warm_start
        self.grad_tol = grad_tol
        self.max_iters = max_iters
        self.warnings: List[str] = []
        self._last: Optional[scenario.ControlTree] = None

    def reset(self):
        self._last = None

    def solve_at(self, x: float) -> float:
        start = self._last if self.warm_start else None
        try:
            sol = scenario.solve(self.model, float(x), self.N, self.max_iters,
                                 self.grad_tol, warm_start=start)
        except scenario.NotConverged as exc:
            sol = exc.solution
            self.warnings.append(f"x={x!r}: {exc}")
        self._last = sol.controls
        return float(sol.controls.levels[0][0])

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.array([self.solve_at(v) for v in x])


class ConstantPolicy:
    """Fixed control, e.g. the zero-control comparison policy."""

    vectorized = True

    def __init__(self, u: float = 0.0):
        self.u = float(u)
        self.warnings: List[str] = []

    def __call__(self, x):
        return np.full(np.shape(np.atleast_1d(x)), self.u)


class FunctionPolicy:
    """Wrap a vectorized state-feedback function ``x -> u``."""

    vectorized = True

    def __init__(self, fn):
        self.fn = fn
        self.warnings: List[str] = []

    def __call__(self, x):
        return np.asarray(self.fn(np.atleast_1d(np.asarray(x, dtype=float))), dtype=float)


# -- sampled closed loop ------------------------------------------------------

def path_rng(seed: int, path_id: int) -> np.random.Generator:
    """Counter-based stream for one path, independent of all other paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_id])))


def noise_path(model: SystemModel, seed: int, path_id: int, K: int) -> np.ndarray:
    return model.noise.sample(path_rng(seed, path_id).random(K))


@dataclass
class ClosedLoopTrace:
    states: np.ndarray
    controls: np.ndarray
    noises: np.ndarray
    stage_costs: np.ndarray
    path_id: int = 0
    seed: int = 0
    warnings: List[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return int(self.controls.size)

    def csv_rows(self):
        for k in range(self.K):
            yield (self.path_id, k, float(self.states[k]), float(self.controls[k]),
                   float(self.noises[k]), float(self.stage_costs[k]))
        yield (self.path_id, self.K, float(self.states[self.K]), "", "", "")


def _simulate_paths(model: SystemModel, policy, x0: float, noises: np.ndarray):
    """Run all rows of ``noises`` through the closed loop simultaneously."""
    P, K = noises.shape
    xs = np.empty((P, K + 1))
    us = np.empty((P, K))
    xs[:, 0] = x0
    for k in range(K):
        if getattr(policy, "vectorized", True):
            us[:, k] = policy(xs[:, k])
        else:
            us[:, k] = [policy(v)[0] for v in xs[:, k]]
        xs[:, k + 1] = model.dynamics(xs[:, k], us[:, k], noises[:, k])
    costs = model.stage_cost(xs[:, :K], us)
    return xs, us, np.asarray(costs, dtype=float)


def run_algorithm2(model: SystemModel, policy, x0: float, K: int, seed: int = 0,
                   path_id: int = 0) -> ClosedLoopTrace:
    """Measure the realized state, apply ``mu_N`` to it, sample the noise, repeat."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if hasattr(policy, "reset"):
        policy.reset()
    w = noise_path(model, seed, path_id, K)
    n_warn = len(policy.warnings)
    xs, us, costs = _simulate_paths(model, policy, float(x0), w[None, :])
    return ClosedLoopTrace(states=xs[0], controls=us[0], noises=w, stage_costs=costs[0],
                           path_id=path_id, seed=seed,
                           warnings=list(policy.warnings[n_warn:]))


@dataclass
class PerformanceSeries:
    """Closed-loop cost series over ``K = 1..K_max``."""

    cumulative: np.ndarray
    averaged: np.ndarray
    shifted_cumulative: np.ndarray
    ci_halfwidth: np.ndarray
    stationary_cost: float = float("nan")
    paths: int = 0

    @classmethod
    def from_cumulative(cls, cumulative, stationary_cost: float = float("nan"),
                        ci_halfwidth=None, paths: int = 0) -> "PerformanceSeries":
        cumulative = np.asarray(cumulative, dtype=float)
        Ks = np.arange(1, cumulative.size + 1)
        if ci_halfwidth is None:
            ci_halfwidth = np.full(cumulative.size, np.nan)
        return cls(cumulative=cumulative, averaged=cumulative / Ks,
                   shifted_cumulative=cumulative - Ks * stationary_cost,
                   ci_halfwidth=np.asarray(ci_halfwidth, dtype=float),
                   stationary_cost=stationary_cost, paths=paths)

    def with_stationary(self, stationary_cost: float) -> "PerformanceSeries":
        return PerformanceSeries.from_cumulative(self.cumulative, stationary_cost,
                                                 self.ci_halfwidth, self.paths)

    @property
    def K_max(self) -> int:
        return int(self.cumulative.size)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "cumulative", "averaged", "shifted_cumulative", "ci_halfwidth"])
        for i in range(self.K_max):
            w.writerow([i + 1, repr(float(self.cumulative[i])), repr(float(self.averaged[i])),
                        repr(float(self.shifted_cumulative[i])),
                        repr(float(self.ci_halfwidth[i]))])
        return buf.getvalue()


@dataclass
class MonteCarloResult:
    series: PerformanceSeries
    per_path_cumulative: np.ndarray  # (paths, K)
    traces: Optional[List[ClosedLoopTrace]] = None
    warnings: List[str] = field(default_factory=list)


def monte_carlo(model: SystemModel, policy, x0: float, K: int, paths: int,
                seed: int = 0, stationary_cost: float = float("nan"),
                workers: int = 1, keep_traces: bool = False) -> MonteCarloResult:
    """Mean closed-loop cost over ``paths`` independent noise realizations.

    Path ``p`` always draws its noise from ``path_rng(seed, p)``, so results do
    not depend on ``workers`` or on how many other paths run.
    """
    if paths < 1 or K < 1:
        raise ValueError("paths and K must be >= 1")
    noises = np.stack([noise_path(model, seed, p, K) for p in range(paths)])
    if hasattr(policy, "reset"):
        policy.reset()
    with np.errstate(over="ignore", invalid="ignore"):
        xs, us, costs = _run_paths(model, policy, x0, noises, workers)
        cum = np.cumsum(costs, axis=1)
        mean = cum.mean(axis=0)
        if paths > 1:
            ci = Z95 * cum.std(axis=0, ddof=1) / math.sqrt(paths)
        else:
            ci = np.full(K, np.nan)
    warnings = list(getattr(policy, "warnings", []))
    diverged = int(np.sum(~np.isfinite(cum[:, -1])))
    if diverged:
        warnings.append(f"closed loop diverged on {diverged} of {paths} paths")
    series = PerformanceSeries.from_cumulative(mean, stationary_cost, ci, paths)
    traces = None
    if keep_traces:
        traces = [ClosedLoopTrace(states=xs[p], controls=us[p], noises=noises[p],
                                  stage_costs=costs[p], path_id=p, seed=seed)
                  for p in range(paths)]
    return MonteCarloResult(series=series, per_path_cumulative=cum, traces=traces,
                            warnings=warnings)


def _run_paths(model, policy, x0, noises, workers):
    paths = noises.shape[0]
    if workers > 1 and getattr(policy, "vectorized", True):
        chunks = np.array_split(np.arange(paths), workers)
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda idx: _simulate_paths(model, policy, x0, noises[idx]),
                                  chunks))
        xs = np.concatenate([p[0] for p in parts])
        us = np.concatenate([p[1] for p in parts])
        costs = np.concatenate([p[2] for p in parts])
    else:
        xs, us, costs = _simulate_paths(model, policy, x0, noises)
    return xs, us, costs


def traces_csv(traces: Sequence[ClosedLoopTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path_id", "k", "x", "u", "w", "stage_cost"])
    for tr in traces:
        for row in tr.csv_rows():
            w.writerow([row[0], row[1]] + [repr(v) if isinstance(v, float) else v
                                           for v in row[2:]])
    return buf.getvalue()


# -- exact law propagation ----------------------------------------------------

def cap_support(values: np.ndarray, probs: np.ndarray, cap: int):
    """Merge nearest neighbours until at most ``cap`` atoms remain.

    The ``n - cap`` smallest gaps are closed; each run of closed gaps becomes
    one atom at the run's probability-weighted mean. Returns
    ``(values, probs, moved)`` with ``moved`` the transport cost
    ``sum p_i |x_i - x_merged|``. ``values`` must be sorted.
    """
    n = values.size
    if n <= cap:
        return values, probs, 0.0
    gaps = np.diff(values)
    close = np.argsort(gaps, kind="stable")[: n - cap]
    new_group = np.ones(n, dtype=bool)
    new_group[close + 1] = False
    groups = np.cumsum(new_group) - 1
    mp = np.bincount(groups, weights=probs)
    mx = np.bincount(groups, weights=probs * values) / mp
    singles = np.bincount(groups) == 1
    mx[singles] = values[new_group][singles]
    moved = float(np.sum(probs * np.abs(values - mx[groups])))
    return mx, mp, moved


@dataclass
class EnsembleTrace:
    """Exact closed-loop state laws for ``k = 0..K``.

    ``merge_loss`` is the accumulated transport cost (probability mass times
    displacement) of all atom merges; it bounds the W1 error of every law.
    """

    laws: List[DiscreteDistribution]
    stage_costs: np.ndarray
    support_sizes: List[int]
    merge_loss: float = 0.0

    @property
    def K(self) -> int:
        return int(self.stage_costs.size)

    @property
    def degraded(self) -> bool:
        return self.merge_loss > 1e-6

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.stage_costs)

    def series(self, stationary_cost: float = float("nan")) -> PerformanceSeries:
        return PerformanceSeries.from_cumulative(self.cumulative(), stationary_cost)


def run_algorithm1(model: SystemModel, policy, X0, K: int,
                   support_cap: int = DEFAULT_SUPPORT_CAP,
                   merge_tol: float = ENSEMBLE_MERGE_TOL) -> EnsembleTrace:
    """Propagate the closed-loop state law exactly, atom by atom."""
    law = X0 if isinstance(X0, DiscreteDistribution) else DiscreteDistribution.point_mass(X0)
    s = model.noise.size
    laws, costs, sizes = [law], [], [law.size]
    loss = 0.0
    for _ in range(K):
        x, p = law.values, law.probs
        u = policy(x)
        costs.append(float(np.dot(p, model.stage_cost(x, u))))
        nx = model.dynamics(np.repeat(x, s), np.repeat(u, s), np.tile(model.noise.values, x.size))
        npr = np.outer(p, model.noise.probs).ravel()
        v, q, moved = merge_atoms(nx, npr, merge_tol)
        v, q, moved_cap = cap_support(v, q, support_cap)
        loss += moved + moved_cap
        law = DiscreteDistribution(v, q, tol=0.0)
        laws.append(law)
        sizes.append(law.size)
    if loss > 1e-6:
        log.warning("ensemble merge loss %.3e exceeds 1e-6", loss)
    return EnsembleTrace(laws=laws, stage_costs=np.array(costs), support_sizes=sizes,
                         merge_loss=loss)
