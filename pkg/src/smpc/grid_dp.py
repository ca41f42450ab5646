"""Backward induction on an interpolated state grid.

``V_0 = 0`` and ``V_n(x) = min_u g(x, u) + E[V_{n-1}(f(x, u, W))]`` with
``V_{n-1}`` evaluated by piecewise-linear interpolation (clamped at the
domain boundary). Stage minimization scans a control grid, then polishes
the best bracket with golden-section search. Ties go to the smallest
control, which makes the selected feedback a deterministic function of x.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .model import DiscreteDistribution, SystemModel

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
DEFAULT_GRID_SIZE = 2001
DEFAULT_SCAN_POINTS = 201
GOLDEN_WIDTH = 1e-10
CHUNK = 4096  # bounds the (states x scan points) work array


@dataclass
class ValueTable:
    """Value functions ``V_0..V_N`` and feedback ``mu_1..mu_N`` on a grid.

    ``feedback[n]`` is the minimizer with ``n`` steps remaining
    (``feedback[0]`` is unused and ``None``).
    """

    model: SystemModel
    grid: np.ndarray
    values: List[np.ndarray]
    feedback: List[Optional[np.ndarray]]
    scan_points: int = DEFAULT_SCAN_POINTS
    clamp_events: int = 0
    _clamp_lock: object = field(default=None, repr=False, compare=False)

    @property
    def horizon(self) -> int:
        return len(self.values) - 1

    def value(self, x, n: int):
        """Interpolated ``V_n`` at ``x``."""
        return np.interp(x, self.grid, self.values[n])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "x", "V", "feedback"])
        for k in range(self.horizon + 1):
            fb = self.feedback[k]
            for i, x in enumerate(self.grid):
                w.writerow([k, repr(float(x)), repr(float(self.values[k][i])),
                            "" if fb is None else repr(float(fb[i]))])
        return buf.getvalue()


def _stage_objective(model: SystemModel, grid, v_prev, x, u):
    total = np.asarray(model.stage_cost(x, u), dtype=float)
    for w, p in zip(model.noise.values, model.noise.probs):
        total = total + p * np.interp(model.dynamics(x, u, w), grid, v_prev)
    return total


def minimize_stage(model: SystemModel, grid: np.ndarray, v_prev: np.ndarray,
                   x: np.ndarray, scan_points: int = DEFAULT_SCAN_POINTS,
                   width: float = GOLDEN_WIDTH):
    """Vectorized ``argmin_u g(x,u) + E[V(f(x,u,W))]`` for every entry of ``x``.

    Elementwise arithmetic only, so each result is independent of how the
    queries are batched.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = model.control_bounds
    scan = np.linspace(lo, hi, scan_points)
    vals = _stage_objective(model, grid, v_prev, x[:, None], scan[None, :])
    best = np.argmin(vals, axis=1)  # first minimum: smallest control on ties
    a = scan[np.maximum(best - 1, 0)]
    b = scan[np.minimum(best + 1, scan_points - 1)]
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = _stage_objective(model, grid, v_prev, x, c)
    fd = _stage_objective(model, grid, v_prev, x, d)
    n_iter = int(math.ceil(math.log(width / ((hi - lo) * 2.0 / (scan_points - 1)))
                           / math.log(GOLDEN))) + 1
    for _ in range(max(n_iter, 0)):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + GOLDEN * (b - a))
        c_new = np.where(left, b - GOLDEN * (b - a), d)
        # reuse the surviving interior evaluation
        fc_new = np.where(left, _stage_objective(model, grid, v_prev, x, c_new), fd)
        fd = np.where(left, fc, _stage_objective(model, grid, v_prev, x, d_new))
        fc = fc_new
        c, d = c_new, d_new
    u = 0.5 * (a + b)
    u_scan = scan[best]
    v_gold = _stage_objective(model, grid, v_prev, x, u)
    v_scan = vals[np.arange(x.size), best]
    # the polish must beat the scan point strictly; ties keep the grid control
    use_scan = v_scan <= v_gold
    u = np.where(use_scan, u_scan, u)
    v = np.where(use_scan, v_scan, v_gold)
    return u, v


def _count_clamps(model, grid, x, u):
    lo, hi = grid[0], grid[-1]
    n = 0
    for w in model.noise.values:
        nx = model.dynamics(x, u, w)
        n += int(np.count_nonzero((nx < lo) | (nx > hi)))
    return n


def backward_induction(model: SystemModel, N: int, grid_size: int = DEFAULT_GRID_SIZE,
                       scan_points: int = DEFAULT_SCAN_POINTS,
                       workers: int = 1) -> ValueTable:
    """Compute ``V_0..V_N`` and the feedback tables on a uniform grid."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if N < 0:
        raise ValueError("horizon must be >= 0")
    grid = np.linspace(*model.state_domain, grid_size)
    values = [np.zeros(grid_size)]
    feedback: List[Optional[np.ndarray]] = [None]
    clamps = 0
    chunks = np.array_split(np.arange(grid_size), max(1, workers))
    for n in range(1, N + 1):
        v_prev = values[-1]

        def work(idx, v_prev=v_prev):
            return minimize_stage(model, grid, v_prev, grid[idx], scan_points)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(np.arange(grid_size))]
        u = np.concatenate([p[0] for p in parts])
        v = np.concatenate([p[1] for p in parts])
        clamps += _count_clamps(model, grid, grid, u)
        u.setflags(write=False)
        v.setflags(write=False)
        values.append(v)
        feedback.append(u)
    return ValueTable(model=model, grid=grid, values=values, feedback=feedback,
                      scan_points=scan_points, clamp_events=clamps)


def feedback_many(table: ValueTable, x, steps_remaining: int) -> np.ndarray:
    """Feedback re-optimized at each query state (not interpolated).

    States outside the grid domain are clamped to it and counted in
    ``table.clamp_events``.
    """
    if not 1 <= steps_remaining <= table.horizon:
        raise ValueError(f"steps_remaining={steps_remaining} outside 1..{table.horizon}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = table.grid[0], table.grid[-1]
    outside = (x < lo) | (x > hi)
    if outside.any():
        table.clamp_events += int(outside.sum())
        x = np.clip(x, lo, hi)
    v_prev = table.values[steps_remaining - 1]
    out = np.empty_like(x)
    for start in range(0, x.size, CHUNK):
        sl = slice(start, start + CHUNK)
        out[sl], _ = minimize_stage(table.model, table.grid, v_prev, x[sl],
                                    table.scan_points)
    return out


def feedback(table: ValueTable, x: float, steps_remaining: int) -> float:
    return float(feedback_many(table, [x], steps_remaining)[0])


def propagate_optimal(table: ValueTable, x0, N: int, steps: int, tol: float = 1e-12):
    """Exact state laws and expected stage costs under the time-varying feedback.

    Step ``j`` applies the minimizer with ``N - j`` steps remaining.
    Returns ``(laws, stage_costs)`` for ``j = 0..steps`` and ``0..steps-1``.
    """
    model = table.model
    law = x0 if isinstance(x0, DiscreteDistribution) else DiscreteDistribution.point_mass(x0)
    laws, costs = [law], []
    for j in range(steps):
        u = feedback_many(table, law.values, N - j)
        costs.append(float(np.dot(law.probs, model.stage_cost(law.values, u))))
        s = model.noise.size
        nx = model.dynamics(np.repeat(law.values, s), np.repeat(u, s),
                            np.tile(model.noise.values, law.size))
        law = DiscreteDistribution(nx, np.outer(law.probs, model.noise.probs).ravel(), tol=tol)
        laws.append(law)
    return laws, costs


def dpp_residual(model: SystemModel, table: ValueTable, x: float, M: int,
                 N: Optional[int] = None) -> float:
    """``|V_N(x) - sum_{j<M} l(j) - E[V_{N-M}(X(M))]|`` along the feedback evolution."""
    N = table.horizon if N is None else N
    if not 1 <= M <= N:
        raise ValueError(f"split M={M} outside 1..{N}")
    if table.model is not model:
        table = ValueTable(model=model, grid=table.grid, values=table.values,
                           feedback=table.feedback, scan_points=table.scan_points)
    laws, costs = propagate_optimal(table, x, N, M)
    tail = laws[M].expect(lambda v: table.value(v, N - M))
    return abs(float(table.value(x, N)) - math.fsum(costs) - tail)
