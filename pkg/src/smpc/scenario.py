"""Exact finite-horizon stochastic OCP on disturbance-history trees.

Depth ``k`` of a tree holds one node per (initial atom, noise history
``w_0..w_{k-1}``) pair. With ``s`` noise atoms, node ``i`` at depth ``k``
has children ``i*s .. i*s + s-1`` at depth ``k+1``. A control is attached
to every non-leaf node, so controls can only depend on the history seen so
far; causality holds by construction.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .model import DiscreteDistribution, SystemModel, merge_atoms

log = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 2 ** 20

Initial = Union[float, DiscreteDistribution]


class NodeCapExceeded(RuntimeError):
    """The requested tree would exceed the node cap; reduce the horizon."""


class ShapeMismatch(ValueError):
    pass


class NotConverged(RuntimeError):
    """Solver stopped before meeting the gradient tolerance.

    ``solution`` holds the best iterate found.
    """

    def __init__(self, msg, solution):
        super().__init__(msg)
        self.solution = solution


@dataclass(frozen=True)
class ControlTree:
    """One control per non-leaf node, stored per depth ``0..N-1``."""

    levels: tuple

    def __init__(self, levels: Sequence[np.ndarray]):
        frozen = []
        for lvl in levels:
            a = np.array(lvl, dtype=float).ravel()
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "levels", tuple(frozen))

    @classmethod
    def zeros(cls, n_roots: int, s: int, N: int) -> "ControlTree":
        return cls([np.zeros(n_roots * s ** k) for k in range(N)])

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_roots: int, s: int, N: int) -> "ControlTree":
        levels, start = [], 0
        for k in range(N):
            n = n_roots * s ** k
            levels.append(flat[start:start + n])
            start += n
        return cls(levels)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.levels) if self.levels else np.zeros(0)

    @property
    def horizon(self) -> int:
        return len(self.levels)

    def to_lists(self):
        return [lvl.tolist() for lvl in self.levels]


@dataclass(frozen=True)
class ScenarioTree:
    """States and path probabilities on every node for a given control tree."""

    model: SystemModel
    horizon: int
    root: DiscreteDistribution
    states: tuple
    probs: tuple
    controls: ControlTree

    @property
    def branching(self) -> int:
        return self.model.noise.size

    @property
    def n_roots(self) -> int:
        return self.root.size

    def depth_size(self, k: int) -> int:
        return self.n_roots * self.branching ** k

    def node_count(self) -> int:
        return sum(self.depth_size(k) for k in range(self.horizon + 1))

    def check_consistency(self) -> bool:
        """Re-run the dynamics and compare every child state."""
        for k in range(self.horizon):
            child = _advance(self.model, self.states[k], self.controls.levels[k])
            if not np.array_equal(child, self.states[k + 1]):
                return False
        return True


def _root_law(initial: Initial) -> DiscreteDistribution:
    if isinstance(initial, DiscreteDistribution):
        return initial
    return DiscreteDistribution.point_mass(float(initial))


def _advance(model: SystemModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    s = model.noise.size
    xr = np.repeat(x, s)
    ur = np.repeat(u, s)
    wr = np.tile(model.noise.values, x.size)
    return np.asarray(model.dynamics(xr, ur, wr), dtype=float)


def _level_probs(root: DiscreteDistribution, noise: DiscreteDistribution, N: int):
    probs = [np.array(root.probs)]
    for _ in range(N):
        probs.append(np.outer(probs[-1], noise.probs).ravel())
    for p in probs:
        p.setflags(write=False)
    return tuple(probs)


def _simulate(model, root, controls: ControlTree):
    states = [np.array(root.values)]
    for k in range(controls.horizon):
        states.append(_advance(model, states[k], controls.levels[k]))
    for x in states:
        x.setflags(write=False)
    return tuple(states)


def _check_shape(model, root, N, controls: ControlTree):
    s = model.noise.size
    if controls.horizon != N:
        raise ShapeMismatch(f"control tree has horizon {controls.horizon}, expected {N}")
    for k, lvl in enumerate(controls.levels):
        if lvl.size != root.size * s ** k:
            raise ShapeMismatch(f"depth {k}: {lvl.size} controls for "
                                f"{root.size * s ** k} nodes")


def build_tree(model: SystemModel, initial: Initial, N: int,
               controls: Optional[ControlTree] = None,
               node_cap: int = DEFAULT_NODE_CAP) -> ScenarioTree:
    """Forward-simulate all disturbance histories up to depth ``N``."""
    if N < 1:
        raise ValueError(f"horizon must be >= 1, got {N}")
    root = _root_law(initial)
    s = model.noise.size
    leaves = root.size * s ** N
    if leaves > node_cap:
        raise NodeCapExceeded(f"{leaves} leaves at N={N} exceed the node cap "
                              f"{node_cap}; reduce the horizon")
    if controls is None:
        controls = ControlTree.zeros(root.size, s, N)
    _check_shape(model, root, N, controls)
    return ScenarioTree(model=model, horizon=N, root=root,
                        states=_simulate(model, root, controls),
                        probs=_level_probs(root, model.noise, N),
                        controls=controls)


def with_controls(tree: ScenarioTree, controls: ControlTree) -> ScenarioTree:
    _check_shape(tree.model, tree.root, tree.horizon, controls)
    return ScenarioTree(model=tree.model, horizon=tree.horizon, root=tree.root,
                        states=_simulate(tree.model, tree.root, controls),
                        probs=tree.probs, controls=controls)


def evaluate_cost(tree: ScenarioTree, controls: ControlTree) -> float:
    """Exact expected accumulated stage cost of ``controls`` on ``tree``."""
    _check_shape(tree.model, tree.root, tree.horizon, controls)
    states = _simulate(tree.model, tree.root, controls)
    g = tree.model.stage_cost
    total = 0.0
    for k in range(tree.horizon):
        total += float(np.dot(tree.probs[k], g(states[k], controls.levels[k])))
    return total


def stage_costs(tree: ScenarioTree) -> np.ndarray:
    """Expected stage cost per depth for the controls stored in ``tree``."""
    g = tree.model.stage_cost
    return np.array([float(np.dot(tree.probs[k], g(tree.states[k], tree.controls.levels[k])))
                     for k in range(tree.horizon)])


def cost_gradient(tree: ScenarioTree, controls: ControlTree) -> ControlTree:
    """Reverse-mode gradient of :func:`evaluate_cost` w.r.t. every node control.

    The adjoint of a node collects ``p * dg/dx`` plus its children's adjoints
    propagated through ``df/dx``.
    """
    model = tree.model
    _check_shape(model, tree.root, tree.horizon, controls)
    states = _simulate(model, tree.root, controls)
    s = model.noise.size
    N = tree.horizon
    lam_next = np.zeros(states[N].size)
    grads: List[np.ndarray] = [None] * N
    for k in range(N - 1, -1, -1):
        x, u, p = states[k], controls.levels[k], tree.probs[k]
        gx, gu = model.partials_g(x, u)
        wr = np.tile(model.noise.values, x.size)
        fx, fu = model.partials_f(np.repeat(x, s), np.repeat(u, s), wr)
        back_x = (lam_next * fx).reshape(x.size, s).sum(axis=1)
        back_u = (lam_next * fu).reshape(x.size, s).sum(axis=1)
        grads[k] = p * gu + back_u
        lam_next = p * gx + back_x
    return ControlTree(grads)


@dataclass
class OcpSolution:
    controls: ControlTree
    value: float
    gradient_norm: float
    iterations: int
    converged: bool
    tree: ScenarioTree = field(repr=False, default=None)

    def to_json(self) -> str:
        return json.dumps({
            "horizon": self.controls.horizon,
            "value": self.value,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "controls": self.controls.to_lists(),
        })


def _projected_lbfgs(fun, grad, x0, lo, hi, scale, max_iters, grad_tol, memory=20):
    """Box-projected L-BFGS in scaled coordinates ``z = x * scale``.

    ``scale`` is a diagonal preconditioner; path probabilities make raw
    tree gradients span many orders of magnitude.
    """
    x = np.clip(x0, lo, hi)
    f = fun(x)
    g = grad(x)

    def pg_norm(x, g):
        step = np.clip(x - g, lo, hi) - x
        return float(np.max(np.abs(step))) if step.size else 0.0

    S, Y = [], []
    it = 0
    while it < max_iters:
        gn = pg_norm(x, g)
        if gn <= grad_tol:
            return x, f, gn, it, True
        gz = g / scale
        q = gz.copy()
        alphas = []
        for s_, y_ in reversed(list(zip(S, Y))):
            rho = 1.0 / np.dot(y_, s_)
            a = rho * np.dot(s_, q)
            alphas.append((a, rho, s_, y_))
            q -= a * y_
        if S:
            q *= np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
        for a, rho, s_, y_ in reversed(alphas):
            b = rho * np.dot(y_, q)
            q += (a - b) * s_
        dz = -q
        d = dz / scale
        if np.dot(g, d) >= 0:
            S.clear(); Y.clear()
            d = -gz / scale
        t = 1.0
        accepted = False
        g_new = None
        for _ in range(60):
            x_new = np.clip(x + t * d, lo, hi)
            f_new = fun(x_new)
            if not np.isfinite(f_new):
                t *= 0.5
                continue
            slope = np.dot(g, x_new - x)
            if f_new <= f + 1e-4 * slope:
                accepted = True
                break
            if f_new <= f + 1e-13 * abs(f):
                # decrease is below rounding: approximate Wolfe test
                g_new = grad(x_new)
                if -0.9 * abs(slope) <= np.dot(g_new, x_new - x) <= 0.8 * abs(slope):
                    accepted = True
                    break
                g_new = None
            t *= 0.5
        it += 1
        if not accepted:
            if S:
                S.clear(); Y.clear()
                continue
            return x, f, gn, it, False
        if g_new is None:
            g_new = grad(x_new)
        sz = (x_new - x) * scale
        yz = (g_new - g) / scale
        if np.dot(sz, yz) > 1e-12 * np.dot(yz, yz):
            S.append(sz); Y.append(yz)
            if len(S) > memory:
                S.pop(0); Y.pop(0)
        if f_new == f and np.array_equal(x_new, x):
            return x, f, pg_norm(x, g_new), it, pg_norm(x, g_new) <= grad_tol
        x, f, g = x_new, f_new, g_new
    gn = pg_norm(x, g)
    return x, f, gn, it, gn <= grad_tol


def solve(model: SystemModel, initial: Initial, N: int, max_iters: int = 500,
          grad_tol: float = 1e-8, warm_start: Optional[ControlTree] = None,
          node_cap: int = DEFAULT_NODE_CAP, raise_on_failure: bool = True,
          _widen: int = 2) -> OcpSolution:
    """Minimize the expected N-stage cost over all causal control trees.

    Starts from ``warm_start`` or zero controls. If the zero start fails
    (e.g. ``x+ = (u - x)^2 + w`` overflows over long horizons), the solve is
    restarted by continuation: the ``N-1`` solution with zero controls
    appended at the last depth.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        tree = build_tree(model, initial, N, warm_start, node_cap=node_cap)
    root, s = tree.root, tree.branching
    lo, hi = model.control_bounds
    scale = np.sqrt(np.concatenate(tree.probs[:N]))

    def fun(flat):
        return evaluate_cost(tree, ControlTree.from_flat(flat, root.size, s, N))

    def grad(flat):
        return cost_gradient(tree, ControlTree.from_flat(flat, root.size, s, N)).flat()

    def run(start):
        with np.errstate(over="ignore", invalid="ignore"):
            return _projected_lbfgs(fun, grad, start.flat(), lo, hi, scale,
                                    max_iters, grad_tol)

    x, f, gn, its, ok = run(tree.controls)
    if not (ok and np.isfinite(f)) and warm_start is None and N > 1:
        shorter = solve(model, initial, N - 1, max_iters, grad_tol,
                        node_cap=node_cap, raise_on_failure=False)
        start = ControlTree(list(shorter.controls.levels)
                            + [np.zeros(tree.depth_size(N - 1))])
        x, f, gn, its2, ok = run(start)
        its += its2
    controls = ControlTree.from_flat(x, root.size, s, N)
    solved = with_controls(tree, controls)
    value = evaluate_cost(solved, controls)
    active = np.isclose(x, lo, rtol=0, atol=1e-12) | np.isclose(x, hi, rtol=0, atol=1e-12)
    if active.any() and _widen > 0:
        width = hi - lo
        wider = dataclasses.replace(model, control_bounds=(lo - width, hi + width))
        log.warning("control bound active at %d nodes; widening to %s",
                    int(active.sum()), wider.control_bounds)
        sol = solve(wider, initial, N, max_iters, grad_tol, controls, node_cap,
                    raise_on_failure, _widen - 1)
        sol.tree = ScenarioTree(model=model, horizon=N, root=root,
                                states=sol.tree.states, probs=sol.tree.probs,
                                controls=sol.controls)
        return sol
    sol = OcpSolution(controls=controls, value=value, gradient_norm=gn,
                      iterations=its, converged=ok, tree=solved)
    if not ok and raise_on_failure:
        raise NotConverged(f"N={N}: gradient norm {gn:.3e} > {grad_tol:g} "
                           f"after {its} iterations", sol)
    return sol


def optimal_state_distributions(solution: OcpSolution,
                                tree: Optional[ScenarioTree] = None,
                                tol: float = 1e-12) -> List[DiscreteDistribution]:
    """Exact state law at every depth ``0..N`` of a solved tree."""
    tree = solution.tree if tree is None else with_controls(tree, solution.controls)
    out = []
    for x, p in zip(tree.states, tree.probs):
        v, q, _ = merge_atoms(x, p, tol)
        out.append(DiscreteDistribution(v, q, tol=tol))
    return out


def distributions_csv_rows(dists: Sequence[DiscreteDistribution]):
    for k, d in enumerate(dists):
        for v, p in d.atoms():
            yield k, v, p
