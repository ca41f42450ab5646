"""Controlled stochastic systems with finite-support disturbances.

A model bundles the one-step map ``x+ = f(x, u, w)``, the pointwise stage
cost ``g(x, u)`` and the noise law. All callables are expected to work
elementwise on numpy arrays so trees, grids and path ensembles can be
evaluated in a single vectorized call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Tuple

import numpy as np

Interval = Tuple[float, float]
Partials = Callable[..., Tuple[np.ndarray, np.ndarray]]

ATOM_MERGE_TOL = 1e-12
PROB_SUM_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a model or distribution violates its invariants."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def merge_atoms(values, probs, tol: float = ATOM_MERGE_TOL):
    """Sort atoms and merge runs whose consecutive gaps are <= ``tol``.

    Merged atoms sit at the probability-weighted mean of their run.
    Returns ``(values, probs, moved)`` where ``moved`` is the transport
    cost ``sum p_i |x_i - x_merged|`` caused by merging.
    """
    values = np.asarray(values, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    order = np.argsort(values, kind="stable")
    values, probs = values[order], probs[order]
    if values.size <= 1:
        return values, probs, 0.0
    new_group = np.empty(values.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = np.diff(values) > tol
    if new_group.all():
        return values, probs, 0.0
    groups = np.cumsum(new_group) - 1
    merged_p = np.bincount(groups, weights=probs)
    merged_x = np.bincount(groups, weights=probs * values) / merged_p
    # singleton groups keep their exact value
    singles = np.bincount(groups) == 1
    merged_x[singles] = values[new_group][singles]
    moved = float(np.sum(probs * np.abs(values - merged_x[groups])))
    return merged_x, merged_p, moved


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite-support probability law on the real line.

    Atoms are kept sorted and pairwise distinct; construction merges values
    closer than ``ATOM_MERGE_TOL``.
    """

    values: np.ndarray
    probs: np.ndarray

    def __init__(self, values: Sequence[float], probs: Sequence[float],
                 tol: float = ATOM_MERGE_TOL):
        values = np.asarray(values, dtype=float).ravel()
        probs = np.asarray(probs, dtype=float).ravel()
        if values.size == 0:
            raise ModelError("distribution needs at least one atom")
        if values.shape != probs.shape:
            raise ModelError("values and probabilities differ in length")
        if not np.all(np.isfinite(values)):
            raise ModelError("atom values must be finite")
        if np.any(probs <= 0.0) or np.any(probs > 1.0 + PROB_SUM_TOL):
            raise ModelError("atom probabilities must lie in (0, 1]")
        total = math.fsum(probs.tolist())
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ModelError(f"probabilities sum to {total!r}, not 1")
        values, probs, _ = merge_atoms(values, probs, tol)
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "probs", _freeze(probs))

    @classmethod
    def point_mass(cls, x: float) -> "DiscreteDistribution":
        return cls([x], [1.0])

    @property
    def size(self) -> int:
        return int(self.values.size)

    def mean(self) -> float:
        return float(np.dot(self.probs, self.values))

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.probs, fn(self.values)))

    def cdf(self, x) -> np.ndarray:
        cum = np.cumsum(self.probs)
        idx = np.searchsorted(self.values, x, side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        """Inverse-CDF sampling from uniforms in [0, 1)."""
        cum = np.cumsum(self.probs)
        idx = np.searchsorted(cum, uniforms, side="right")
        return self.values[np.minimum(idx, self.size - 1)]

    def atoms(self):
        return list(zip(self.values.tolist(), self.probs.tolist()))

    def __eq__(self, other):
        if not isinstance(other, DiscreteDistribution):
            return NotImplemented
        return (np.array_equal(self.values, other.values)
                and np.array_equal(self.probs, other.probs))

    def __hash__(self):
        return hash((self.values.tobytes(), self.probs.tobytes()))

    def __repr__(self):
        body = ", ".join(f"{v:g}: {p:g}" for v, p in self.atoms()[:6])
        more = ", ..." if self.size > 6 else ""
        return f"DiscreteDistribution({{{body}{more}}})"


def pushforward(dist: DiscreteDistribution, fn: Callable[[np.ndarray], np.ndarray],
                tol: float = ATOM_MERGE_TOL) -> DiscreteDistribution:
    """Image law of ``dist`` under ``fn``; coincident images are merged."""
    images = np.asarray(fn(dist.values), dtype=float)
    return DiscreteDistribution(images, dist.probs, tol=tol)


def expected_stage_cost(stage_cost: Callable, states, controls, probs) -> float:
    """Expectation of ``stage_cost`` under a finite joint (state, control) law."""
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    probs = np.asarray(probs, dtype=float)
    return float(np.dot(probs, stage_cost(states, controls)))


@dataclass(frozen=True)
class SystemModel:
    """Stochastic system ``x+ = f(x, u, w)`` with stage cost ``g(x, u)``.

    ``dynamics_partials(x, u, w)`` and ``stage_cost_partials(x, u)`` return
    ``(d/dx, d/du)`` and enable exact adjoint gradients; when omitted,
    central differences on ``f`` and ``g`` are used instead.
    """

    name: str
    dynamics: Callable
    stage_cost: Callable
    noise: DiscreteDistribution
    control_bounds: Interval = (-10.0, 10.0)
    state_domain: Interval = (0.0, 20.0)
    dynamics_partials: Optional[Partials] = field(default=None, compare=False)
    stage_cost_partials: Optional[Partials] = field(default=None, compare=False)
    params: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo, hi = self.control_bounds
        if not lo < hi:
            raise ModelError(f"control_bounds {self.control_bounds} is empty")
        lo, hi = self.state_domain
        if not lo < hi:
            raise ModelError(f"state_domain {self.state_domain} is empty")
        object.__setattr__(self, "control_bounds", (float(self.control_bounds[0]),
                                                    float(self.control_bounds[1])))
        object.__setattr__(self, "state_domain", (float(self.state_domain[0]),
                                                  float(self.state_domain[1])))
        xs = np.linspace(*self.state_domain, 101)
        us = np.linspace(*self.control_bounds, 101)
        X, U = np.meshgrid(xs, us, indexing="ij")
        sampled = np.asarray(self.stage_cost(X, U), dtype=float)
        if not np.all(np.isfinite(sampled)):
            raise ModelError("stage cost is not bounded below on the sampled box")

    def step(self, x, u, w):
        return self.dynamics(x, u, w)

    def partials_f(self, x, u, w, h: float = 1e-6):
        if self.dynamics_partials is not None:
            return self.dynamics_partials(x, u, w)
        fx = (self.dynamics(x + h, u, w) - self.dynamics(x - h, u, w)) / (2 * h)
        fu = (self.dynamics(x, u + h, w) - self.dynamics(x, u - h, w)) / (2 * h)
        return fx, fu

    def partials_g(self, x, u, h: float = 1e-6):
        if self.stage_cost_partials is not None:
            return self.stage_cost_partials(x, u)
        gx = (self.stage_cost(x + h, u) - self.stage_cost(x - h, u)) / (2 * h)
        gu = (self.stage_cost(x, u + h) - self.stage_cost(x, u - h)) / (2 * h)
        return gx, gu

    def with_cost_offset(self, c: float) -> "SystemModel":
        """Same model with ``g + c``; minimizers are unchanged."""
        g = self.stage_cost
        return SystemModel(
            name=f"{self.name}+{c:g}", dynamics=self.dynamics,
            stage_cost=lambda x, u: g(x, u) + c, noise=self.noise,
            control_bounds=self.control_bounds, state_domain=self.state_domain,
            dynamics_partials=self.dynamics_partials,
            stage_cost_partials=self.stage_cost_partials, params=self.params)


def make_paper_example(a: float = 1.0, b: float = 0.25, p_a: float = 0.7,
                       state_weight: float = 1.0, control_weight: float = 25.0,
                       control_bounds: Interval = (-10.0, 10.0),
                       state_domain: Interval = (0.0, 20.0)) -> SystemModel:
    """Scalar example ``x+ = (u - x)^2 + w``, ``g = q x^2 + r u^2``.

    The noise takes the value ``a`` with probability ``p_a`` and ``b``
    otherwise.
    """
    if not 0.0 < p_a < 1.0:
        raise ModelError(f"p_a must lie in (0, 1), got {p_a}")
    if state_weight <= 0 or control_weight <= 0:
        raise ModelError("cost weights must be positive")
    q, r = float(state_weight), float(control_weight)

    def dynamics(x, u, w):
        return (u - x) ** 2 + w

    def dynamics_partials(x, u, w):
        d = 2.0 * (u - x)
        return -d, d

    def stage_cost(x, u):
        return q * x ** 2 + r * u ** 2

    def stage_cost_partials(x, u):
        return 2.0 * q * x, 2.0 * r * u

    noise = DiscreteDistribution([a, b], [p_a, 1.0 - p_a])
    return SystemModel(
        name="paper_example", dynamics=dynamics, stage_cost=stage_cost,
        noise=noise, control_bounds=control_bounds, state_domain=state_domain,
        dynamics_partials=dynamics_partials,
        stage_cost_partials=stage_cost_partials,
        params=dict(a=a, b=b, p_a=p_a, state_weight=q, control_weight=r))


MODEL_REGISTRY = {"paper_example": make_paper_example}


def model_from_config(cfg: Mapping[str, Any]) -> SystemModel:
    """Build a registered model from its JSON block.

    >>> model_from_config({"model": "paper_example", "a": 1.0}).params["a"]
    1.0
    """
    cfg = dict(cfg)
    name = cfg.pop("model", None)
    if name not in MODEL_REGISTRY:
        raise ModelError(f"model: unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}")
    for key in ("control_bounds", "state_domain"):
        if key in cfg:
            cfg[key] = tuple(float(v) for v in cfg[key])
    try:
        return MODEL_REGISTRY[name](**cfg)
    except TypeError as exc:
        raise ModelError(f"model: {exc}") from None


@dataclass(frozen=True)
class StationaryEstimate:
    """Estimated stationary state law and its expected stage cost."""

    state_distribution: DiscreteDistribution
    stationary_cost: float
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.stationary_cost):
            raise ModelError("stationary cost must be finite")
