import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smpc.model import (DiscreteDistribution, ModelError, SystemModel, expected_stage_cost,
                        make_paper_example, merge_atoms, model_from_config, pushforward)


def test_paper_example_parameters(paper):
    assert paper.noise.atoms() == [(0.25, pytest.approx(0.3)), (1.0, 0.7)]
    assert paper.params["control_weight"] == 25.0
    assert paper.control_bounds == (-10.0, 10.0)


def test_paper_dynamics_and_cost(paper):
    assert paper.dynamics(3.0, 3.0, 1.0) == 1.0
    assert paper.stage_cost(3.0, 0.0) == 9.0


@pytest.mark.parametrize("p_a", [0.0, 1.0, -0.2, 1.5])
def test_rejects_bad_probability(p_a):
    with pytest.raises(ModelError):
        make_paper_example(p_a=p_a)


def test_rejects_nonpositive_weights():
    with pytest.raises(ModelError):
        make_paper_example(control_weight=0.0)


def test_model_is_deterministic(paper):
    x, u, w = 2.345678, -0.123, 0.25
    assert paper.dynamics(x, u, w) == paper.dynamics(x, u, w)
    assert paper.stage_cost(x, u) == paper.stage_cost(x, u)


def test_unbounded_cost_rejected():
    noise = DiscreteDistribution([0.0], [1.0])
    with pytest.raises(ModelError):
        SystemModel("bad", lambda x, u, w: x, lambda x, u: np.where(u < 0, -np.inf, 0.0), noise)


def test_distribution_validation():
    with pytest.raises(ModelError):
        DiscreteDistribution([], [])
    with pytest.raises(ModelError):
        DiscreteDistribution([0.0, 1.0], [0.5, 0.4])
    with pytest.raises(ModelError):
        DiscreteDistribution([0.0, 1.0], [1.0, 0.0])


def test_distribution_sorted_and_merged():
    d = DiscreteDistribution([2.0, 1.0, 1.0 + 1e-13], [0.5, 0.25, 0.25])
    assert d.values.tolist() == [pytest.approx(1.0), 2.0]
    assert d.probs.tolist() == [0.5, 0.5]


def test_expected_stage_cost_examples(paper):
    assert expected_stage_cost(paper.stage_cost, [3.0], [0.0], [1.0]) == 9.0
    g = lambda x, u: x ** 2
    assert expected_stage_cost(g, [1.0, 2.0], [0.0, 0.0], [0.5, 0.5]) == 2.5


def test_expected_stage_cost_uniform_four(paper):
    xs, us = [0.5, 1.0, 2.0, 4.0], [0.1, -0.2, 0.0, 1.0]
    direct = sum(paper.stage_cost(x, u) for x, u in zip(xs, us)) / 4
    assert expected_stage_cost(paper.stage_cost, xs, us, [0.25] * 4) == pytest.approx(direct, rel=1e-15)


@given(st.floats(-50, 50), st.floats(-10, 10))
def test_point_mass_expectation_is_exact(x, u):
    paper = make_paper_example()
    assert expected_stage_cost(paper.stage_cost, [x], [u], [1.0]) == paper.stage_cost(x, u)


def test_pushforward_examples(paper):
    assert pushforward(DiscreteDistribution.point_mass(3.0), np.square).atoms() == [(9.0, 1.0)]
    sym = DiscreteDistribution([-1.0, 1.0], [0.5, 0.5])
    assert pushforward(sym, np.square).atoms() == [(1.0, 1.0)]
    assert pushforward(paper.noise, lambda v: v) == paper.noise


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(0.01, 1.0)), min_size=1, max_size=30))
def test_pushforward_preserves_mass(atoms):
    vals = [a for a, _ in atoms]
    w = np.array([p for _, p in atoms])
    d = DiscreteDistribution(vals, w / math.fsum(w))
    img = pushforward(d, lambda v: np.round(v / 7.0))
    assert abs(math.fsum(img.probs) - 1.0) <= 1e-12
    assert np.all(np.diff(img.values) > 0)


def test_merge_atoms_reports_transport():
    v, p, moved = merge_atoms([0.0, 1e-10], [0.5, 0.5], tol=1e-9)
    assert v.tolist() == [pytest.approx(5e-11)]
    assert moved == pytest.approx(5e-11)


def test_paper_cost_nonnegative(paper):
    X, U = np.meshgrid(np.linspace(-20, 20, 81), np.linspace(-10, 10, 81))
    assert np.all(paper.stage_cost(X, U) >= 0)


def test_model_from_config():
    m = model_from_config({"model": "paper_example", "a": 1.0, "b": 0.25, "p_a": 0.7,
                           "state_weight": 1.0, "control_weight": 25.0,
                           "control_bounds": [-10, 10], "state_domain": [0, 12]})
    assert m.state_domain == (0.0, 12.0)
    with pytest.raises(ModelError, match="model"):
        model_from_config({"model": "nope"})
    with pytest.raises(ModelError):
        model_from_config({"model": "paper_example", "bogus": 1})
