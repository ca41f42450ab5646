import numpy as np
import pytest

from oracles import two_stage_brute_force
from smpc import grid_dp, scenario
from smpc.grid_dp import backward_induction, dpp_residual, feedback
from smpc.model import DiscreteDistribution, SystemModel


@pytest.fixture(scope="module")
def table(table16):
    return table16


def test_v0_is_zero(table):
    assert np.all(table.values[0] == 0.0)


def test_v1_is_state_cost(table):
    np.testing.assert_allclose(table.values[1], table.grid ** 2, rtol=0, atol=1e-12)


def test_v2_matches_brute_force(table):
    v_ref, _ = two_stage_brute_force()
    assert abs(table.value(3.0, 2) - v_ref) / v_ref <= 1e-3


def test_values_nonnegative_and_nondecreasing(table):
    for k in range(table.horizon + 1):
        assert np.all(table.values[k] >= 0)
    for k in range(table.horizon):
        assert np.all(table.values[k + 1] >= table.values[k])


def test_zero_cost_model_gives_zero_values():
    noise = DiscreteDistribution([0.0, 0.5], [0.5, 0.5])
    m = SystemModel("zero", lambda x, u, w: 0.5 * x + u + w, lambda x, u: 0.0 * x * u, noise,
                    state_domain=(0.0, 5.0))
    t = backward_induction(m, 4, grid_size=101)
    for v in t.values:
        assert np.all(v == 0.0)
    assert dpp_residual(m, t, 1.0, 2) == 0.0


def test_feedback_single_step_is_zero(table):
    for x in (0.5, 3.0, 7.0):
        assert feedback(table, x, 1) == 0.0


@pytest.mark.xfail(strict=True, reason="piecewise-linear V_1 at G=2001 shifts the argmin "
                   "by ~2.8e-4 (2.0e-4 on [0,12]); the error is first order in the grid step")
def test_feedback_two_steps_matches_brute_force(table):
    _, u_ref = two_stage_brute_force()
    assert feedback(table, 3.0, 2) == pytest.approx(u_ref, abs=1e-4)


def test_feedback_two_steps_converges_with_grid(paper, table):
    _, u_ref = two_stage_brute_force()
    errs = [abs(feedback(t, 3.0, 2) - u_ref)
            for t in (table, backward_induction(paper, 2, grid_size=4001))]
    assert errs[0] < 5e-4
    assert errs[1] < 1e-4
    assert errs[1] < errs[0] / 2


def test_feedback_is_bit_reproducible(table):
    a = feedback(table, 2.718281828, 5)
    b = feedback(table, 2.718281828, 5)
    assert a == b
    batch = grid_dp.feedback_many(table, np.array([1.0, 2.718281828, 4.0]), 5)
    assert batch[1] == a


def test_feedback_reoptimizes_off_grid(table):
    x = 3.0031  # between grid nodes
    direct = feedback(table, x, 4)
    assert direct != np.interp(x, table.grid, table.feedback[4])


def test_feedback_clamps_out_of_domain(paper):
    t = backward_induction(paper, 2, grid_size=201)
    before = t.clamp_events
    u = feedback(t, 25.0, 2)
    assert t.clamp_events == before + 1
    assert u == feedback(t, t.grid[-1], 2)


@pytest.mark.parametrize("N,M", [(5, 5), (5, 2), (3, 1), (8, 4)])
def test_dpp_residual_small(paper, table, N, M):
    r = dpp_residual(paper, table, 3.0, M, N)
    assert r <= 2e-3 * table.value(3.0, N)


def test_dpp_residual_rejects_bad_split(paper, table):
    with pytest.raises(ValueError):
        dpp_residual(paper, table, 3.0, 0, 4)


def test_oracle_equivalence_short_horizons(paper, table):
    for N in (1, 2, 3, 4, 5):
        v_tree = scenario.solve(paper, 3.0, N).value
        assert abs(v_tree - table.value(3.0, N)) / v_tree <= 1e-3


def test_grid_refinement(paper, table):
    coarse = backward_induction(paper, 10, grid_size=1001)
    for N in (5, 10):
        assert abs(coarse.value(3.0, N) - table.value(3.0, N)) / table.value(3.0, N) < 1e-3


def test_cost_offset_shifts_values_not_feedback(paper):
    c = 3.5
    base = backward_induction(paper, 6, grid_size=501)
    shifted = backward_induction(paper.with_cost_offset(c), 6, grid_size=501)
    for k in range(7):
        np.testing.assert_allclose(shifted.values[k], base.values[k] + k * c, rtol=0, atol=1e-9)
    for k in range(1, 7):
        np.testing.assert_allclose(shifted.feedback[k], base.feedback[k], rtol=0, atol=1e-6)


def test_worker_count_does_not_change_table(paper):
    a = backward_induction(paper, 4, grid_size=401, workers=1)
    b = backward_induction(paper, 4, grid_size=401, workers=3)
    for k in range(5):
        np.testing.assert_array_equal(a.values[k], b.values[k])


def test_table_csv(paper):
    t = backward_induction(paper, 1, grid_size=3)
    lines = t.to_csv().splitlines()
    assert lines[0] == "k,x,V,feedback"
    assert len(lines) == 1 + 2 * 3
    assert lines[1].endswith(",")  # no feedback at k = 0
