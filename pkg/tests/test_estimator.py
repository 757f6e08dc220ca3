import math
import warnings

import numpy as np
import pytest

from nestmlmc.estimator import (Allocation, CouplingMode, LevelGeometry, estimate_crude,
                                estimate_ml2r, estimate_mlmc, level_cost,
                                level_difference_block, level_difference_sample, run_levels)
from nestmlmc.model import Payoff, StreamKey, builtin_gaussian_linear
from nestmlmc.weights import WeightSpec, solve_weights


@pytest.fixture
def square():
    return builtin_gaussian_linear(sigma=1.0)


def test_geometry():
    g = LevelGeometry(4, 2, 3)
    assert [g.K(j) for j in (1, 2, 3)] == [4, 8, 16]
    assert g.h_j(3) == 1 / 16
    assert LevelGeometry.from_h(0.125, 3, 2) == LevelGeometry(8, 3, 2)
    with pytest.raises(ValueError):
        LevelGeometry.from_h(0.3, 2, 2)
    with pytest.raises(ValueError):
        LevelGeometry(1, 1, 2)
    with pytest.raises(ValueError):
        g.K(4)


def test_allocation_counts():
    a = Allocation(10, (0.5, 0.45, 0.05))
    assert a.counts == [5, 5, 2]
    assert Allocation.uniform(9, 3).counts == [3, 3, 3]
    with pytest.raises(ValueError):
        Allocation(10, (0.5, 0.6))
    with pytest.raises(ValueError):
        Allocation(10, (1.0, 0.0))


def test_level_cost_convention():
    g = LevelGeometry(2, 3, 3)
    assert [level_cost(g, j) for j in (1, 2, 3)] == [2.0, 8.0, 24.0]


def test_crude_estimate_unbiased_for_its_own_level(square):
    res = estimate_crude(square, 0.25, 100_000, StreamKey(1))
    assert abs(res.value - square.oracles.mean_payoff_at(0.25)) < 4 * res.std_error
    assert res.total_cost == 400_000
    assert res.total_evaluations == 400_000


def test_schedule_independence(square):
    g = LevelGeometry(2, 2, 4)
    alloc = Allocation(40_000, (0.4, 0.3, 0.2, 0.1))
    key = StreamKey(17)
    one = estimate_mlmc(square, g, alloc, "antithetic", key, workers=1, block_size=1000)
    many = estimate_mlmc(square, g, alloc, "antithetic", key, workers=8, block_size=1000)
    assert one.value == many.value
    assert [lv.var for lv in one.levels] == [lv.var for lv in many.levels]


def test_crude_shares_stream_with_first_level(square):
    crude = estimate_crude(square, 0.25, 5000, StreamKey(3))
    ml = estimate_mlmc(square, LevelGeometry(4, 2, 2), Allocation(10_000, (0.5, 0.5)),
                       "standard", StreamKey(3))
    assert crude.value == ml.levels[0].mean


def test_mlmc_telescopes_to_finest_level(square):
    g = LevelGeometry(1, 2, 4)
    res = estimate_mlmc(square, g, Allocation(200_000, (0.55, 0.2, 0.15, 0.1)),
                        "standard", StreamKey(5))
    assert abs(res.value - square.oracles.mean_payoff_at(1 / 8)) < 4 * res.std_error


def test_antithetic_level_mean_zero_for_square(square):
    # E[f(fine) - mean f(coarse)] = sigma^2 (h_j - h_{j-1}) for f = x^2
    g = LevelGeometry(2, 2, 3)
    d = level_difference_block(square, g, 3, "antithetic", 200_000, StreamKey(8))
    assert abs(d.mean() - (1 / 8 - 1 / 4)) < 4 * d.std() / math.sqrt(d.size)


def test_ml2r_matches_weighted_oracle():
    m = builtin_gaussian_linear(sigma=1.0, payoff=Payoff.indicator(1.0, "<="))
    g = LevelGeometry(2, 2, 3)
    wv = solve_weights(WeightSpec(1.0, 2, 3))
    res = estimate_ml2r(m, g, Allocation(300_000, (0.6, 0.25, 0.15)), wv, "standard",
                        StreamKey(11))
    expected = sum(w * m.oracles.mean_payoff_at(g.h_j(j + 1)) for j, w in enumerate(wv.w))
    assert abs(res.value - expected) < 4 * res.std_error
    assert res.levels[0].weight == 1.0
    assert [lv.weight for lv in res.levels[1:]] == list(wv.W[1:])


def test_ml2r_single_level_equals_mlmc(square):
    g = LevelGeometry(4, 2, 1)
    a = Allocation(1000, (1.0,))
    wv = solve_weights(WeightSpec(1.0, 2, 1))
    assert estimate_ml2r(square, g, a, wv, "standard", StreamKey(2)).value == \
        estimate_mlmc(square, g, a, "standard", StreamKey(2)).value


def test_ml2r_weights_must_match_geometry(square):
    with pytest.raises(ValueError):
        estimate_ml2r(square, LevelGeometry(1, 2, 3), Allocation.uniform(30, 3),
                      solve_weights(WeightSpec(1.0, 2, 2)), "standard", StreamKey(1))


def test_constant_payoff_has_zero_level_differences():
    m = builtin_gaussian_linear(payoff=Payoff.constant(2.0))
    res = estimate_mlmc(m, LevelGeometry(1, 2, 3), Allocation.uniform(300, 3), "standard",
                        StreamKey(4))
    assert res.value == 2.0
    assert [lv.var for lv in res.levels] == [0.0, 0.0, 0.0]


def test_antithetic_indicator_warns():
    m = builtin_gaussian_linear(payoff=Payoff.indicator(0.0))
    with pytest.warns(UserWarning):
        estimate_mlmc(m, LevelGeometry(1, 2, 2), Allocation.uniform(20, 2), "antithetic",
                      StreamKey(1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_mlmc(m, LevelGeometry(1, 2, 2), Allocation.uniform(20, 2), "standard",
                      StreamKey(1))


def test_level_difference_sample(square):
    g = LevelGeometry(1, 2, 3)
    v = level_difference_sample(square, g, 2, CouplingMode.STANDARD, StreamKey(6))
    assert v == level_difference_block(square, g, 2, "standard", 1, StreamKey(6))[0]
    with pytest.raises(ValueError):
        level_difference_sample(square, g, 1, "standard", StreamKey(6))


def test_allocation_level_mismatch(square):
    with pytest.raises(ValueError):
        estimate_mlmc(square, LevelGeometry(1, 2, 3), Allocation.uniform(30, 2), "standard",
                      StreamKey(1))


def test_run_levels_moment_merge_matches_direct(square):
    g = LevelGeometry(2, 2, 2)
    key = StreamKey(12)
    (n, mean, var), = run_levels(square, g, [2500], "standard", key, levels=[2], block_size=2500)
    x = level_difference_block(square, g, 2, "standard", 2500, key.child(2, 0))
    assert n == 2500
    assert mean == pytest.approx(x.mean(), rel=1e-13)
    assert var == pytest.approx(x.var(ddof=1), rel=1e-12)
    (_, mean2, var2), = run_levels(square, g, [2500], "standard", key, levels=[2], block_size=700)
    assert np.isfinite(mean2) and var2 > 0
