import math

import numpy as np
import pytest

from nestmlmc.calibrate import (CalibrationInput, CalibrationPlan, choose_depth,
                                crude_inner_count, plan, theoretical_cost)
from nestmlmc.estimator import level_cost
from nestmlmc.model import StreamKey, builtin_gaussian_linear


def test_theoretical_cost_formula():
    eps, alpha, beta, M = 1e-3, 1.0, 0.5, 2
    expo = 0.5 * math.sqrt(2 * math.log(1e3) * math.log(2))
    assert theoretical_cost(eps, alpha, beta, M) == pytest.approx(1e6 * math.exp(expo))
    # beta = 1 removes the excess factor
    assert theoretical_cost(eps, alpha, 1.0, M) == pytest.approx(1e6)


def test_theoretical_cost_is_subpolynomial():
    # ratio to eps^-2.1 decreases once past its early peak and vanishes deep down
    ratios = [theoretical_cost(10.0**-k, 1.0, 0.5, 2) / 10.0 ** (2.1 * k) for k in range(4, 13)]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    assert theoretical_cost(1e-100, 1.0, 0.5, 2) / 1e210 < 1e-3


def test_theoretical_cost_validation():
    with pytest.raises(ValueError):
        theoretical_cost(1.5, 1.0, 0.5, 2)
    with pytest.raises(ValueError):
        theoretical_cost(0.1, 0.0, 0.5, 2)
    with pytest.raises(ValueError):
        theoretical_cost(0.1, 1.0, 0.5, 1)


def test_mlmc_depth_follows_bias_budget():
    for eps in (1e-1, 1e-2, 1e-3):
        R, bias, _ = choose_depth(CalibrationInput(eps, 1.0, 1.0, "mlmc"))
        assert bias <= eps / math.sqrt(2) < 2 * bias
        assert bias == 2.0 ** -(R - 1)
    assert choose_depth(CalibrationInput(1e-3, 1.0, 1.0, "mlmc"))[0] == 12


def test_ml2r_depth_is_shallower():
    inp = CalibrationInput(1e-4, 1.0, 1.0, "ml2r")
    R, bias, wv = choose_depth(inp)
    assert bias <= 1e-4 / math.sqrt(2)
    assert wv.spec.R == R
    assert R < choose_depth(CalibrationInput(1e-4, 1.0, 1.0, "mlmc"))[0]
    with pytest.raises(ValueError):
        choose_depth(CalibrationInput(1e-300, 1.0, 1e3, "ml2r"))


def test_crude_inner_count():
    assert crude_inner_count(CalibrationInput(0.01, 1.0, 1.0, "crude")) == 142
    assert crude_inner_count(CalibrationInput(0.01, 1.0, 1.0, "crude", K0=4)) == 144
    assert crude_inner_count(CalibrationInput(0.01, 1.0, 0.0, "crude", K0=4)) == 4


def test_input_validation():
    with pytest.raises(ValueError):
        CalibrationInput(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        CalibrationInput(0.1, -1.0, 1.0)
    with pytest.raises(ValueError):
        CalibrationInput(0.1, 1.0, 1.0, "mc")


def test_plan_allocation_rule():
    inp = CalibrationInput(0.01, 1.0, 1.0, "mlmc", K0=4)
    var = [2.0, 0.1, 0.03, 0.01, 0.004, 0.001, 0.0003]
    p = plan(inp, level_variances=var)
    R = p.geometry.R
    assert R == 7
    c = np.array([level_cost(p.geometry, j) for j in range(1, R + 1)])
    root = np.sqrt(np.array(var) / c)
    assert np.allclose(p.allocation.q, root / root.sum())
    assert p.predicted_stat_error <= 0.01 / math.sqrt(2) * (1 + 1e-9)
    assert p.predicted_bias <= 0.01 / math.sqrt(2)
    assert math.hypot(p.predicted_bias, p.predicted_stat_error) <= 0.01


def test_plan_uses_weighted_variances_for_ml2r():
    inp = CalibrationInput(0.01, 1.0, 1.0, "ml2r", K0=4)
    seen = {}

    def var(geometry, weights):
        seen["R"] = geometry.R
        return [1.0] * geometry.R

    p = plan(inp, level_variances=var)
    W = [1.0] + list(p.weights.W[1:])
    c = np.array([level_cost(p.geometry, j) for j in range(1, p.geometry.R + 1)])
    root = np.abs(W) / np.sqrt(c)
    assert seen["R"] == p.geometry.R
    assert np.allclose(p.allocation.q, root / root.sum())


def test_plan_with_pilot_and_round_trip():
    m = builtin_gaussian_linear()
    inp = CalibrationInput(0.02, 1.0, 1.0, "ml2r", K0=2, pilot_N=500)
    p = plan(inp, m, StreamKey(1, (1,)), "antithetic")
    q = CalibrationPlan.from_dict(p.to_dict())
    assert q.geometry == p.geometry
    assert q.allocation == p.allocation
    assert q.weights.W == p.weights.W
    assert q.mode == p.mode


def test_plan_zero_variance_and_missing_source():
    p = plan(CalibrationInput(0.1, 1.0, 0.5, "mlmc"), level_variances=[0.0] * 4)
    assert p.allocation.N == 2
    with pytest.raises(ValueError):
        plan(CalibrationInput(0.1, 1.0, 0.5, "mlmc"))
    with pytest.raises(ValueError):
        plan(CalibrationInput(0.01, 1.0, 1.0, "mlmc"), level_variances=[1.0])
