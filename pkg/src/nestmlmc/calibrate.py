"""Depth and per-level sample sizes for a target RMSE.

The squared error budget is split evenly: the bias gets ``eps / sqrt(2)`` and
the statistical error gets the other ``eps**2 / 2``.  Level fractions follow
the effort-minimising rule ``q_j ~ sqrt(V_j / c_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .estimator import (Allocation, CouplingMode, LevelGeometry, level_cost, run_levels)
from .model import NestedModel, StreamKey
from .weights import R_MAX as ML2R_R_MAX, WeightSpec, WeightVector, solve_weights

FAMILIES = ("crude", "mlmc", "ml2r")
MLMC_R_MAX = 30


@dataclass(frozen=True)
class CalibrationInput:
    """Target RMSE plus the rate information the plan relies on.

    ``c_inf`` overrides the ML2R residual-bias proxy ``|c_R| ~ c_inf**R``
    (default ``|c1|``).
    """

    epsilon: float
    alpha: float
    c1: float
    family: str = "mlmc"
    M: int = 2
    K0: int = 1
    beta: Optional[float] = None
    V1: Optional[float] = None
    pilot_N: int = 1000
    c_inf: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")


@dataclass
class CalibrationPlan:
    family: str
    epsilon: float
    geometry: LevelGeometry
    allocation: Allocation
    mode: CouplingMode
    predicted_cost: float
    predicted_bias: float
    predicted_stat_error: float
    level_variances: list[float] = field(default_factory=list)
    weights: Optional[WeightVector] = None

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "epsilon": self.epsilon,
            "geometry": self.geometry.to_dict(),
            "allocation": self.allocation.to_dict(),
            "coupling": self.mode.value,
            "alpha": None if self.weights is None else self.weights.spec.alpha,
            "weights": None if self.weights is None else self.weights.to_dict(),
            "predicted_cost": self.predicted_cost,
            "predicted_bias": self.predicted_bias,
            "predicted_stat_error": self.predicted_stat_error,
            "level_variances": list(self.level_variances),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationPlan":
        geometry = LevelGeometry(**d["geometry"])
        alloc = Allocation(int(d["allocation"]["N"]), tuple(d["allocation"]["q"]))
        weights = None
        if d["family"] == "ml2r":
            weights = solve_weights(WeightSpec(float(d["alpha"]), geometry.M, geometry.R))
        return cls(
            family=d["family"], epsilon=float(d["epsilon"]), geometry=geometry,
            allocation=alloc, mode=CouplingMode(d.get("coupling", "standard")),
            predicted_cost=float(d["predicted_cost"]),
            predicted_bias=float(d["predicted_bias"]),
            predicted_stat_error=float(d["predicted_stat_error"]),
            level_variances=list(d.get("level_variances", [])), weights=weights,
        )


def theoretical_cost(epsilon: float, alpha: float, beta: float, M: int, K: float = 1.0) -> float:
    """Asymptotic ML2R cost ``K eps**-2 exp((1-beta)/sqrt(alpha) sqrt(2 log(1/eps) log M))``."""
    if not (0 < epsilon < 1):
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    expo = (1.0 - beta) / math.sqrt(alpha) * math.sqrt(2.0 * math.log(1.0 / epsilon) * math.log(M))
    return K * epsilon**-2 * math.exp(expo)


def choose_depth(inp: CalibrationInput) -> tuple[int, float, Optional[WeightVector]]:
    """Smallest depth whose predicted bias is within ``eps / sqrt(2)``.

    Returns ``(R, predicted_bias, weights)``; for the crude family ``R = 1``.
    """
    tol = inp.epsilon / math.sqrt(2.0)
    c1 = abs(inp.c1)
    h = 1.0 / inp.K0
    if inp.family == "mlmc":
        for R in range(1, MLMC_R_MAX + 1):
            bias = c1 * (h / inp.M ** (R - 1)) ** inp.alpha
            if bias <= tol:
                return R, bias, None
        raise ValueError(f"MLMC needs more than {MLMC_R_MAX} levels for eps={inp.epsilon}")
    if inp.family == "ml2r":
        c_inf = abs(inp.c_inf) if inp.c_inf is not None else c1
        for R in range(1, ML2R_R_MAX + 1):
            wv = solve_weights(WeightSpec(inp.alpha, inp.M, R))
            bias = abs(wv.w_tilde) * c_inf**R * h ** (inp.alpha * R)
            if bias <= tol:
                return R, bias, wv
        raise ValueError(f"ML2R needs more than {ML2R_R_MAX} levels for eps={inp.epsilon}")
    return 1, c1 * h**inp.alpha, None


def crude_inner_count(inp: CalibrationInput) -> int:
    """Smallest multiple ``K`` of ``K0`` with ``|c1| K**-alpha <= eps / sqrt(2)``."""
    if inp.c1 == 0:
        return inp.K0
    K = (math.sqrt(2.0) * abs(inp.c1) / inp.epsilon) ** (1.0 / inp.alpha)
    return max(1, math.ceil(K / inp.K0 - 1e-9)) * inp.K0


VarianceSource = Union[Sequence[float], Callable[[LevelGeometry, Optional[WeightVector]], Sequence[float]]]


def plan(inp: CalibrationInput, model: Optional[NestedModel] = None,
         key: Optional[StreamKey] = None, mode: CouplingMode = CouplingMode.STANDARD,
         level_variances: Optional[VarianceSource] = None, workers: int = 1,
         pilot_cost_cap: Optional[float] = None) -> CalibrationPlan:
    """Plan the geometry and allocation for ``inp``, with predicted cost and error.

    Level variances come from ``level_variances`` (a sequence or a callable of
    the geometry and weights) or from a pilot run of ``inp.pilot_N`` samples per
    level on ``model`` with stream ``key``.  Variances are of the unweighted
    level summand; ML2R weights are applied here.
    """
    mode = CouplingMode(mode)
    if inp.family == "crude":
        geometry = LevelGeometry(crude_inner_count(inp), inp.M, 1)
        bias = abs(inp.c1) * geometry.h**inp.alpha
        weights = None
    else:
        R, bias, weights = choose_depth(inp)
        geometry = LevelGeometry(inp.K0, inp.M, R)

    if level_variances is not None:
        raw = level_variances(geometry, weights) if callable(level_variances) else level_variances
        var = [float(v) for v in raw][: geometry.R]
        if len(var) < geometry.R:
            raise ValueError(f"need {geometry.R} level variances, got {len(var)}")
    elif model is not None and key is not None:
        if inp.pilot_N < 2:
            raise ValueError("pilot sample size must be at least 2")
        pilot_geometry = geometry
        pilot_cost = inp.pilot_N * sum(level_cost(geometry, j) for j in range(1, geometry.R + 1))
        if pilot_cost_cap is not None and pilot_cost > pilot_cost_cap:
            if inp.family != "crude":
                raise ValueError(f"pilot cost {pilot_cost:.3g} exceeds the cap {pilot_cost_cap:.3g}")
            K = max(1, int(pilot_cost_cap // (inp.pilot_N * inp.K0))) * inp.K0
            pilot_geometry = LevelGeometry(K, inp.M, 1)
        stats = run_levels(model, pilot_geometry, [inp.pilot_N] * geometry.R, mode, key, workers)
        var = [v for _, _, v in stats]
    else:
        raise ValueError("level variances unavailable: run a pilot (pass model and key) "
                         "or supply level_variances")

    W = [1.0] * geometry.R if weights is None else [1.0] + list(weights.W[1:])
    V = np.array([w * w * v for w, v in zip(W, var)])
    c = np.array([level_cost(geometry, j) for j in range(1, geometry.R + 1)])
    if np.max(V) <= 0:
        q = np.full(geometry.R, 1.0 / geometry.R)
        N = 2
    else:
        V_eff = np.maximum(V, 1e-12 * np.max(V))
        root = np.sqrt(V_eff / c)
        q = root / root.sum()
        N = math.ceil(root.sum() * np.sum(np.sqrt(V_eff * c)) / (inp.epsilon**2 / 2.0))
    allocation = Allocation(max(int(N), 1), tuple(q.tolist()))
    counts = np.array(allocation.counts, dtype=float)
    stat = float(math.sqrt(np.sum(V / counts)))
    cost = float(np.sum(counts * c))
    return CalibrationPlan(
        family=inp.family, epsilon=inp.epsilon, geometry=geometry, allocation=allocation,
        mode=mode, predicted_cost=cost, predicted_bias=bias, predicted_stat_error=stat,
        level_variances=list(map(float, var)), weights=weights,
    )
