"""Nested Monte Carlo estimators, plain and multilevel.

Replicates of each level are split into fixed-size blocks.  Block ``b`` of
level ``j`` draws its outer samples from ``key.child(j, b, 0)`` and its inner
samples from ``key.child(j, b, 1)``; per-block moments are merged in block
order.  Results therefore do not depend on the number of workers.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .model import EvaluationError, NestedModel, PayoffKind, StreamKey, inner_sums
from .weights import WeightVector

log = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 4096
MIN_LEVEL_SAMPLES = 2


class CouplingMode(str, Enum):
    STANDARD = "standard"
    ANTITHETIC = "antithetic"


@dataclass(frozen=True)
class LevelGeometry:
    """Levels ``h_j = h / M**(j-1)`` with ``h = 1/K0``, i.e. ``K_j = K0 * M**(j-1)``."""

    K0: int
    M: int
    R: int

    def __post_init__(self):
        for name in ("K0", "M", "R"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
        if self.K0 < 1 or self.M < 2 or self.R < 1:
            raise ValueError(f"invalid geometry K0={self.K0}, M={self.M}, R={self.R}")

    @classmethod
    def from_h(cls, h: float, M: int, R: int) -> "LevelGeometry":
        K0 = round(1.0 / h)
        if K0 < 1 or abs(K0 * h - 1.0) > 1e-12:
            raise ValueError(f"1/h must be a positive integer, got h={h}")
        return cls(K0, M, R)

    @property
    def h(self) -> float:
        return 1.0 / self.K0

    def K(self, j: int) -> int:
        if not (1 <= j <= self.R):
            raise ValueError(f"level {j} outside 1..{self.R}")
        return self.K0 * self.M ** (j - 1)

    def h_j(self, j: int) -> float:
        return 1.0 / self.K(j)

    def to_dict(self) -> dict:
        return {"K0": self.K0, "M": self.M, "R": self.R}


@dataclass(frozen=True)
class Allocation:
    """Level sample sizes ``N_j = ceil(q_j N)``, never below two."""

    N: int
    q: tuple[float, ...]

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be positive, got {self.N}")
        if any(qj <= 0 for qj in self.q):
            raise ValueError("allocation fractions must be positive")
        if abs(sum(self.q) - 1.0) > 1e-9:
            raise ValueError(f"allocation fractions must sum to 1, got {sum(self.q)}")

    @classmethod
    def uniform(cls, N: int, R: int) -> "Allocation":
        return cls(N, tuple([1.0 / R] * R))

    @property
    def counts(self) -> list[int]:
        return [max(MIN_LEVEL_SAMPLES, math.ceil(qj * self.N)) for qj in self.q]

    def to_dict(self) -> dict:
        return {"N": self.N, "q": list(self.q)}


@dataclass(frozen=True)
class LevelStats:
    j: int
    h_j: float
    mean: float
    var: float
    n: int
    cost: float
    evaluations: int
    weight: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EstimateResult:
    family: str
    value: float
    std_error: float
    total_cost: float
    total_evaluations: int
    levels: list[LevelStats]
    geometry: LevelGeometry
    allocation: Allocation
    mode: CouplingMode
    seed: int
    weights: Optional[WeightVector] = None
    path: tuple[int, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "value": self.value,
            "std_error": self.std_error,
            "total_cost": self.total_cost,
            "total_evaluations": self.total_evaluations,
            "geometry": self.geometry.to_dict(),
            "allocation": self.allocation.to_dict(),
            "coupling": self.mode.value,
            "seed": self.seed,
            "stream_path": list(self.path),
            "weights": None if self.weights is None else self.weights.to_dict(),
            "levels": [lv.to_dict() for lv in self.levels],
        }


def level_cost(geometry: LevelGeometry, j: int) -> float:
    """Cost of one level-``j`` summand in units of inner evaluations (``kappa = 1``)."""
    if j == 1:
        return float(geometry.K(1))
    return float(geometry.K(j) + geometry.K(j - 1))


def _payoff(model: NestedModel, x: np.ndarray) -> np.ndarray:
    out = model.payoff(x)
    if not np.all(np.isfinite(out)):
        i = int(np.argmax(~np.isfinite(out)))
        raise EvaluationError(f"payoff returned {out[i]} at x={x[i]}")
    return out


def level_difference_block(model: NestedModel, geometry: LevelGeometry, j: int,
                           mode: CouplingMode, n: int, key: StreamKey) -> np.ndarray:
    """``n`` i.i.d. draws of the level-``j`` summand from the stream at ``key``.

    Level 1 is ``f(X_{h_1})``.  For ``j >= 2`` the ``K_j`` inner draws are
    generated as ``M`` consecutive groups of ``K_{j-1}``; the standard coupling
    uses the first group for the coarse term, the antithetic one averages the
    payoff over all groups.
    """
    mode = CouplingMode(mode)
    y = np.asarray(model.outer_sampler(key.child(0).generator(), n))
    rng_inner = key.child(1).generator()
    if j == 1:
        K = geometry.K(1)
        return _payoff(model, inner_sums(model, y, K, rng_inner) / K)
    Kf, Kc, M = geometry.K(j), geometry.K(j - 1), geometry.M
    groups = [inner_sums(model, y, Kc, rng_inner) for _ in range(M)]
    fine = _payoff(model, np.sum(groups, axis=0) / Kf)
    if mode == CouplingMode.STANDARD:
        return fine - _payoff(model, groups[0] / Kc)
    coarse = np.mean([_payoff(model, g / Kc) for g in groups], axis=0)
    return fine - coarse


def level_difference_sample(model: NestedModel, geometry: LevelGeometry, j: int,
                            mode: CouplingMode, key: StreamKey) -> float:
    if not (2 <= j <= geometry.R):
        raise ValueError(f"level difference needs 2 <= j <= R, got j={j}")
    return float(level_difference_block(model, geometry, j, mode, 1, key)[0])


def _block_moments(args):
    model, geometry, j, mode, n, key = args
    x = level_difference_block(model, geometry, j, mode, n, key)
    mean = float(np.mean(x))
    return n, mean, float(np.sum((x - mean) ** 2))


def _merge(a, b):
    # Chan et al. pairwise update of (count, mean, M2)
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    d = mb - ma
    return n, ma + d * nb / n, sa + sb + d * d * na * nb / n


def run_levels(model: NestedModel, geometry: LevelGeometry, counts: Sequence[int],
               mode: CouplingMode, key: StreamKey, workers: int = 1,
               block_size: int = DEFAULT_BLOCK_SIZE, levels: Optional[Sequence[int]] = None):
    """Sample mean and variance of each level summand, schedule-independent.

    ``counts[i]`` samples are drawn for level ``levels[i]`` (default ``1..R``).
    Returns a list of ``(n, mean, var)``.
    """
    levels = list(range(1, geometry.R + 1)) if levels is None else list(levels)
    tasks, owner = [], []
    for li, (j, Nj) in enumerate(zip(levels, counts)):
        for b, start in enumerate(range(0, Nj, block_size)):
            n = min(block_size, Nj - start)
            tasks.append((model, geometry, j, mode, n, key.child(j, b)))
            owner.append(li)
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partial = list(pool.map(_block_moments, tasks))
    else:
        partial = [_block_moments(t) for t in tasks]
    acc: list = [None] * len(levels)
    for li, mom in zip(owner, partial):
        acc[li] = mom if acc[li] is None else _merge(acc[li], mom)
    out = []
    for j, (n, mean, m2) in zip(levels, acc):
        var = m2 / (n - 1) if n > 1 else 0.0
        log.info("level %d: n=%d mean=%.6g var=%.6g", j, n, mean, var)
        out.append((n, mean, var))
    return out


def _check_mode(model: NestedModel, mode: CouplingMode) -> CouplingMode:
    mode = CouplingMode(mode)
    if mode == CouplingMode.ANTITHETIC and model.payoff.kind == PayoffKind.INDICATOR:
        warnings.warn(
            "antithetic coupling with an indicator payoff: the improved strong rate "
            "requires a Hölder-continuous payoff derivative",
            UserWarning, stacklevel=3,
        )
    return mode


def _estimate(family, model, geometry, allocation, mode, key, W, weights, workers, block_size):
    if len(allocation.q) != geometry.R:
        raise ValueError(f"allocation has {len(allocation.q)} levels, geometry has R={geometry.R}")
    mode = _check_mode(model, mode)
    counts = allocation.counts
    stats = run_levels(model, geometry, counts, mode, key, workers, block_size)
    levels = []
    value = 0.0
    var_of_mean = 0.0
    for j, ((n, mean, var), Wj) in enumerate(zip(stats, W), start=1):
        levels.append(LevelStats(
            j=j, h_j=geometry.h_j(j), mean=mean, var=var, n=n,
            cost=n * level_cost(geometry, j), evaluations=n * geometry.K(j), weight=Wj,
        ))
        value += Wj * mean
        var_of_mean += Wj * Wj * var / n
    if not math.isfinite(value):
        raise EvaluationError(f"non-finite estimate {value}")
    return EstimateResult(
        family=family, value=value, std_error=math.sqrt(var_of_mean),
        total_cost=sum(lv.cost for lv in levels),
        total_evaluations=sum(lv.evaluations for lv in levels),
        levels=levels, geometry=geometry, allocation=allocation, mode=mode,
        seed=key.seed, weights=weights, path=key.path,
    )


def estimate_crude(model: NestedModel, h: float, N: int, key: StreamKey,
                   workers: int = 1, block_size: int = DEFAULT_BLOCK_SIZE) -> EstimateResult:
    """Plain nested Monte Carlo: the mean of ``N`` i.i.d. copies of ``f(X_h)``."""
    if N < 2:
        raise ValueError(f"crude estimator needs N >= 2, got {N}")
    geometry = LevelGeometry.from_h(h, 2, 1)
    return _estimate("crude", model, geometry, Allocation(N, (1.0,)),
                     CouplingMode.STANDARD, key, [1.0], None, workers, block_size)


def estimate_mlmc(model: NestedModel, geometry: LevelGeometry, allocation: Allocation,
                  mode: CouplingMode, key: StreamKey, workers: int = 1,
                  block_size: int = DEFAULT_BLOCK_SIZE) -> EstimateResult:
    return _estimate("mlmc", model, geometry, allocation, mode, key,
                     [1.0] * geometry.R, None, workers, block_size)


def estimate_ml2r(model: NestedModel, geometry: LevelGeometry, allocation: Allocation,
                  weights: WeightVector, mode: CouplingMode, key: StreamKey,
                  workers: int = 1, block_size: int = DEFAULT_BLOCK_SIZE) -> EstimateResult:
    """Weighted multilevel estimator: level ``j`` averages are scaled by ``W_j``."""
    if weights.spec.M != geometry.M or weights.spec.R != geometry.R:
        raise ValueError(
            f"weights solved for M={weights.spec.M}, R={weights.spec.R} "
            f"but geometry has M={geometry.M}, R={geometry.R}"
        )
    # W_1 equals 1 up to round-off; pin it so ML2R with R=1 matches MLMC exactly
    W = [1.0] + list(weights.W[1:])
    return _estimate("ml2r", model, geometry, allocation, mode, key,
                     W, weights, workers, block_size)
