"""Richardson-Romberg weights for the weighted multilevel (ML2R) estimator.

The weights solve the Vandermonde system

    sum_j w_j             = 1
    sum_j w_j x_j**r      = 0,   r = 1, ..., R-1

on the nodes ``x_j = M**(-(j-1)*alpha)``.  Its solution is the value at zero
of the Lagrange basis polynomials on these nodes, which gives the product
formula ``w_j = prod_{i != j} x_i / (x_i - x_j)`` without forming or
factorising the (badly conditioned) matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

R_MAX = 12
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class WeightSpec:
    alpha: float
    M: int
    R: int

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"M must be an integer >= 2, got {self.M}")
        if int(self.R) != self.R or self.R < 1:
            raise ValueError(f"R must be an integer >= 1, got {self.R}")

    def nodes(self) -> np.ndarray:
        """``n_j**(-alpha)`` with ``n_j = M**(j-1)``."""
        return float(self.M) ** (-self.alpha * np.arange(self.R, dtype=float))


@dataclass(frozen=True)
class WeightVector:
    spec: WeightSpec
    w: tuple[float, ...]
    W: tuple[float, ...]
    w_tilde: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.spec.alpha,
            "M": self.spec.M,
            "R": self.spec.R,
            "w": list(self.w),
            "W": list(self.W),
            "w_tilde": self.w_tilde,
        }


def vandermonde_residuals(w, spec: WeightSpec) -> np.ndarray:
    """Residuals of the R conditions; entry 0 is ``sum w - 1``."""
    x = spec.nodes()
    w = np.asarray(w, dtype=float)
    res = np.array([np.sum(w * x**r) for r in range(spec.R)])
    res[0] -= 1.0
    return res


def residual_bias_factor(wv: WeightVector, spec: WeightSpec) -> float:
    """``sum_i w_i n_i**(-alpha*R)``, the factor in front of ``c_R h**(alpha R)``."""
    if len(wv.w) != spec.R:
        raise ValueError(f"weight vector has {len(wv.w)} entries, spec has R={spec.R}")
    x = spec.nodes()
    return float(np.sum(np.asarray(wv.w) * x**spec.R))


def solve_weights(spec: WeightSpec) -> WeightVector:
    if spec.R > R_MAX:
        raise ValueError(f"depth R={spec.R} refused: conditioning degrades beyond R={R_MAX}")
    x = spec.nodes()
    R = spec.R
    w = np.empty(R)
    for j in range(R):
        others = np.delete(x, j)
        w[j] = np.prod(others / (others - x[j]))
    res = vandermonde_residuals(w, spec)
    if np.max(np.abs(res)) > RESIDUAL_TOL:
        raise ArithmeticError(
            f"weight residual {np.max(np.abs(res)):.3e} exceeds {RESIDUAL_TOL} for {spec}"
        )
    W = np.cumsum(w[::-1])[::-1]
    wv = WeightVector(spec=spec, w=tuple(w.tolist()), W=tuple(W.tolist()), w_tilde=0.0)
    w_tilde = residual_bias_factor(wv, spec)
    return WeightVector(spec=spec, w=wv.w, W=wv.W, w_tilde=w_tilde)
