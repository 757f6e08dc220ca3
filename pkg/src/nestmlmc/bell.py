"""Partial and complete Bell polynomials and the cumulant-to-moment machinery.

The inner Monte Carlo error of a nested estimator is a mean of ``K`` i.i.d.
centred copies, so its cumulants are ``h**(j-1) * kappa_j`` with ``h = 1/K``.
Moments follow from cumulants through complete Bell polynomials, which is
what produces the power series in ``h`` of the weak error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

R_MAX_CAP = 10
_N_MAX = 20

_FACTORIAL = [float(math.factorial(i)) for i in range(_N_MAX + 1)]


def _check_order(n: int, k: int) -> None:
    if not (1 <= k <= n):
        raise ValueError(f"Bell index requires 1 <= k <= n, got n={n}, k={k}")
    if n > _N_MAX:
        raise ValueError(f"Bell order n={n} exceeds supported maximum {_N_MAX}")


def _multiplicities(n: int, k: int) -> Iterator[tuple[int, ...]]:
    """Yield (l_1, ..., l_{n-k+1}) with sum l_i = k and sum i*l_i = n."""
    width = n - k + 1
    ell = [0] * width

    def dfs(i: int, parts_left: int, weight_left: int) -> Iterator[tuple[int, ...]]:
        # i is 1-based part size; try the largest sizes first
        if parts_left == 0:
            if weight_left == 0:
                yield tuple(ell)
            return
        if i == 0:
            return
        # every remaining part has size >= 1 and <= i
        if weight_left < parts_left or weight_left > parts_left * i:
            return
        max_count = min(parts_left, weight_left // i)
        for c in range(max_count, -1, -1):
            ell[i - 1] = c
            yield from dfs(i - 1, parts_left - c, weight_left - c * i)
        ell[i - 1] = 0

    yield from dfs(width, k, n)


def partial_bell(n: int, k: int, x: Sequence[float]) -> float:
    """Evaluate the partial Bell polynomial ``B_{n,k}(x_1, ..., x_{n-k+1})``."""
    _check_order(n, k)
    if len(x) != n - k + 1:
        raise ValueError(
            f"B_{{{n},{k}}} takes {n - k + 1} arguments, got {len(x)}"
        )
    scaled = [float(x[i]) / _FACTORIAL[i + 1] for i in range(len(x))]
    total = 0.0
    for ell in _multiplicities(n, k):
        term = _FACTORIAL[n]
        for i, li in enumerate(ell):
            if li:
                term *= scaled[i] ** li / _FACTORIAL[li]
        total += term
    return total


def complete_bell(n: int, x: Sequence[float]) -> float:
    """Evaluate the complete Bell polynomial ``B_n(x_1, ..., x_n)``."""
    if n < 1:
        raise ValueError(f"complete Bell order must be positive, got {n}")
    if len(x) != n:
        raise ValueError(f"B_{n} takes {n} arguments, got {len(x)}")
    return sum(partial_bell(n, k, x[: n - k + 1]) for k in range(1, n + 1))


def moments_from_cumulants(kappa: Sequence[float], n: int) -> list[float]:
    """Raw moments ``E[xi^1], ..., E[xi^n]`` from cumulants ``kappa_1, ...``."""
    if n < 1:
        raise ValueError(f"number of moments must be positive, got {n}")
    if len(kappa) < n:
        raise ValueError(f"{n} moments need {n} cumulants, got {len(kappa)}")
    return [complete_bell(j, kappa[:j]) for j in range(1, n + 1)]


@dataclass(frozen=True)
class BellCoefficientTable:
    """Values ``b_{r,j}`` for ``1 <= j <= r <= r_max`` at fixed cumulants."""

    r_max: int
    entries: dict[tuple[int, int], float]

    def __getitem__(self, rj: tuple[int, int]) -> float:
        return self.entries[rj]

    def row(self, r: int) -> list[float]:
        return [self.entries[(r, j)] for j in range(1, r + 1)]


def _b_value(kappa: Sequence[float], r: int, j: int) -> float:
    # b_{r,j} = B_{r,j}(kappa_2/2, ..., kappa_{r-j+2}/(r-j+2)); kappa is 0-based
    args = [kappa[i - 1] / i for i in range(2, r - j + 3)]
    return partial_bell(r, j, args)


def b_coefficients(kappa: Sequence[float], r_max: int) -> BellCoefficientTable:
    """Table of the coefficients ``b_{r,j}`` feeding the weak-error expansion.

    ``kappa`` is the full cumulant vector ``(kappa_1, kappa_2, ...)``; entries
    up to ``kappa_{r_max+1}`` are required.
    """
    if not (1 <= r_max <= R_MAX_CAP):
        raise ValueError(f"r_max must lie in [1, {R_MAX_CAP}], got {r_max}")
    if len(kappa) < r_max + 1:
        raise ValueError(
            f"r_max={r_max} needs cumulants up to order {r_max + 1}, got {len(kappa)}"
        )
    entries = {
        (r, j): _b_value(kappa, r, j)
        for r in range(1, r_max + 1)
        for j in range(1, r + 1)
    }
    return BellCoefficientTable(r_max=r_max, entries=entries)


def centered_mean_moment(kappa: Sequence[float], n: int, h: float) -> float:
    """n-th moment of the mean of ``K = 1/h`` i.i.d. centred copies.

    Uses the Bell-coefficient form
    ``h^n * sum_{k=1}^{ceil(n/2)} h^{-k} n!/(n-k)! b_{n-k,k}``.
    Terms with ``k > n - k`` vanish.
    """
    if n < 1:
        raise ValueError(f"moment order must be positive, got {n}")
    if not (0.0 < h <= 1.0):
        raise ValueError(f"h must lie in (0, 1], got {h}")
    K = 1.0 / h
    if abs(K - round(K)) > 1e-9 * K:
        raise ValueError(f"1/h must be an integer, got 1/h={K}")
    if len(kappa) < n:
        raise ValueError(f"order {n} needs {n} cumulants, got {len(kappa)}")
    if not math.isclose(float(kappa[0]), 0.0, abs_tol=1e-14):
        raise ValueError(f"cumulants must be centred (kappa_1 = 0), got {kappa[0]}")
    total = 0.0
    for k in range(1, (n + 1) // 2 + 1):
        r = n - k
        if r < k:
            continue
        total += h ** (n - k) * _FACTORIAL[n] / _FACTORIAL[r] * _b_value(kappa, r, k)
    return total
