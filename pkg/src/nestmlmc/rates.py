"""Weak and strong error rates, plus the explicit bounds that control them.

Conventions: the weak error is ``E[Y_h] - E[Y_0] ~ c_1 h**alpha``; the strong
error is ``E[(level difference)**2] ~ V_1 h**beta``, so a Lipschitz payoff with
the standard coupling has ``beta = 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .estimator import (CouplingMode, LevelGeometry, estimate_crude, estimate_ml2r,
                        Allocation, level_difference_block)
from .model import NestedModel, StreamKey, inner_sums
from .weights import WeightSpec, solve_weights

CSV_COLUMNS = ("h", "value", "stderr", "fit_lo", "fit_hi")
_Z95 = 1.959963984540054


class UnsupportedModelError(ValueError):
    """The model lacks an oracle the requested check depends on."""


# --------------------------------------------------------------------------
# explicit constants and bounds


def mz_constant(p: float) -> float:
    """Marcinkiewicz-Zygmund constant ``18 p**1.5 / sqrt(p - 1)``; ``+inf`` at the pole."""
    if not p > 1:
        raise ValueError(f"Marcinkiewicz-Zygmund constant needs p > 1, got {p}")
    if p - 1 < 1e-12:
        return math.inf
    return 18.0 * p**1.5 / math.sqrt(p - 1.0)


@dataclass(frozen=True)
class BoundValue:
    value: float
    std_error: float = 0.0
    estimated: bool = False


def residual_norm(model: NestedModel, p: float, N: int = 200_000,
                  key: Optional[StreamKey] = None) -> BoundValue:
    """``||Xi - E[Xi|Y]||_p`` from the oracle, or a Monte Carlo estimate.

    The estimate uses the conditional-mean oracle when present; otherwise only
    ``p = 2`` is supported, through ``E[(F(Y,Z1) - F(Y,Z2))^2] / 2``.
    """
    if model.oracles.residual_norm is not None:
        val = model.oracles.residual_norm(p)
        if val is not None:
            return BoundValue(float(val))
    key = key or StreamKey(0, (7,))
    y = np.asarray(model.outer_sampler(key.child(0).generator(), N))
    rng = key.child(1).generator()
    yb = y[:, None] if y.ndim == 1 else y[:, None, :]
    if model.oracles.conditional_mean is not None:
        z = model.inner_sampler(rng, (N, 1))
        d = np.abs(np.asarray(model.inner_fn(yb, z))[:, 0] - model.oracles.conditional_mean(y)) ** p
    elif p == 2:
        z = model.inner_sampler(rng, (N, 2))
        vals = np.asarray(model.inner_fn(yb, z))
        d = 0.5 * (vals[:, 0] - vals[:, 1]) ** 2
    else:
        raise UnsupportedModelError("residual L^p norm for p != 2 needs a conditional-mean oracle")
    m, se = float(np.mean(d)), float(np.std(d, ddof=1) / math.sqrt(N))
    val = m ** (1.0 / p)
    # delta method for m -> m**(1/p)
    return BoundValue(val, val * se / (p * m) if m > 0 else 0.0, estimated=True)


def strong_bound_xh(model: NestedModel, p: float, h: float, h_prime: float,
                    N: int = 200_000, key: Optional[StreamKey] = None) -> BoundValue:
    """Upper bound ``2 B_p ||Xi - E[Xi|Y]||_p |h - h'|**0.5`` on ``||X_h - X_h'||_p``."""
    if p > model.moment_order:
        raise ValueError(f"model only asserts Xi in L^{model.moment_order}, not L^{p}")
    norm = residual_norm(model, p, N, key)
    scale = 2.0 * mz_constant(p) * math.sqrt(abs(h - h_prime))
    return BoundValue(scale * norm.value, scale * norm.std_error, norm.estimated)


def indicator_strong_bound(p: float, sup_f0: float, sup_fh: float, delta_p: float) -> float:
    """Bound on ``||1{xi <= x} - 1{xi' <= x}||_2**2`` from density sups and ``||xi - xi'||_p``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if sup_f0 < 0 or sup_fh < 0 or delta_p < 0:
        raise ValueError("density bounds and L^p distance must be non-negative")
    e = p / (p + 1.0)
    return (p**e + p ** (1.0 / (p + 1.0))) * (sup_f0 + sup_fh) ** e * delta_p**e


@dataclass(frozen=True)
class StrongMeasurement:
    lp_distance: float
    lp_distance_se: float
    indicator_sq_l2: float
    indicator_sq_l2_se: float


def measure_strong_distance(model: NestedModel, h: float, h_prime: float, N: int,
                            key: StreamKey, p: float = 2.0,
                            threshold: Optional[float] = None) -> StrongMeasurement:
    """Monte Carlo ``||X_h - X_h'||_p`` and ``||1{X_h<=x} - 1{X_h'<=x}||_2**2``.

    Both proxies share one outer draw; the coarser one uses the first ``1/h``
    of the ``1/h'`` inner draws.  ``threshold`` defaults to the payoff threshold
    (or 0 when the payoff is not an indicator).
    """
    if h_prime > h:
        h, h_prime = h_prime, h
    K, Kp = round(1 / h), round(1 / h_prime)
    if Kp % K:
        raise ValueError("1/h' must be a multiple of 1/h")
    x = threshold if threshold is not None else (model.payoff.threshold or 0.0)
    y = np.asarray(model.outer_sampler(key.child(0).generator(), N))
    rng = key.child(1).generator()
    s1 = inner_sums(model, y, K, rng)
    s2 = s1 + (inner_sums(model, y, Kp - K, rng) if Kp > K else 0.0)
    xh, xhp = s1 / K, s2 / Kp
    d = np.abs(xh - xhp) ** p
    flips = ((xh <= x) != (xhp <= x)).astype(float)
    m = float(np.mean(d))
    se = float(np.std(d, ddof=1) / math.sqrt(N))
    lp = m ** (1 / p)
    lp_se = lp * se / (p * m) if m > 0 else 0.0
    pf = float(np.mean(flips))
    return StrongMeasurement(lp, lp_se, pf, math.sqrt(max(pf * (1 - pf), 0.0) / N))


# --------------------------------------------------------------------------
# log-log regression


@dataclass(frozen=True)
class PowerFit:
    """Fit of ``|v| = C h**slope`` by (weighted) least squares in log-log space."""

    slope: float
    log_coef: float
    sign: float
    r_squared: float
    cov: np.ndarray

    @property
    def coef(self) -> float:
        return self.sign * math.exp(self.log_coef)

    @property
    def slope_se(self) -> float:
        return math.sqrt(self.cov[1, 1])

    def predict(self, h):
        return self.sign * np.exp(self.log_coef + self.slope * np.log(h))

    def band(self, h, z: float = _Z95):
        """Pointwise ``z``-sigma band of the fitted curve."""
        x = np.log(np.asarray(h, dtype=float))
        X = np.stack([np.ones_like(x), x], axis=1)
        sd = np.sqrt(np.einsum("ij,jk,ik->i", X, self.cov, X))
        centre = self.log_coef + self.slope * x
        lo, hi = self.sign * np.exp(centre - z * sd), self.sign * np.exp(centre + z * sd)
        return np.minimum(lo, hi), np.maximum(lo, hi)


def fit_power_law(h: Sequence[float], values: Sequence[float],
                  stderr: Optional[Sequence[float]] = None) -> PowerFit:
    """Regress ``log|values|`` on ``log h``.

    With ``stderr`` the fit uses inverse-variance weights
    ``(|v| / se)**2`` (delta method on the log) and the known-variance
    covariance; without it the fit is unweighted and the covariance comes from
    the residuals.
    """
    h = np.asarray(h, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(h) < 2 or len(h) != len(v):
        raise ValueError("need at least two (h, value) pairs of equal length")
    if np.any(v == 0) or np.any(h <= 0):
        raise ValueError("power-law fit needs non-zero values and positive h")
    x, y = np.log(h), np.log(np.abs(v))
    X = np.stack([np.ones_like(x), x], axis=1)
    weighted = stderr is not None and np.all(np.asarray(stderr) > 0)
    w = (np.abs(v) / np.asarray(stderr, dtype=float)) ** 2 if weighted else np.ones_like(x)
    Xw = X * np.sqrt(w)[:, None]
    yw = y * np.sqrt(w)
    beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = y - X @ beta
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * resid**2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    xtwx_inv = np.linalg.inv(Xw.T @ Xw)
    if weighted:
        cov = xtwx_inv
    else:
        dof = max(len(x) - 2, 1)
        cov = xtwx_inv * (ss_res / dof)
    signs = np.sign(v)
    sign = 1.0 if np.sum(signs) >= 0 else -1.0
    return PowerFit(slope=float(beta[1]), log_coef=float(beta[0]), sign=sign,
                    r_squared=r2, cov=cov)


# --------------------------------------------------------------------------
# reports


@dataclass
class RateReport:
    kind: str
    grid: list[float]
    values: list[float]
    stderr: list[float]
    alpha_hat: float = math.nan
    c1_hat: float = math.nan
    beta_hat: float = math.nan
    V1_hat: float = math.nan
    r_squared: float = math.nan
    slope_se: float = math.nan
    inconclusive: bool = False
    fit_lo: list[float] = field(default_factory=list)
    fit_hi: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def per_h(self) -> list[tuple[float, float, float]]:
        return list(zip(self.grid, self.values, self.stderr))

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "alpha_hat": self.alpha_hat,
            "c1_hat": self.c1_hat,
            "beta_hat": self.beta_hat,
            "V1_hat": self.V1_hat,
            "r_squared": self.r_squared,
            "slope_se": self.slope_se,
            "inconclusive": self.inconclusive,
        }

    def to_dict(self) -> dict:
        return {**self.summary(), "notes": list(self.notes), "rows": self.rows()}

    def rows(self) -> list[dict]:
        lo = self.fit_lo or [math.nan] * len(self.grid)
        hi = self.fit_hi or [math.nan] * len(self.grid)
        return [dict(zip(CSV_COLUMNS, r)) for r in zip(self.grid, self.values, self.stderr, lo, hi)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows():
                writer.writerow([format_value(row[c]) for c in CSV_COLUMNS])

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("quantity", "value"))
            for k, v in self.summary().items():
                if k != "kind":
                    writer.writerow((k, format_value(v)))


def format_value(v) -> str:
    """Decimal text for CSV cells; floats carry 17 significant digits."""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return format(v, ".17g") if math.isfinite(v) else str(v).lower()
    return str(v)


def _check_grid(h_grid: Sequence[float], min_points: int = 4) -> np.ndarray:
    h = np.asarray(sorted(h_grid, reverse=True), dtype=float)
    if len(h) < min_points:
        raise ValueError(f"grid needs at least {min_points} points, got {len(h)}")
    if np.any(h <= 0) or np.any(np.diff(h) >= 0):
        raise ValueError("grid values must be positive and distinct")
    return h


def _apply_fit(report: RateReport, fit: PowerFit) -> None:
    lo, hi = fit.band(report.grid)
    report.fit_lo, report.fit_hi = lo.tolist(), hi.tolist()
    report.r_squared = fit.r_squared
    report.slope_se = fit.slope_se


def _paired_bias(model: NestedModel, h: float, h_ref: float, N: int, key: StreamKey):
    # f(X_h) - f(X_href) on one outer draw, X_h using the first 1/h inner draws
    K, Kr = round(1 / h), round(1 / h_ref)
    y = np.asarray(model.outer_sampler(key.child(0).generator(), N))
    rng = key.child(1).generator()
    s1 = inner_sums(model, y, K, rng)
    s2 = s1 + inner_sums(model, y, Kr - K, rng)
    d = model.payoff(s1 / K) - model.payoff(s2 / Kr)
    return float(np.mean(d)), float(np.std(d, ddof=1) / math.sqrt(N))


def weighted_mean_at(model: NestedModel, h: float, M: int, R: int, alpha: float) -> float:
    """``sum_j w_j E[f(X_{h/M**(j-1)})]`` from the analytic mean oracle."""
    wv = solve_weights(WeightSpec(alpha, M, R))
    mean_at = model.oracles.mean_payoff_at
    return float(sum(w * mean_at(h / M**j) for j, w in enumerate(wv.w)))


def fit_weak_rate(model: NestedModel, h_grid: Sequence[float], N_per_h: Optional[int] = None,
                  key: Optional[StreamKey] = None, estimator_kind: str = "crude",
                  analytic: bool = True, reference: Optional[float] = None,
                  M: int = 2, R: int = 2, alpha: float = 1.0) -> RateReport:
    """Fit ``bias(h) ~ c_1 h**alpha`` over a geometric grid.

    ``estimator_kind`` is ``"crude"`` (bias of ``f(X_h)``) or ``"ml2r"``
    (bias of the weighted combination over ``h, h/M, ..., h/M**(R-1)``).
    The analytic path uses the model's ``mean_payoff_at`` oracle; otherwise
    each grid point is estimated by simulation with ``N_per_h`` samples.
    """
    h = _check_grid(h_grid)
    ratios = h[:-1] / h[1:]
    if np.max(np.abs(ratios / ratios[0] - 1)) > 1e-9:
        raise ValueError("weak-rate grid must be geometric")
    if estimator_kind not in ("crude", "ml2r"):
        raise ValueError(f"unknown estimator kind {estimator_kind!r}")
    oracles = model.oracles
    target = reference if reference is not None else oracles.target
    notes = []
    use_analytic = analytic and oracles.mean_payoff_at is not None
    if use_analytic:
        if target is None:
            target = oracles.mean_payoff_at(0.0)
        if estimator_kind == "crude":
            means = [oracles.mean_payoff_at(hi) for hi in h]
        else:
            means = [weighted_mean_at(model, hi, M, R, alpha) for hi in h]
        bias = np.array(means) - target
        se = np.zeros_like(bias)
        notes.append("analytic bias from mean_payoff_at")
    else:
        if N_per_h is None or key is None:
            raise ValueError("Monte Carlo bias path needs N_per_h and key")
        bias, se = np.empty(len(h)), np.empty(len(h))
        if target is None:
            h_ref = h[-1] / M**2
            notes.append(f"no target oracle: paired bias against h_ref={h_ref!r}; "
                         "estimates omit the reference-level bias")
            for i, hi in enumerate(h):
                bias[i], se[i] = _paired_bias(model, hi, h_ref, N_per_h, key.child(i))
        else:
            for i, hi in enumerate(h):
                if estimator_kind == "crude":
                    res = estimate_crude(model, hi, N_per_h, key.child(i))
                else:
                    geom = LevelGeometry.from_h(hi, M, R)
                    wv = solve_weights(WeightSpec(alpha, M, R))
                    res = estimate_ml2r(model, geom, Allocation.uniform(N_per_h * R, R), wv,
                                        CouplingMode.STANDARD, key.child(i))
                bias[i], se[i] = res.value - target, res.std_error
            notes.append("Monte Carlo bias against target oracle")
    report = RateReport(kind="weak", grid=h.tolist(), values=bias.tolist(), stderr=se.tolist(),
                        notes=notes)
    noisy = (bias == 0) | (np.abs(bias) <= 2 * se)
    if np.sum(noisy) * 2 >= len(h):
        report.inconclusive = True
        report.notes.append("bias indistinguishable from zero or Monte Carlo noise on half the grid")
        return report
    keep = ~noisy
    fit = fit_power_law(h[keep], bias[keep], se[keep] if not use_analytic else None)
    report.alpha_hat, report.c1_hat = fit.slope, fit.coef
    _apply_fit(report, fit)
    return report


def fit_strong_rate(model: NestedModel, geometry: LevelGeometry, mode: CouplingMode,
                    levels_to_probe: Sequence[int], N: int, key: StreamKey,
                    n_batches: int = 20) -> RateReport:
    """Fit ``E[(level-j difference)**2] ~ V_1 h_j**beta`` over the probed levels.

    Each level's second moment is averaged over ``n_batches`` independent
    batches; the batch spread gives its standard error.
    """
    levels = sorted(set(int(j) for j in levels_to_probe))
    if len(levels) < 4:
        raise ValueError(f"strong-rate fit needs at least 4 probe levels, got {len(levels)}")
    if levels[0] < 2 or levels[-1] > geometry.R:
        raise ValueError(f"probe levels must lie in 2..{geometry.R}")
    if N < 2 * n_batches:
        raise ValueError(f"N={N} too small for {n_batches} batches")
    mode = CouplingMode(mode)
    sizes = [N // n_batches + (1 if b < N % n_batches else 0) for b in range(n_batches)]
    h, m2, se = [], [], []
    for j in levels:
        batch = np.array([
            np.mean(level_difference_block(model, geometry, j, mode, n, key.child(j, b)) ** 2)
            for b, n in enumerate(sizes)
        ])
        w = np.asarray(sizes, dtype=float)
        mean = float(np.sum(w * batch) / N)
        h.append(geometry.h_j(j))
        m2.append(mean)
        se.append(float(np.std(batch, ddof=1) / math.sqrt(n_batches)))
    h, m2, se = np.array(h), np.array(m2), np.array(se)
    report = RateReport(kind="strong", grid=h.tolist(), values=m2.tolist(), stderr=se.tolist(),
                        notes=[f"coupling={mode.value}", f"levels={levels}"])
    noisy = (m2 == 0) | (se > 0.5 * np.abs(m2))
    if np.sum(noisy) * 2 >= len(h):
        report.inconclusive = True
        report.notes.append("second-moment estimates dominated by noise on half the levels")
        return report
    keep = ~noisy
    fit = fit_power_law(h[keep], m2[keep], se[keep])
    report.beta_hat, report.V1_hat = fit.slope, abs(fit.coef)
    _apply_fit(report, fit)
    return report


# --------------------------------------------------------------------------
# expansion checks


@dataclass
class ExpansionCheck:
    """Extracted expansion coefficients and the slope of what is left over.

    For the bias expansion ``x`` is empty and ``coefficients[r-1]`` is
    ``c_r``; for the CDF check there is one row per point of ``x`` and only the
    first-order coefficient is extracted.
    """

    order: int
    coefficients: list[float]
    coefficient_errors: list[float]
    residual_slope: float | list[float]
    x: list[float] = field(default_factory=list)
    oracle_coefficients: list[float] = field(default_factory=list)

    def relative_errors(self) -> list[float]:
        return [abs(c - o) / abs(o) if o != 0 else abs(c - o)
                for c, o in zip(self.coefficients, self.oracle_coefficients)]


def richardson_coefficients(h: Sequence[float], bias: Sequence[float], M: int,
                            alpha: float, R: int) -> tuple[list[float], list[float]]:
    """Extract ``c_1..c_R`` from ``bias(h_i)`` on ``h_i = h_0 / M**i`` by sequential elimination.

    For each order ``r`` the known terms are removed, the remainder is divided
    by ``h**(alpha r)`` and a Richardson tableau removes the higher powers.
    The error estimate is the change between the last two tableau columns.
    """
    h = np.asarray(h, dtype=float)
    b = np.asarray(bias, dtype=float).copy()
    if len(h) < R + 1:
        raise ValueError(f"need at least R+1={R + 1} grid points, got {len(h)}")
    coefs, errs = [], []
    for r in range(1, R + 1):
        col = b / h ** (alpha * r)
        diag = [float(col[0])]
        for m in range(1, len(h)):
            fac = float(M) ** (m * alpha)
            col = (fac * col[1:] - col[:-1]) / (fac - 1.0)
            diag.append(float(col[0]))
        coefs.append(diag[-1])
        errs.append(abs(diag[-1] - diag[-2]))
        b = b - diag[-1] * h ** (alpha * r)
    return coefs, errs


def expansion_check(model: NestedModel, h: float, M: int, R: int, alpha: float = 1.0,
                    n_points: Optional[int] = None) -> ExpansionCheck:
    """Coefficients ``c_1..c_R`` of the bias expansion from the analytic means."""
    if model.oracles.mean_payoff_at is None:
        raise UnsupportedModelError("expansion check needs the mean_payoff_at oracle")
    n_points = n_points or R + 3
    grid = h / float(M) ** np.arange(n_points)
    target = model.oracles.mean_payoff_at(0.0)
    bias = np.array([model.oracles.mean_payoff_at(g) for g in grid]) - target
    coefs, errs = richardson_coefficients(grid, bias, M, alpha, R)
    rest = bias - sum(c * grid ** (alpha * (r + 1)) for r, c in enumerate(coefs))
    slope = _residual_slope(grid, rest)
    return ExpansionCheck(order=R, coefficients=coefs, coefficient_errors=errs,
                          residual_slope=slope)


def _residual_slope(h: np.ndarray, rest: np.ndarray) -> float:
    ok = np.abs(rest) > 1e-300
    if np.sum(ok) < 2 or np.max(np.abs(rest)) < 1e-14:
        return math.nan
    return fit_power_law(h[ok], rest[ok]).slope


def cdf_expansion_check(model: NestedModel, x_grid: Sequence[float],
                        h_grid: Sequence[float]) -> ExpansionCheck:
    """First-order CDF expansion ``F_{X_h}(x) = F_{X_0}(x) + h E[P_1(X_0) 1{X_0 <= x}] + ...``.

    Per ``x`` the coefficient of ``h`` is extracted from the exact CDFs by a
    linear fit of ``(F_h - F_0)/h`` in ``h``, and compared with the integral of
    ``P_1`` against the density of ``X_0`` computed by quadrature.  The
    residual slope is that of ``F_h - F_0 - h E[P_1 1{X_0 <= x}]`` in ``h``.
    """
    o = model.oracles
    if o.cdf_xh is None or o.density_x0 is None or o.P1 is None:
        raise UnsupportedModelError("CDF expansion check needs cdf_xh, density_x0 and P1 oracles")
    h = _check_grid(h_grid, min_points=3)
    c_hat, c_err, c_orc, slopes = [], [], [], []
    for x in x_grid:
        F0 = float(o.cdf_xh(x, 0.0))
        Fh = np.array([float(o.cdf_xh(x, hi)) for hi in h])
        integral, _ = integrate.quad(lambda u: float(o.P1(u) * o.density_x0(u)), -np.inf, x,
                                     epsabs=1e-14, epsrel=1e-12, limit=200)
        d1 = (Fh - F0) / h
        A = np.stack([np.ones_like(h), h], axis=1)
        coef, *_ = np.linalg.lstsq(A, d1, rcond=None)
        c_hat.append(float(coef[0]))
        resid = d1 - A @ coef
        c_err.append(float(np.sqrt(np.sum(resid**2) / max(len(h) - 2, 1))))
        c_orc.append(float(integral))
        slopes.append(_residual_slope(h, Fh - F0 - h * integral))
    return ExpansionCheck(order=1, coefficients=c_hat, coefficient_errors=c_err,
                          residual_slope=slopes, x=list(map(float, x_grid)),
                          oracle_coefficients=c_orc)
