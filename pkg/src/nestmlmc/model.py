"""Nested-expectation problems ``E[f(E[F(Y, Z) | Y])]`` and their samplers.

A :class:`NestedModel` bundles vectorised samplers for the outer law ``Y`` and
the inner law ``Z``, the inner function ``F`` and a payoff ``f``.  Randomness
is drawn from counter-based Philox streams addressed by a :class:`StreamKey`,
so a given key always yields the same numbers whatever the worker layout.

Sampler conventions:

* ``outer_sampler(rng, n)`` returns an array of shape ``(n,)`` or ``(n, d)``.
* ``inner_sampler(rng, (n, k))`` returns shape ``(n, k)`` or ``(n, k, q)``.
* ``inner_fn(y, z)`` receives ``y`` with a broadcast axis inserted at
  position 1 (``(n, 1)`` or ``(n, 1, d)``) and returns shape ``(n, k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special, stats

# inner draws materialised per chunk, in doubles
_CHUNK_ELEMS = 1 << 21


class EvaluationError(RuntimeError):
    """Non-finite value produced by the inner function or the payoff."""

    def __init__(self, message: str, y=None, k=None):
        super().__init__(message)
        self.y = y
        self.k = k


@dataclass(frozen=True)
class StreamKey:
    """Address of an independent random stream: a seed plus an index path."""

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(int(p) < 0 for p in self.path):
            raise ValueError(f"stream path entries must be non-negative, got {self.path}")

    def child(self, *indices: int) -> "StreamKey":
        return StreamKey(self.seed, tuple(self.path) + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=tuple(self.path))
        return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# payoffs


class PayoffKind(str, Enum):
    SMOOTH = "smooth"
    LIPSCHITZ = "lipschitz"
    HOLDER_DERIVATIVE = "holder_derivative"
    INDICATOR = "indicator"


@dataclass(frozen=True)
class Payoff:
    """Payoff ``f`` with the regularity metadata the error analysis needs.

    ``name`` and ``params`` identify the payoff for config round-trips and
    for the analytic oracles of the built-in models.
    """

    kind: PayoffKind
    name: str
    params: dict = field(default_factory=dict)
    scale: float = 1.0
    lip_const: Optional[float] = None
    holder_const: Optional[float] = None
    rho: Optional[float] = None

    def __post_init__(self):
        if self.kind == PayoffKind.LIPSCHITZ and self.lip_const is None:
            raise ValueError("Lipschitz payoff requires lip_const")
        if self.kind == PayoffKind.HOLDER_DERIVATIVE:
            if self.rho is None or not (0 < self.rho <= 1):
                raise ValueError(f"Hölder exponent must lie in (0, 1], got {self.rho}")
        if self.kind == PayoffKind.INDICATOR:
            if self.params.get("direction") not in ("<=", ">="):
                raise ValueError("indicator direction must be '<=' or '>='")
            if self.scale != 1.0:
                raise ValueError("indicator payoffs take values in {0, 1}; scaling is not allowed")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        name, p = self.name, self.params
        if name == "square":
            out = x * x
        elif name == "affine":
            out = p["a"] * x + p["b"]
        elif name == "positive_part":
            out = np.maximum(x - p.get("strike", 0.0), 0.0)
        elif name == "constant":
            out = np.full_like(x, p["c"])
        elif name == "indicator":
            if p["direction"] == "<=":
                out = (x <= p["threshold"]).astype(float)
            else:
                out = (x >= p["threshold"]).astype(float)
        else:
            raise ValueError(f"unknown payoff {name!r}")
        if self.scale != 1.0:
            out = self.scale * out
        return out

    @property
    def threshold(self) -> Optional[float]:
        return self.params.get("threshold")

    @property
    def direction(self) -> Optional[str]:
        return self.params.get("direction")

    def scaled(self, c: float) -> "Payoff":
        if c <= 0:
            raise ValueError("payoff scale must be positive")
        lip = None if self.lip_const is None else self.lip_const * c
        hc = None if self.holder_const is None else self.holder_const * c
        return replace(self, scale=self.scale * c, lip_const=lip, holder_const=hc)

    def to_config(self) -> dict:
        cfg = {"kind": self.name, **self.params}
        if self.scale != 1.0:
            cfg["scale"] = self.scale
        return cfg

    # factories

    @classmethod
    def square(cls) -> "Payoff":
        # f' = 2x is Lipschitz, i.e. 1-Hölder
        return cls(PayoffKind.HOLDER_DERIVATIVE, "square", rho=1.0, holder_const=2.0)

    @classmethod
    def affine(cls, a: float = 1.0, b: float = 0.0) -> "Payoff":
        return cls(PayoffKind.HOLDER_DERIVATIVE, "affine", {"a": float(a), "b": float(b)},
                   rho=1.0, holder_const=0.0, lip_const=abs(float(a)))

    @classmethod
    def constant(cls, c: float) -> "Payoff":
        return cls(PayoffKind.SMOOTH, "constant", {"c": float(c)}, lip_const=0.0)

    @classmethod
    def positive_part(cls, strike: float = 0.0) -> "Payoff":
        return cls(PayoffKind.LIPSCHITZ, "positive_part", {"strike": float(strike)}, lip_const=1.0)

    @classmethod
    def indicator(cls, threshold: float, direction: str = "<=") -> "Payoff":
        return cls(PayoffKind.INDICATOR, "indicator",
                   {"threshold": float(threshold), "direction": direction})

    @classmethod
    def from_config(cls, cfg: dict) -> "Payoff":
        cfg = dict(cfg)
        kind = cfg.pop("kind", None)
        scale = float(cfg.pop("scale", 1.0))
        if kind == "square":
            p = cls.square()
        elif kind == "affine":
            p = cls.affine(cfg.pop("a", 1.0), cfg.pop("b", 0.0))
        elif kind == "constant":
            p = cls.constant(cfg.pop("c"))
        elif kind == "positive_part":
            p = cls.positive_part(cfg.pop("strike", 0.0))
        elif kind == "indicator":
            p = cls.indicator(cfg.pop("threshold"), cfg.pop("direction", "<="))
        else:
            raise ValueError(f"unknown payoff kind {kind!r}")
        if cfg:
            raise ValueError(f"unexpected payoff fields {sorted(cfg)}")
        return p.scaled(scale) if scale != 1.0 else p


# --------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class AnalyticOracles:
    """Closed forms attached to a model; every field is optional.

    ``mean_payoff_at(h)`` is ``E[f(X_h)]``; ``target`` is ``E[f(X_0)]``.
    ``residual_norm(p)`` is ``||Xi - E[Xi|Y]||_p``.  ``density_sup(h)`` bounds
    the density of ``X_h`` (``h = 0`` for ``X_0``).
    """

    target: Optional[float] = None
    mean_payoff_at: Optional[Callable[[float], float]] = None
    conditional_mean: Optional[Callable] = None
    conditional_variance: Optional[Callable] = None
    residual_norm: Optional[Callable[[float], Optional[float]]] = None
    density_x0: Optional[Callable] = None
    cdf_xh: Optional[Callable[[float, float], float]] = None
    density_sup: Optional[Callable[[float], float]] = None
    P1: Optional[Callable] = None
    strong_l2: Optional[Callable[[float, float], float]] = None


@dataclass(frozen=True)
class NestedModel:
    name: str
    outer_sampler: Callable
    inner_sampler: Callable
    inner_fn: Callable
    payoff: Payoff
    oracles: AnalyticOracles = field(default_factory=AnalyticOracles)
    moment_order: float = 2.0
    params: dict = field(default_factory=dict)

    def with_payoff(self, payoff: Payoff) -> "NestedModel":
        if self.name in MODELS:
            return build_model(self.name, self.params, payoff)
        return replace(self, payoff=payoff, oracles=AnalyticOracles())

    def to_config(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


def _broadcast_y(y: np.ndarray) -> np.ndarray:
    return y[:, None] if y.ndim == 1 else y[:, None, :]


def evaluate_inner(model: NestedModel, y: np.ndarray, z: np.ndarray, k_offset: int = 0) -> np.ndarray:
    vals = np.asarray(model.inner_fn(_broadcast_y(y), z), dtype=float)
    if not np.all(np.isfinite(vals)):
        i, k = np.argwhere(~np.isfinite(vals))[0]
        raise EvaluationError(
            f"inner function returned {vals[i, k]} at y={y[i]!r}, inner index k={k_offset + k + 1}",
            y=y[i], k=k_offset + k + 1,
        )
    return vals


def inner_sums(model: NestedModel, y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Row sums of ``F(y_i, Z_k)`` over ``K`` fresh inner draws per row.

    Draws are generated in column chunks whose width depends only on
    ``(len(y), K)``, so the consumption pattern of ``rng`` is reproducible.
    """
    n = len(y)
    width = max(1, min(K, _CHUNK_ELEMS // max(n, 1)))
    total = np.zeros(n)
    done = 0
    while done < K:
        c = min(width, K - done)
        z = model.inner_sampler(rng, (n, c))
        total += evaluate_inner(model, y, z, done).sum(axis=1)
        done += c
    return total


def sample_inner_mean(model: NestedModel, y, K: int, key: StreamKey) -> float:
    """``(1/K) sum_k F(y, Z_k)`` with ``Z_1..Z_K`` read in order from ``key``'s stream."""
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    y_arr = np.asarray(y, dtype=float)
    y_arr = y_arr.reshape(1) if y_arr.ndim == 0 else y_arr.reshape(1, -1)
    return float(inner_sums(model, y_arr, int(K), key.generator())[0] / K)


def _standard_normal_inner(rng, shape):
    return rng.standard_normal(shape)


def _gaussian_abs_moment(p: float) -> float:
    """``E|G|^p`` for standard normal ``G``."""
    return 2 ** (p / 2) * special.gamma((p + 1) / 2) / math.sqrt(math.pi)


def _normal_positive_part_mean(mu: float, var: float, strike: float) -> float:
    s = math.sqrt(var)
    d = (mu - strike) / s
    return (mu - strike) * stats.norm.cdf(d) + s * stats.norm.pdf(d)


def builtin_gaussian_linear(mu_Y: float = 0.0, sigma_Y: float = 1.0, sigma: float = 1.0,
                            payoff: Optional[Payoff] = None) -> NestedModel:
    """``Y ~ N(mu_Y, sigma_Y^2)``, ``Z ~ N(0, 1)``, ``F(y, z) = y + sigma z``.

    Then ``X_0 = Y`` and ``X_h ~ N(mu_Y, sigma_Y^2 + sigma^2 h)``, which makes
    most quantities of interest available in closed form.
    """
    if not sigma_Y > 0 or not sigma > 0:
        raise ValueError("sigma_Y and sigma must be positive")
    payoff = payoff or Payoff.square()
    mu, sY, sig = float(mu_Y), float(sigma_Y), float(sigma)

    def outer(rng, n):
        return mu + sY * rng.standard_normal(n)

    def F(y, z):
        return y + sig * z

    def var_h(h):
        return sY**2 + sig**2 * h

    mean_at = _gaussian_mean_oracle(payoff, mu, var_h)

    def P1(x):
        z = (np.asarray(x, dtype=float) - mu) / sY
        return sig**2 / (2 * sY**2) * (z * z - 1.0)

    oracles = AnalyticOracles(
        target=None if mean_at is None else mean_at(0.0),
        mean_payoff_at=mean_at,
        conditional_mean=lambda y: np.asarray(y, dtype=float),
        conditional_variance=lambda y: sig**2 * np.ones_like(np.asarray(y, dtype=float)),
        residual_norm=lambda p: sig * _gaussian_abs_moment(p) ** (1.0 / p),
        density_x0=lambda x: stats.norm.pdf(x, loc=mu, scale=sY),
        cdf_xh=lambda x, h: stats.norm.cdf(x, loc=mu, scale=math.sqrt(var_h(h))),
        density_sup=lambda h: 1.0 / math.sqrt(2 * math.pi * var_h(h)),
        P1=P1,
        strong_l2=lambda h, hp: sig * math.sqrt(abs(h - hp)),
    )
    return NestedModel(
        name="gaussian_linear",
        outer_sampler=outer,
        inner_sampler=_standard_normal_inner,
        inner_fn=F,
        payoff=payoff,
        oracles=oracles,
        moment_order=math.inf,
        params={"mu_Y": mu, "sigma_Y": sY, "sigma": sig},
    )


def _gaussian_mean_oracle(payoff: Payoff, mu: float, var_h: Callable[[float], float]):
    name, p, c = payoff.name, payoff.params, payoff.scale
    if name == "square":
        return lambda h: c * (mu**2 + var_h(h))
    if name == "affine":
        return lambda h: c * (p["a"] * mu + p["b"])
    if name == "constant":
        return lambda h: c * p["c"]
    if name == "positive_part":
        return lambda h: c * _normal_positive_part_mean(mu, var_h(h), p.get("strike", 0.0))
    if name == "indicator":
        a = p["threshold"]
        if p["direction"] == "<=":
            return lambda h: float(stats.norm.cdf((a - mu) / math.sqrt(var_h(h))))
        return lambda h: float(stats.norm.sf((a - mu) / math.sqrt(var_h(h))))
    return None


# --- Black-Scholes nested loss-probability model


def bs_call_price(s, strike: float, r: float, vol: float, tau: float):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        d1 = (np.log(s / strike) + (r + 0.5 * vol**2) * tau) / (vol * math.sqrt(tau))
    d2 = d1 - vol * math.sqrt(tau)
    return s * special.ndtr(d1) - strike * math.exp(-r * tau) * special.ndtr(d2)


def _bs_call_second_moment(s, strike, r, vol, tau):
    """``E[(disc * (S_T - K)^+)^2]`` given ``S_t = s``; closed form for lognormal ``S_T``."""
    s = np.asarray(s, dtype=float)
    m = np.log(s) + (r - 0.5 * vol**2) * tau
    v = vol * math.sqrt(tau)
    lk = math.log(strike)
    e_s2 = np.exp(2 * m + 2 * v**2) * special.ndtr((m + 2 * v**2 - lk) / v)
    e_s1 = np.exp(m + 0.5 * v**2) * special.ndtr((m + v**2 - lk) / v)
    e_s0 = special.ndtr((m - lk) / v)
    return math.exp(-2 * r * tau) * (e_s2 - 2 * strike * e_s1 + strike**2 * e_s0)


def invert_call_price(q: float, strike: float, r: float, vol: float, tau: float,
                      tol: float = 1e-13) -> float:
    """Asset value ``y`` with ``C(y) = q`` by bisection on the increasing map ``C``."""
    if q <= 0:
        return 0.0
    lo, hi = 0.0, max(strike, q) + strike
    while bs_call_price(hi, strike, r, vol, tau) < q:
        hi *= 2.0
        if hi > 1e300:
            raise ArithmeticError("call price inversion did not bracket the threshold")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if bs_call_price(mid, strike, r, vol, tau) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def builtin_bs_nested(s0: float = 100.0, r: float = 0.03, vol: float = 0.2,
                      t1: float = 1.0 / 12.0, T: float = 0.5, strike: float = 100.0,
                      q: float = 5.0, payoff: Optional[Payoff] = None) -> NestedModel:
    """Loss-probability testbed: probability that a call's value at ``t1`` exceeds ``q``.

    ``Y`` is the geometric Brownian asset value at ``t1``; ``F(y, z)`` is the
    discounted call payoff at ``T`` started from ``y``; ``E[F(Y, Z) | Y]`` is
    the Black-Scholes price ``C(Y)``.
    """
    if not (0 < t1 < T) or not vol > 0:
        raise ValueError("require 0 < t1 < T and vol > 0")
    s0, r, vol, t1, T, strike, q = map(float, (s0, r, vol, t1, T, strike, q))
    tau = T - t1
    payoff = payoff or Payoff.indicator(q, ">=")
    drift1, sd1 = (r - 0.5 * vol**2) * t1, vol * math.sqrt(t1)
    drift2, sd2 = (r - 0.5 * vol**2) * tau, vol * math.sqrt(tau)
    disc = math.exp(-r * tau)

    def outer(rng, n):
        return s0 * np.exp(drift1 + sd1 * rng.standard_normal(n))

    def F(y, z):
        return disc * np.maximum(y * np.exp(drift2 + sd2 * z) - strike, 0.0)

    def phi0(y):
        return bs_call_price(y, strike, r, vol, tau)

    def cond_var(y):
        return _bs_call_second_moment(y, strike, r, vol, tau) - phi0(y) ** 2

    def residual_norm(p):
        if p != 2:
            return None
        val, _ = integrate.quad(
            lambda g: float(cond_var(s0 * math.exp(drift1 + sd1 * g))) * stats.norm.pdf(g),
            -12, 12, limit=200,
        )
        return math.sqrt(val)

    target = None
    if payoff.name == "indicator":
        try:
            a = payoff.threshold
            if math.isinf(a):
                p_ge = 0.0 if a > 0 else 1.0
            else:
                y_star = invert_call_price(a, strike, r, vol, tau)
                p_ge = 1.0 if y_star <= 0 else float(
                    stats.norm.sf((math.log(y_star / s0) - drift1) / sd1)
                )
            # C is continuous with a density, so <= is the complement of >=
            target = p_ge if payoff.direction == ">=" else 1.0 - p_ge
        except ArithmeticError:
            target = None

    oracles = AnalyticOracles(
        target=target,
        conditional_mean=phi0,
        conditional_variance=cond_var,
        residual_norm=residual_norm,
    )
    return NestedModel(
        name="bs_nested",
        outer_sampler=outer,
        inner_sampler=_standard_normal_inner,
        inner_fn=F,
        payoff=payoff,
        oracles=oracles,
        moment_order=math.inf,
        params={"s0": s0, "r": r, "vol": vol, "t1": t1, "T": T, "strike": strike, "q": q},
    )


MODELS = {
    "gaussian_linear": builtin_gaussian_linear,
    "bs_nested": builtin_bs_nested,
}


def build_model(name: str, params: Optional[dict] = None, payoff=None) -> NestedModel:
    """Build a registered model; ``payoff`` may be a :class:`Payoff` or its config dict."""
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; available: {sorted(MODELS)}")
    if isinstance(payoff, dict):
        payoff = Payoff.from_config(payoff)
    return MODELS[name](**(params or {}), payoff=payoff)
