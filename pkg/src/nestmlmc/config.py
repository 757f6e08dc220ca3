"""JSON run configurations for the command-line workflows.

Validation errors carry the line of the offending key in the source file so
the CLI can print ``path:line: message`` diagnostics.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .calibrate import FAMILIES
from .estimator import CouplingMode
from .model import MODELS, Payoff


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: Optional[int] = None):
        self.source = source
        self.line = line
        super().__init__(message)

    def diagnostic(self) -> str:
        where = self.source if self.line is None else f"{self.source}:{self.line}"
        return f"{where}: {self.args[0]}"


class _Doc:
    """Raw config dict plus the text it came from, for locating keys."""

    def __init__(self, data: dict, text: str, source: str):
        self.data = data
        self.text = text
        self.source = source

    def line_of(self, *path: str) -> Optional[int]:
        pos = 0
        found = None
        for key in path:
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(self.text, pos)
            if m is None:
                break
            pos = m.end()
            found = m.start()
        if found is None:
            return None
        return self.text.count("\n", 0, found) + 1

    def error(self, message: str, *path: str) -> ConfigError:
        # a missing top-level field is reported at the opening brace
        return ConfigError(message, self.source, self.line_of(*path) if path else 1)


def load_json(path) -> tuple[dict, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", str(path), exc.lineno) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", str(path), 1)
    # a result file embeds the fully resolved config it was produced from
    if isinstance(data.get("config"), dict):
        data = data["config"]
    return data, text


def _int(doc: _Doc, d: dict, key: str, *path: str, minimum: Optional[int] = None,
         default: Any = ...) -> Any:
    if key not in d:
        if default is ...:
            raise doc.error(f"missing required field {key!r}", *path)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise doc.error(f"{key!r} must be an integer, got {v!r}", *path, key)
    v = int(v)
    if minimum is not None and v < minimum:
        raise doc.error(f"{key!r} must be >= {minimum}, got {v}", *path, key)
    return v


def _float(doc: _Doc, d: dict, key: str, *path: str, positive: bool = False,
           default: Any = ...) -> Any:
    if key not in d or d[key] is None:
        if default is ...:
            raise doc.error(f"missing required field {key!r}", *path)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise doc.error(f"{key!r} must be a number, got {v!r}", *path, key)
    if positive and not v > 0:
        raise doc.error(f"{key!r} must be positive, got {v}", *path, key)
    return float(v)


def _choice(doc: _Doc, d: dict, key: str, choices, default: Any = ...) -> Any:
    if key not in d:
        if default is ...:
            raise doc.error(f"missing required field {key!r}")
        return default
    if d[key] not in choices:
        raise doc.error(f"{key!r} must be one of {list(choices)}, got {d[key]!r}", key)
    return d[key]


def _obj(doc: _Doc, d: dict, key: str, required: bool = True) -> Optional[dict]:
    if key not in d:
        if required:
            raise doc.error(f"missing required section {key!r}")
        return None
    if not isinstance(d[key], dict):
        raise doc.error(f"{key!r} must be a JSON object", key)
    return d[key]


@dataclass
class ModelSpec:
    name: str
    params: dict
    payoff: Optional[dict]

    def to_dict(self) -> dict:
        return {"model": {"name": self.name, "params": dict(self.params)},
                "payoff": None if self.payoff is None else dict(self.payoff)}


def _model_spec(doc: _Doc) -> ModelSpec:
    m = _obj(doc, doc.data, "model")
    name = m.get("name")
    if name not in MODELS:
        raise doc.error(f"unknown model {name!r}; available: {sorted(MODELS)}", "model", "name")
    params = m.get("params", {})
    if not isinstance(params, dict):
        raise doc.error("model params must be a JSON object", "model", "params")
    payoff = _obj(doc, doc.data, "payoff", required=False)
    if payoff is not None:
        try:
            Payoff.from_config(payoff)
        except (ValueError, KeyError, TypeError) as exc:
            raise doc.error(f"invalid payoff: {exc}", "payoff") from None
    try:
        from .model import build_model
        build_model(name, params, payoff)
    except TypeError as exc:
        raise doc.error(f"invalid model parameters: {exc}", "model", "params") from None
    except ValueError as exc:
        raise doc.error(f"invalid model: {exc}", "model") from None
    return ModelSpec(name, dict(params), None if payoff is None else dict(payoff))


@dataclass
class RateInfo:
    alpha: Optional[float] = None
    c1: Optional[float] = None
    beta: Optional[float] = None
    V1: Optional[float] = None
    c_inf: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _rate_info(doc: _Doc) -> RateInfo:
    r = _obj(doc, doc.data, "rate_info", required=False) or {}
    return RateInfo(
        alpha=_float(doc, r, "alpha", "rate_info", positive=True, default=None),
        c1=_float(doc, r, "c1", "rate_info", default=None),
        beta=_float(doc, r, "beta", "rate_info", default=None),
        V1=_float(doc, r, "V1", "rate_info", default=None),
        c_inf=_float(doc, r, "c_inf", "rate_info", positive=True, default=None),
    )


@dataclass
class Common:
    seed: int
    workers: int
    out: str
    model: ModelSpec
    block_size: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, **self.model.to_dict(), "block_size": self.block_size}


def _common(doc: _Doc, overrides: dict) -> Common:
    data = doc.data
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    if "seed" not in data:
        raise doc.error("missing required field 'seed'")
    seed = _int(doc, data, "seed", minimum=0)
    if seed >= 2**64:
        raise doc.error("'seed' must fit in 64 bits", "seed")
    return Common(
        seed=seed,
        workers=_int(doc, data, "workers", minimum=1, default=1),
        out=str(data.get("out", "results")),
        model=_model_spec(doc),
        block_size=_int(doc, data, "block_size", minimum=1, default=4096),
    )


@dataclass
class RunConfig:
    """Config of the ``estimate`` and ``calibrate`` workflows."""

    common: Common
    estimator: str
    coupling: CouplingMode
    geometry: Optional[dict] = None
    allocation: Optional[dict] = None
    epsilon: Optional[float] = None
    plan: Optional[dict] = None
    rate_info: RateInfo = field(default_factory=RateInfo)
    pilot_N: int = 1000

    def to_dict(self) -> dict:
        d = {**self.common.to_dict(), "estimator": self.estimator,
             "coupling": self.coupling.value, "pilot_N": self.pilot_N}
        if self.rate_info.to_dict():
            d["rate_info"] = self.rate_info.to_dict()
        for k in ("geometry", "allocation", "epsilon", "plan"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def _geometry(doc: _Doc, need_R: bool) -> dict:
    g = _obj(doc, doc.data, "geometry")
    out = {"K0": _int(doc, g, "K0", "geometry", minimum=1),
           "M": _int(doc, g, "M", "geometry", minimum=2, default=2)}
    if need_R:
        out["R"] = _int(doc, g, "R", "geometry", minimum=1)
    return out


def _allocation(doc: _Doc, R: int) -> dict:
    a = doc.data.get("allocation")
    if a is None and "N" in doc.data:
        a = {"N": doc.data["N"]}
    if not isinstance(a, dict):
        raise doc.error("missing 'allocation' (object with N and optional q) or top-level 'N'",
                        "allocation")
    N = _int(doc, a, "N", "allocation", minimum=2)
    q = a.get("q")
    if q is None:
        q = [1.0 / R] * R
    if not isinstance(q, list) or len(q) != R or not all(isinstance(x, (int, float)) for x in q):
        raise doc.error(f"allocation q must be a list of {R} numbers", "allocation", "q")
    if any(x <= 0 for x in q) or abs(sum(q) - 1) > 1e-9:
        raise doc.error("allocation q must be positive and sum to 1", "allocation", "q")
    return {"N": N, "q": [float(x) for x in q]}


def parse_run_config(data: dict, text: str = "", source: str = "<config>",
                     overrides: Optional[dict] = None, mode: str = "estimate") -> RunConfig:
    doc = _Doc(dict(data), text or json.dumps(data, indent=2), source)
    common = _common(doc, overrides or {})
    d = doc.data
    estimator = _choice(doc, d, "estimator", FAMILIES, default="mlmc")
    coupling = CouplingMode(_choice(doc, d, "coupling", [m.value for m in CouplingMode],
                                    default="standard"))
    rate_info = _rate_info(doc)
    pilot_N = _int(doc, d, "pilot_N", minimum=2, default=1000)
    cfg = RunConfig(common, estimator, coupling, rate_info=rate_info, pilot_N=pilot_N)

    if mode == "calibrate":
        cfg.epsilon = _float(doc, d, "epsilon", positive=True)
        cfg.geometry = _geometry(doc, need_R=False)
        return cfg

    has_alloc = "allocation" in d or "N" in d
    forms = [k for k in ("epsilon", "plan") if k in d] + (["allocation"] if has_alloc else [])
    if len(forms) != 1:
        raise doc.error("supply exactly one of: geometry+allocation, epsilon, or plan",
                        *(forms[1:2] or []))
    if "plan" in d:
        p = d["plan"]
        if isinstance(p, str):
            ppath = Path(source).parent / p if source != "<config>" else Path(p)
            try:
                p = json.loads(ppath.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise doc.error(f"cannot load plan {str(ppath)!r}: {exc}", "plan") from None
        if not isinstance(p, dict) or "geometry" not in p or "allocation" not in p:
            raise doc.error("plan must be a calibration plan object or a path to one", "plan")
        cfg.plan = p
        cfg.estimator = p.get("family", cfg.estimator)
        cfg.coupling = CouplingMode(p.get("coupling", cfg.coupling.value))
        return cfg
    if "epsilon" in d:
        # calibrated on the fly; geometry only fixes K0 and M
        cfg.epsilon = _float(doc, d, "epsilon", positive=True)
        if "geometry" in d:
            cfg.geometry = _geometry(doc, need_R=False)
        else:
            cfg.geometry = {"K0": 1, "M": 2}
        return cfg
    need_R = estimator != "crude"
    cfg.geometry = _geometry(doc, need_R=need_R)
    if not need_R:
        cfg.geometry["R"] = 1
    cfg.allocation = _allocation(doc, cfg.geometry["R"])
    if estimator == "ml2r" and rate_info.alpha is None:
        raise doc.error("ML2R weights need rate_info.alpha", "rate_info")
    return cfg


@dataclass
class RatesConfig:
    common: Common
    study: dict

    def to_dict(self) -> dict:
        return {**self.common.to_dict(), "study": dict(self.study)}


def parse_rates_config(data: dict, text: str = "", source: str = "<config>",
                       overrides: Optional[dict] = None) -> RatesConfig:
    doc = _Doc(dict(data), text or json.dumps(data, indent=2), source)
    common = _common(doc, overrides or {})
    s = _obj(doc, doc.data, "study")
    kind = s.get("kind")
    if kind not in ("weak", "strong"):
        raise doc.error(f"study kind must be 'weak' or 'strong', got {kind!r}", "study", "kind")
    out: dict = {"kind": kind}
    if kind == "weak":
        grid = s.get("h_grid")
        if not isinstance(grid, list) or len(grid) == 0:
            raise doc.error("study.h_grid must be a non-empty list", "study", "h_grid")
        if len(grid) < 4:
            raise doc.error(f"study.h_grid needs at least 4 points, got {len(grid)}", "study", "h_grid")
        if not all(isinstance(x, (int, float)) and 0 < x <= 1 for x in grid):
            raise doc.error("study.h_grid entries must lie in (0, 1]", "study", "h_grid")
        for x in grid:
            if abs(round(1 / x) * x - 1) > 1e-12:
                raise doc.error(f"1/h must be an integer, got h={x}", "study", "h_grid")
        out["h_grid"] = [float(x) for x in grid]
        out["analytic"] = bool(s.get("analytic", True))
        out["estimator"] = _choice(doc, s, "estimator", ("crude", "ml2r"), default="crude")
        out["N"] = _int(doc, s, "N", "study", minimum=2, default=None)
        out["M"] = _int(doc, s, "M", "study", minimum=2, default=2)
        out["R"] = _int(doc, s, "R", "study", minimum=1, default=2)
        out["alpha"] = _float(doc, s, "alpha", "study", positive=True, default=1.0)
        if not out["analytic"] and out["N"] is None:
            raise doc.error("Monte Carlo weak-rate study needs study.N", "study")
    else:
        g = _obj(doc, s, "geometry")
        out["geometry"] = {"K0": _int(doc, g, "K0", "study", "geometry", minimum=1),
                           "M": _int(doc, g, "M", "study", "geometry", minimum=2, default=2),
                           "R": _int(doc, g, "R", "study", "geometry", minimum=2)}
        levels = s.get("levels")
        if not isinstance(levels, list) or len(levels) < 4:
            raise doc.error("study.levels must list at least 4 probe levels", "study", "levels")
        if not all(isinstance(j, int) and 2 <= j <= out["geometry"]["R"] for j in levels):
            raise doc.error("study.levels entries must be integers in 2..R", "study", "levels")
        out["levels"] = levels
        out["N"] = _int(doc, s, "N", "study", minimum=40)
        out["coupling"] = _choice(doc, s, "coupling", [m.value for m in CouplingMode],
                                  default="standard")
        out["n_batches"] = _int(doc, s, "n_batches", "study", minimum=2, default=20)
    return RatesConfig(common, out)


@dataclass
class SweepConfig:
    common: Common
    epsilons: list[float]
    families: list[str]
    replications: int
    coupling: CouplingMode
    K0: int
    M: int
    rate_info: RateInfo
    pilot_N: int
    cost_cap: Optional[float]

    def to_dict(self) -> dict:
        d = {**self.common.to_dict(), "epsilons": list(self.epsilons),
             "families": list(self.families), "replications": self.replications,
             "coupling": self.coupling.value, "geometry": {"K0": self.K0, "M": self.M},
             "pilot_N": self.pilot_N, "cost_cap": self.cost_cap}
        if self.rate_info.to_dict():
            d["rate_info"] = self.rate_info.to_dict()
        return d


def parse_sweep_config(data: dict, text: str = "", source: str = "<config>",
                       overrides: Optional[dict] = None) -> SweepConfig:
    doc = _Doc(dict(data), text or json.dumps(data, indent=2), source)
    common = _common(doc, overrides or {})
    d = doc.data
    eps = d.get("epsilons")
    if not isinstance(eps, list) or not eps or not all(isinstance(e, (int, float)) and e > 0 for e in eps):
        raise doc.error("'epsilons' must be a non-empty list of positive numbers", "epsilons")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise doc.error("'epsilons' must be strictly decreasing", "epsilons")
    fams = d.get("families", ["crude", "mlmc", "ml2r"])
    if not isinstance(fams, list) or not fams or any(f not in FAMILIES for f in fams):
        raise doc.error(f"'families' must be a non-empty subset of {list(FAMILIES)}", "families")
    reps = _int(doc, d, "replications", minimum=10, default=10)
    g = _obj(doc, d, "geometry", required=False) or {}
    cap = d.get("cost_cap")
    if cap is not None and (isinstance(cap, bool) or not isinstance(cap, (int, float)) or cap <= 0):
        raise doc.error("'cost_cap' must be a positive number or null", "cost_cap")
    return SweepConfig(
        common=common, epsilons=[float(e) for e in eps], families=list(fams),
        replications=reps,
        coupling=CouplingMode(_choice(doc, d, "coupling", [m.value for m in CouplingMode],
                                      default="standard")),
        K0=_int(doc, g, "K0", "geometry", minimum=1, default=1),
        M=_int(doc, g, "M", "geometry", minimum=2, default=2),
        rate_info=_rate_info(doc), pilot_N=_int(doc, d, "pilot_N", minimum=2, default=1000),
        cost_cap=None if cap is None else float(cap),
    )
