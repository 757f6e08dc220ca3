"""Command-line entry point: ``nestmlmc {estimate,rates,calibrate,sweep}``.

Exit status is 0 on success, 2 for an invalid configuration and 3 when the
model or payoff produces a non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .calibrate import CalibrationInput, CalibrationPlan, plan as make_plan
from .config import (ConfigError, RateInfo, RunConfig, SweepConfig, load_json,
                     parse_rates_config, parse_run_config, parse_sweep_config)
from .estimator import (Allocation, CouplingMode, EstimateResult, LevelGeometry,
                        estimate_crude, estimate_ml2r, estimate_mlmc)
from .model import EvaluationError, NestedModel, StreamKey, build_model
from .rates import fit_strong_rate, fit_weak_rate, format_value
from .weights import WeightSpec, solve_weights

log = logging.getLogger("nestmlmc")

EXIT_CONFIG = 2
EXIT_EVALUATION = 3

LEVEL_COLUMNS = ("level", "h_j", "N_j", "mean", "var", "cost", "weight")
SWEEP_COLUMNS = ("family", "epsilon", "rmse", "cost", "cost_ratio_vs_crude", "status")

# stream paths below the seed: estimation runs, pilots, sweep replicates
RUN_PATH = (0,)
PILOT_PATH = (1,)
SWEEP_PATH = (2,)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n")


def _write_csv(path: Path, columns: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])


def _model(cfg) -> NestedModel:
    spec = cfg.common.model
    return build_model(spec.name, spec.params, spec.payoff)


# --------------------------------------------------------------------------
# rate information


def resolve_rates(model: NestedModel, info: RateInfo, K0: int, M: int) -> RateInfo:
    """Fill missing ``alpha``/``c1`` from the model's analytic bias, if it has one."""
    if info.alpha is not None and info.c1 is not None:
        return info
    if model.oracles.mean_payoff_at is None:
        raise ConfigError("rate_info.alpha and rate_info.c1 are required for a model "
                          "without an analytic bias oracle")
    grid = [1.0 / (K0 * M**k) for k in range(2, 8)]
    report = fit_weak_rate(model, grid, analytic=True)
    if report.inconclusive:
        # bias vanishes identically: any positive order works, c1 = 0 gives R = 1
        alpha, c1 = 1.0, 0.0
    else:
        alpha, c1 = report.alpha_hat, report.c1_hat
    return RateInfo(
        alpha=info.alpha if info.alpha is not None else alpha,
        c1=info.c1 if info.c1 is not None else c1,
        beta=info.beta, V1=info.V1, c_inf=info.c_inf,
    )


def _calibration_input(family: str, epsilon: float, rates: RateInfo, K0: int, M: int,
                       pilot_N: int) -> CalibrationInput:
    return CalibrationInput(epsilon=epsilon, alpha=rates.alpha, c1=rates.c1, family=family,
                            M=M, K0=K0, beta=rates.beta, V1=rates.V1, pilot_N=pilot_N,
                            c_inf=rates.c_inf)


def execute_plan(model: NestedModel, p: CalibrationPlan, key: StreamKey, workers: int = 1,
                 block_size: int = 4096) -> EstimateResult:
    if p.family == "crude":
        return estimate_crude(model, p.geometry.h, p.allocation.N, key, workers, block_size)
    if p.family == "mlmc":
        return estimate_mlmc(model, p.geometry, p.allocation, p.mode, key, workers, block_size)
    return estimate_ml2r(model, p.geometry, p.allocation, p.weights, p.mode, key,
                         workers, block_size)


# --------------------------------------------------------------------------
# workflows


def run_estimate(cfg: RunConfig) -> dict:
    model = _model(cfg)
    c = cfg.common
    key = StreamKey(c.seed, RUN_PATH)
    if cfg.plan is not None:
        p = CalibrationPlan.from_dict(cfg.plan)
        result = execute_plan(model, p, key, c.workers, c.block_size)
    elif cfg.epsilon is not None:
        K0, M = cfg.geometry["K0"], cfg.geometry["M"]
        rates = resolve_rates(model, cfg.rate_info, K0, M)
        inp = _calibration_input(cfg.estimator, cfg.epsilon, rates, K0, M, cfg.pilot_N)
        mode = CouplingMode.STANDARD if cfg.estimator == "crude" else cfg.coupling
        p = make_plan(inp, model, StreamKey(c.seed, PILOT_PATH), mode, workers=c.workers)
        result = execute_plan(model, p, key, c.workers, c.block_size)
    else:
        g = LevelGeometry(**cfg.geometry)
        alloc = Allocation(cfg.allocation["N"], tuple(cfg.allocation["q"]))
        if cfg.estimator == "crude":
            result = estimate_crude(model, g.h, alloc.N, key, c.workers, c.block_size)
        elif cfg.estimator == "mlmc":
            result = estimate_mlmc(model, g, alloc, cfg.coupling, key, c.workers, c.block_size)
        else:
            wv = solve_weights(WeightSpec(cfg.rate_info.alpha, g.M, g.R))
            result = estimate_ml2r(model, g, alloc, wv, cfg.coupling, key, c.workers,
                                   c.block_size)
    out = result.to_dict()
    out["target"] = model.oracles.target
    out["config"] = cfg.to_dict()
    return out


def level_rows(result: dict) -> list[dict]:
    return [{"level": lv["j"], "h_j": lv["h_j"], "N_j": lv["n"], "mean": lv["mean"],
             "var": lv["var"], "cost": lv["cost"], "weight": lv["weight"]}
            for lv in result["levels"]]


def run_calibrate(cfg: RunConfig) -> dict:
    model = _model(cfg)
    c = cfg.common
    K0, M = cfg.geometry["K0"], cfg.geometry["M"]
    rates = resolve_rates(model, cfg.rate_info, K0, M)
    inp = _calibration_input(cfg.estimator, cfg.epsilon, rates, K0, M, cfg.pilot_N)
    mode = CouplingMode.STANDARD if cfg.estimator == "crude" else cfg.coupling
    p = make_plan(inp, model, StreamKey(c.seed, PILOT_PATH), mode, workers=c.workers)
    out = p.to_dict()
    out["rate_info"] = rates.to_dict()
    out["config"] = cfg.to_dict()
    return out


def run_rates(cfg) -> dict:
    model = _model(cfg)
    s = cfg.study
    key = StreamKey(cfg.common.seed, RUN_PATH)
    if s["kind"] == "weak":
        report = fit_weak_rate(model, s["h_grid"], s["N"], key, s["estimator"], s["analytic"],
                               M=s["M"], R=s["R"], alpha=s["alpha"])
    else:
        report = fit_strong_rate(model, LevelGeometry(**s["geometry"]), s["coupling"],
                                 s["levels"], s["N"], key, s["n_batches"])
    return {"report": report, "config": cfg.to_dict()}


@dataclass
class SweepRow:
    family: str
    epsilon: float
    rmse: float
    cost: float
    cost_ratio_vs_crude: float
    status: str
    mean_value: float = math.nan
    predicted_cost: float = math.nan
    depth: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_sweep(cfg: SweepConfig) -> dict:
    """Calibrate and replicate every (epsilon, family) pair.

    A pair whose calibration fails, or whose planned cost per replicate exceeds
    ``cost_cap``, is reported with a status flag and no RMSE.
    """
    model = _model(cfg)
    c = cfg.common
    target = model.oracles.target
    try:
        rates = resolve_rates(model, cfg.rate_info, cfg.K0, cfg.M)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    families = ["crude"] + [f for f in cfg.families if f != "crude"]
    rows: list[SweepRow] = []
    for ei, eps in enumerate(cfg.epsilons):
        crude_cost = math.nan
        for fam in families:
            fi = ("crude", "mlmc", "ml2r").index(fam)
            mode = CouplingMode.STANDARD if fam == "crude" else cfg.coupling
            try:
                inp = _calibration_input(fam, eps, rates, cfg.K0, cfg.M, cfg.pilot_N)
                p = make_plan(inp, model, StreamKey(c.seed, PILOT_PATH + (ei, fi)), mode,
                              workers=c.workers, pilot_cost_cap=cfg.cost_cap)
            except (ValueError, ArithmeticError) as exc:
                log.warning("calibration failed for %s at eps=%g: %s", fam, eps, exc)
                rows.append(SweepRow(fam, eps, math.nan, math.nan, math.nan,
                                     f"calibration_failed: {exc}"))
                continue
            if fam == "crude":
                crude_cost = p.predicted_cost
            row = SweepRow(fam, eps, math.nan, p.predicted_cost, math.nan, "ok",
                           predicted_cost=p.predicted_cost, depth=p.geometry.R)
            if cfg.cost_cap is not None and p.predicted_cost > cfg.cost_cap:
                row.status = "over_cost_cap"
            elif target is None:
                row.status = "no_target"
            else:
                values, costs = [], []
                for r in range(cfg.replications):
                    res = execute_plan(model, p, StreamKey(c.seed, SWEEP_PATH + (ei, fi, r)),
                                       c.workers, c.block_size)
                    values.append(res.value)
                    costs.append(res.total_cost)
                v = np.asarray(values)
                row.rmse = float(np.sqrt(np.mean((v - target) ** 2)))
                row.mean_value = float(np.mean(v))
                row.cost = float(np.mean(costs))
            row.cost_ratio_vs_crude = row.cost / crude_cost if crude_cost > 0 else math.nan
            log.info("sweep %s eps=%g: rmse=%.4g cost=%.4g ratio=%.4g [%s]", fam, eps,
                     row.rmse, row.cost, row.cost_ratio_vs_crude, row.status)
            if fam in cfg.families:
                rows.append(row)
    return {"rows": [r.to_dict() for r in rows], "target": target,
            "rate_info": rates.to_dict(), "config": cfg.to_dict()}


# --------------------------------------------------------------------------
# argument handling


def preset_names() -> list[str]:
    root = resources.files("nestmlmc") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _load(args) -> tuple[dict, str, str]:
    if args.preset is not None:
        if args.preset not in preset_names():
            raise ConfigError(f"unknown preset {args.preset!r}; available: {preset_names()}",
                              "--preset")
        res = resources.files("nestmlmc") / "presets" / f"{args.preset}.json"
        with resources.as_file(res) as path:
            data, text = load_json(path)
        return data, text, f"preset:{args.preset}"
    data, text = load_json(args.config)
    return data, text, str(args.config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestmlmc",
        description="Single-level and multilevel estimators of nested expectations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("estimate", "run one estimator and write result.json and levels.csv"),
        ("rates", "fit weak or strong convergence rates"),
        ("calibrate", "plan depth and allocation for a target RMSE"),
        ("sweep", "compare estimator cost against RMSE over a list of targets"),
    ):
        p = sub.add_parser(name, help=help_text)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="JSON run configuration")
        src.add_argument("--preset", help="name of a bundled configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int,
                       help="worker threads (falls back to $NESTMLMC_WORKERS, then the config)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-q", "--quiet", action="store_true", help="suppress per-level progress")
    sub.add_parser("presets", help="list bundled configurations")
    return parser


def _overrides(args) -> dict:
    workers = args.workers
    if workers is None and os.environ.get("NESTMLMC_WORKERS"):
        try:
            workers = int(os.environ["NESTMLMC_WORKERS"])
        except ValueError:
            raise ConfigError(f"NESTMLMC_WORKERS must be an integer, "
                              f"got {os.environ['NESTMLMC_WORKERS']!r}", "NESTMLMC_WORKERS")
    return {"seed": args.seed, "workers": workers,
            "out": None if args.out is None else str(args.out)}


def _dispatch(args) -> int:
    data, text, source = _load(args)
    overrides = _overrides(args)
    if args.command in ("estimate", "calibrate"):
        cfg = parse_run_config(data, text, source, overrides, mode=args.command)
    elif args.command == "rates":
        cfg = parse_rates_config(data, text, source, overrides)
    else:
        cfg = parse_sweep_config(data, text, source, overrides)
    out = Path(cfg.common.out)

    if args.command == "estimate":
        try:
            result = run_estimate(cfg)
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(str(exc), source) from None
        _write_json(out / "result.json", result)
        _write_csv(out / "levels.csv", LEVEL_COLUMNS, level_rows(result))
        print(f"value {format_value(result['value'])} std_error "
              f"{format_value(result['std_error'])} -> {out / 'result.json'}")
    elif args.command == "calibrate":
        try:
            result = run_calibrate(cfg)
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(str(exc), source) from None
        _write_json(out / "plan.json", result)
        print(f"{result['family']}: R={result['geometry']['R']} N={result['allocation']['N']} "
              f"predicted cost {format_value(result['predicted_cost'])} -> {out / 'plan.json'}")
    elif args.command == "rates":
        try:
            res = run_rates(cfg)
        except ValueError as exc:
            raise ConfigError(str(exc), source) from None
        report = res["report"]
        _write_json(out / "rate_report.json", {**report.to_dict(), "config": res["config"]})
        report.write_csv(out / "rate_report.csv")
        report.write_summary_csv(out / "rate_summary.csv")
        for k, v in report.summary().items():
            print(f"{k} {format_value(v)}")
    else:
        res = run_sweep(cfg)
        _write_json(out / "sweep.json", res)
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS, res["rows"])
        print(f"{len(res['rows'])} rows -> {out / 'sweep.csv'}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc.diagnostic()}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION


if __name__ == "__main__":
    sys.exit(main())
