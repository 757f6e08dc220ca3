import csv
import json

import pytest

from nestmlmc.cli import LEVEL_COLUMNS, SWEEP_COLUMNS, main, preset_names

BASE = {
    "seed": 1,
    "model": {"name": "gaussian_linear", "params": {"sigma": 1.0}},
    "payoff": {"kind": "square"},
}


def write(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj, indent=2))
    return path


def run(*argv):
    return main([str(a) for a in argv] + ["-q"])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_minimal_estimate_is_reproducible(tmp_path):
    cfg = write(tmp_path, {**BASE, "estimator": "crude", "geometry": {"K0": 4}, "N": 1000})
    assert run("estimate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("estimate", "--config", cfg, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "result.json").read_bytes()
    assert a == (tmp_path / "b" / "result.json").read_bytes()
    res = json.loads(a)
    assert res["config"]["seed"] == 1
    rows = read_csv(tmp_path / "a" / "levels.csv")
    assert tuple(rows[0]) == LEVEL_COLUMNS
    assert float(rows[0]["mean"]) == res["value"]
    assert int(rows[0]["N_j"]) == 1000


def test_worker_count_does_not_change_value(tmp_path, monkeypatch):
    cfg = write(tmp_path, {**BASE, "estimator": "mlmc", "coupling": "antithetic",
                           "geometry": {"K0": 2, "M": 2, "R": 4}, "N": 40000, "block_size": 1000})
    assert run("estimate", "--config", cfg, "--out", tmp_path / "w1", "--workers", 1) == 0
    monkeypatch.setenv("NESTMLMC_WORKERS", "8")
    assert run("estimate", "--config", cfg, "--out", tmp_path / "w8") == 0
    v1 = json.loads((tmp_path / "w1" / "result.json").read_text())["value"]
    v8 = json.loads((tmp_path / "w8" / "result.json").read_text())["value"]
    assert v1 == v8


def test_seed_override(tmp_path):
    cfg = write(tmp_path, {**BASE, "estimator": "crude", "geometry": {"K0": 2}, "N": 100})
    assert run("estimate", "--config", cfg, "--out", tmp_path / "a", "--seed", 99) == 0
    res = json.loads((tmp_path / "a" / "result.json").read_text())
    assert res["seed"] == 99 and res["config"]["seed"] == 99


def test_missing_seed_exits_2(tmp_path, capsys):
    obj = {k: v for k, v in BASE.items() if k != "seed"}
    cfg = write(tmp_path, {**obj, "estimator": "crude", "geometry": {"K0": 4}, "N": 10})
    assert run("estimate", "--config", cfg, "--out", tmp_path) == 2
    assert "seed" in capsys.readouterr().err


def test_json_syntax_error_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  "N": 10,\n}\n')
    assert run("estimate", "--config", path) == 2
    assert "bad.json:4:" in capsys.readouterr().err


def test_invalid_field_reports_its_line(tmp_path, capsys):
    cfg = write(tmp_path, {**BASE, "estimator": "mlmc", "coupling": "sideways",
                           "geometry": {"K0": 1, "M": 2, "R": 2}, "N": 10})
    assert run("estimate", "--config", cfg) == 2
    err = capsys.readouterr().err
    line = next(i for i, t in enumerate(cfg.read_text().splitlines(), 1) if '"coupling"' in t)
    assert f"cfg.json:{line}:" in err


def test_both_geometry_and_epsilon_rejected(tmp_path):
    cfg = write(tmp_path, {**BASE, "estimator": "mlmc", "epsilon": 0.1,
                           "geometry": {"K0": 1, "M": 2, "R": 2}, "N": 10})
    assert run("estimate", "--config", cfg) == 2


def test_evaluation_error_exits_3(tmp_path, capsys):
    cfg = write(tmp_path, {**BASE, "payoff": {"kind": "affine", "a": 1e308},
                           "estimator": "crude", "geometry": {"K0": 1}, "N": 100})
    with pytest.warns(RuntimeWarning):
        assert run("estimate", "--config", cfg, "--out", tmp_path) == 3
    assert "evaluation error" in capsys.readouterr().err


def test_empty_grid_exits_2(tmp_path):
    cfg = write(tmp_path, {**BASE, "study": {"kind": "weak", "h_grid": []}})
    assert run("rates", "--config", cfg) == 2


def test_weak_rate_preset(tmp_path):
    assert run("rates", "--preset", "weak-smooth", "--out", tmp_path) == 0
    summary = {r["quantity"]: r["value"] for r in read_csv(tmp_path / "rate_summary.csv")}
    assert float(summary["alpha_hat"]) == pytest.approx(1.0, abs=1e-9)
    rows = read_csv(tmp_path / "rate_report.csv")
    assert list(rows[0]) == ["h", "value", "stderr", "fit_lo", "fit_hi"]
    assert json.loads((tmp_path / "rate_report.json").read_text())["config"]["seed"] == 11


def test_calibrate_then_estimate_from_plan(tmp_path):
    cfg = write(tmp_path, {**BASE, "estimator": "ml2r", "coupling": "antithetic",
                           "epsilon": 0.05, "geometry": {"K0": 2, "M": 2}, "pilot_N": 300})
    assert run("calibrate", "--config", cfg, "--out", tmp_path / "cal") == 0
    p = json.loads((tmp_path / "cal" / "plan.json").read_text())
    assert p["family"] == "ml2r" and p["weights"]["R"] == p["geometry"]["R"]
    use = write(tmp_path, {**BASE, "plan": "cal/plan.json"}, "use.json")
    assert run("estimate", "--config", use, "--out", tmp_path / "est") == 0
    res = json.loads((tmp_path / "est" / "result.json").read_text())
    assert res["family"] == "ml2r"
    assert res["allocation"] == p["allocation"]
    assert abs(res["value"] - res["target"]) < 0.2


def test_epsilon_mode_estimate(tmp_path):
    cfg = write(tmp_path, {**BASE, "estimator": "mlmc", "epsilon": 0.05,
                           "geometry": {"K0": 2, "M": 2}, "pilot_N": 300})
    assert run("estimate", "--config", cfg, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert res["geometry"]["K0"] == 2


def test_sweep_single_eps_crude(tmp_path):
    cfg = write(tmp_path, {**BASE, "epsilons": [0.1], "families": ["crude"],
                           "replications": 10, "pilot_N": 200})
    assert run("sweep", "--config", cfg, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    assert len(rows) == 1
    assert float(rows[0]["cost_ratio_vs_crude"]) == 1.0
    assert rows[0]["status"] == "ok"


def test_sweep_validation(tmp_path):
    for bad in ({"epsilons": [0.01, 0.1]}, {"epsilons": [0.1], "replications": 5},
                {"epsilons": [0.1], "families": ["mc"]}):
        cfg = write(tmp_path, {**BASE, **bad})
        assert run("sweep", "--config", cfg) == 2


def test_sweep_flags_failed_calibration_and_continues(tmp_path):
    # neither multilevel family reaches this accuracy within its depth limit
    cfg = write(tmp_path, {**BASE, "epsilons": [1e-9], "families": ["mlmc", "ml2r"],
                           "replications": 10, "rate_info": {"alpha": 1.0, "c1": 1e6},
                           "cost_cap": 1.0, "pilot_N": 20})
    assert run("sweep", "--config", cfg, "--out", tmp_path) == 0
    rows = {r["family"]: r for r in read_csv(tmp_path / "sweep.csv")}
    assert set(rows) == {"mlmc", "ml2r"}
    assert all(r["status"].startswith("calibration_failed") for r in rows.values())
    assert all(r["rmse"] == "nan" for r in rows.values())


def test_presets_are_all_valid():
    names = preset_names()
    assert {"estimate-minimal", "strong-indicator", "weak-smooth", "sweep-square"} <= set(names)
    from importlib import resources
    for n in names:
        json.loads((resources.files("nestmlmc") / "presets" / f"{n}.json").read_text())


def test_unknown_preset_exits_2():
    assert run("estimate", "--preset", "does-not-exist") == 2
