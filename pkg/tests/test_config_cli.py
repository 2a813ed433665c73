import csv
import json

import numpy as np
import pytest
import yaml

from schloegl import cli
from schloegl.config import ScenarioConfig, bundled_path, bundled_scenarios
from schloegl.errors import ConfigurationError


def small(kind="explicit", **controller):
    """A short desk-scale scenario that runs in well under a second."""
    ctrl = {"kind": kind, "C_u": 30.0, "lam": 0.1, "M1": 20}
    ctrl.update(controller)
    if kind == "free":
        ctrl = {"kind": "free"}
    return ScenarioConfig.from_dict({
        "name": f"small_{kind}", "initial_error": "-4+8*cos(2*pi*x**2)",
        "controller": ctrl, "time": {"T": 0.2},
        "output": {"snapshot_every": 0.1, "snapshot_format": "npz"},
    })


def test_bundled_scenarios_validate_and_round_trip():
    names = bundled_scenarios()
    for required in ("free_target0", "explicit_target0_Cu30", "explicit_target0_Cu15",
                     "rhc_target0_Cu30", "rhc_target0_Cu15", "rhc_target_sincos_Cu30"):
        assert required in names
    for name in names:
        cfg = ScenarioConfig.load(bundled_path(name))
        assert cfg.name == name
        back = ScenarioConfig.from_dict(yaml.safe_load(cfg.dumps()))
        assert back == cfg
        assert back.dumps() == cfg.dumps()


def test_profiles():
    cfg = ScenarioConfig.load(bundled_path("free_target0"))
    assert (cfg.grid.n_nodes, cfg.time.dt) == (251, 1e-3)
    paper = cfg.with_profile("paper")
    assert (paper.grid.n_nodes, paper.time.dt) == (1001, 1e-4)
    with pytest.raises(ConfigurationError):
        cfg.with_profile("huge")


def test_unknown_key_and_missing_fields():
    base = yaml.safe_load(ScenarioConfig.load(bundled_path("explicit_target0_Cu30")).dumps())
    bad = dict(base, colour="red")
    with pytest.raises(ConfigurationError, match="colour"):
        ScenarioConfig.from_dict(bad)
    bad = dict(base, controller=dict(base["controller"], lam=None))
    with pytest.raises(ConfigurationError, match="lam"):
        ScenarioConfig.from_dict(bad)
    bad = dict(base, grid=dict(base["grid"], nu=-0.1))
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_dict(bad)
    bad = dict(base, initial_error="import os")
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_dict(bad)
    bad = dict(base, time={"T": 1.0, "dt": 0.3})
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_dict(bad)


def test_validate_command_exit_codes(tmp_path, capsys):
    assert cli.main(["validate", "rhc_target0_Cu30", "free_target0"]) == cli.EXIT_OK
    path = tmp_path / "bad.yaml"
    path.write_text("name: x\ninitial_error: '0'\ncontroller: {kind: explicit, C_u: 30}\n")
    assert cli.main(["validate", str(path)]) == cli.EXIT_CONFIG
    assert "lam" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG


def test_list_command(capsys):
    assert cli.main(["list"]) == 0
    assert "rhc_target0_Cu30" in capsys.readouterr().out.split()


def test_run_writes_artifacts(tmp_path):
    code, summary = cli.run_scenario(small(), tmp_path)
    assert code == cli.EXIT_OK
    for name in ("trace.csv", "snapshots.npz", "summary.json", "config.yaml"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "trace.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:4] == ["t", "normH", "normV", "normL6"]
    stored = json.loads((tmp_path / "summary.json").read_text())
    assert stored["J_total"] == summary["J_total"]
    assert ScenarioConfig.load(tmp_path / "config.yaml") == small()


def test_runs_are_deterministic(tmp_path):
    cfg = small("rhc", T_rh=0.1, delta_rh=0.1, state_weight=10.0)
    cli.run_scenario(cfg, tmp_path / "a")
    cli.run_scenario(cfg, tmp_path / "b")
    assert (tmp_path / "a/trace.csv").read_bytes() == (tmp_path / "b/trace.csv").read_bytes()
    assert (tmp_path / "a/windows.json").exists()


def test_blow_up_exit_code(tmp_path):
    cfg = ScenarioConfig.from_dict({
        "name": "blow", "initial_error": "50",
        "controller": {"kind": "free"}, "time": {"T": 5.0, "dt": 0.1},
    })
    code, summary = cli.run_scenario(cfg, tmp_path)
    assert code == cli.EXIT_BLOWUP and summary["status"] == "blow_up"
    assert (tmp_path / "trace.csv").exists()


def test_non_convergence_is_a_warning(tmp_path):
    cfg = small("rhc", T_rh=0.1, delta_rh=0.1, state_weight=1000.0, optimizer={"max_iters": 1})
    code, summary = cli.run_scenario(cfg, tmp_path)
    assert code == cli.EXIT_OK
    assert not summary["optimizer"]["all_converged"]
    assert any("did not converge" in w for w in summary["warnings"])


def test_compare_self_and_mismatch(tmp_path):
    cli.run_scenario(small(), tmp_path / "e")
    cli.run_scenario(small("free"), tmp_path / "f")
    trace = str(tmp_path / "e/trace.csv")
    rows = cli.compare([trace, trace])
    assert rows[1]["d_final_normH"] == 0.0 and rows[1]["d_J_total"] == 0.0
    rows = cli.compare([str(tmp_path / "f/trace.csv"), trace])
    assert rows[1]["final_normH"] < rows[0]["final_normH"]

    other = ScenarioConfig.from_dict(dict(yaml.safe_load(small().dumps()), time={"T": 0.1}))
    cli.run_scenario(other, tmp_path / "g")
    with pytest.raises(ConfigurationError, match="time grid"):
        cli.compare([trace, str(tmp_path / "g/trace.csv")])

    out = tmp_path / "cmp.csv"
    assert cli.main(["compare", trace, trace, "--output", str(out)]) == 0
    with open(out) as fh:
        assert next(csv.reader(fh)) == cli.COMPARE_COLUMNS


def test_diagnose_without_convergence(tmp_path):
    cfg = small()
    report = cli.diagnose(cfg, tmp_path, convergence=False)
    assert report["poincare_xi"]["1"] >= 1.0
    assert report["poincare_xi"]["8"] is None  # too coarse for eight actuators at n = 251
    assert report["mlam"]["min_ratio"] >= 1.0 - 1e-10
    assert np.isfinite(report["frak_u_norm"]["linf"])
    assert (tmp_path / "diagnostics.json").exists()
