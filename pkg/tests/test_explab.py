import json
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ibflab.covmodel import IsotropicModel
from ibflab.explab import battery, experiments
from ibflab.explab.config import ExperimentConfig, apply_overrides, load_config
from ibflab.explab.regions import AllSpace, CenteredBall, EmptySet, HalfSpace
from ibflab.explab.report import ExperimentReport, write_trajectory_csv
from ibflab.explab.svgplot import report_svg

GOLDEN = Path(__file__).parent / "data" / "golden_lyapunov.json"


# --- regions -------------------------------------------------------------------


def test_halfspace_mass_and_membership():
    hs = HalfSpace(0.0)
    assert hs.gaussian_mass(2) == pytest.approx(0.5)
    pts = np.array([[-1.0, 3.0], [1.0, 0.0]])
    np.testing.assert_array_equal(hs.contains(pts), [True, False])
    assert HalfSpace(1.0).gaussian_mass(3) == pytest.approx(0.8413447, rel=1e-6)


def test_ball_region_mass():
    assert CenteredBall(1.0).gaussian_mass(2) == pytest.approx(1 - math.exp(-0.5))
    pts = np.array([[0.5, 0.5], [2.0, 0.0]])
    np.testing.assert_array_equal(CenteredBall(1.0).contains(pts), [True, False])
    # sqrt(t) scaling
    assert CenteredBall(1.0).contains(np.array([2.0, 0.0]), scale=3.0)


def test_trivial_regions():
    pts = np.zeros((4, 2))
    assert AllSpace().gaussian_mass(2) == 1.0
    assert EmptySet().gaussian_mass(2) == 0.0
    assert AllSpace().contains(pts).all()
    assert not EmptySet().contains(pts).any()


def test_set_region_monte_carlo_mass():
    # generic descriptor-backed region: mass by a fixed Monte Carlo budget
    from ibflab import geometry as geo
    from ibflab.explab.regions import SetRegion

    region = SetRegion(geo.Ball(center=(0.0, 0.0), radius=1.0))
    mass = region.gaussian_mass(2)
    assert abs(mass - (1 - math.exp(-0.5))) < 3 * math.sqrt(0.4 * 0.6 / 1_000_000)
    assert region.contains(np.array([0.5, 0.0]))
    assert region.contains(np.array([1.5, 0.0]), scale=2.0)


# --- config --------------------------------------------------------------------


def test_config_from_toml_and_overrides(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(
        """
[model]
d = 2
alpha = 0.25
ell = 1.5

[run]
experiment = "lyapunov"
replicates = 64
dt = 0.002
horizon = 2.0
save_times = [1.0, 2.0]
master_seed = 99

[set]
kind = "ball"
center = [0.0, 0.0]
radius = 2.0

[[regions]]
kind = "halfspace"
value = 0.0

[[regions]]
kind = "ball"
value = 1.0
"""
    )
    cfg = load_config(path, ["model.alpha=0.5", "run.dt=0.004"])
    assert cfg.alpha == 0.5
    assert cfg.dt == 0.004
    assert cfg.replicates == 64
    assert cfg.set_radius == 2.0
    assert cfg.test_regions == (("halfspace", 0.0), ("ball", 1.0))
    model = cfg.model()
    assert model.ell == 1.5


def test_config_override_parsing_types():
    cfg = apply_overrides(ExperimentConfig(), ["run.save_times=[0.5, 1.0]", "set.kind=box"])
    assert cfg.save_times == (0.5, 1.0)
    assert cfg.set_kind == "box"
    with pytest.raises(KeyError):
        apply_overrides(ExperimentConfig(), ["no.such.key=1"])
    with pytest.raises(ValueError):
        apply_overrides(ExperimentConfig(), ["missing-equals"])


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(replicates=1)
    with pytest.raises(ValueError):
        ExperimentConfig(save_times=(2.0,), horizon=1.0)


# --- report ---------------------------------------------------------------------


def test_report_roundtrip(tmp_path):
    rep = ExperimentReport(experiment="demo", config_echo={"a": 1})
    rep.add("x", 1.0, 2.0, 0.1, 2.05, True, "rule")
    rep.add("y", 2.0, 3.0, 0.2, None, False, "other rule")
    assert not rep.all_passed
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["schema_version"] == 1
    assert data["rows"][0]["estimate"] == 2.0
    assert data["rows"][1]["target"] is None
    assert "meta" in data
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("label,")
    assert len(lines) == 3
    assert len(rep.summary_lines()) == 2


def test_trajectory_csv(tmp_path):
    times = np.array([0.0, 1.0])
    pos = np.zeros((2, 2, 3, 2))
    write_trajectory_csv(tmp_path / "t.csv", times, pos)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "replicate,t,particle,x1,x2"
    assert len(lines) == 1 + 2 * 2 * 3


def test_svg_plot(tmp_path):
    rep = ExperimentReport(experiment="demo", config_echo={})
    for t in (1.0, 2.0, 5.0):
        rep.add("curve", t, t**0.5, 0.1, 2.0, True, "r")
    report_svg(rep, tmp_path / "p.svg")
    text = (tmp_path / "p.svg").read_text()
    assert text.startswith("<svg")
    assert "polyline" in text


# --- experiment drivers (small configurations) ------------------------------------


def test_lyapunov_suite_small(tmp_path):
    cfg = battery.lyapunov_config(seed=5)
    cfg = apply_overrides(cfg, ["run.replicates=80", "run.horizon=10.0", "run.dt=0.002",
                                "run.save_times=[10.0]"])
    rep = experiments.run_lyapunov_suite(cfg)
    assert {r.label for r in rep.rows} >= {"lambda_1", "lambda_2"}
    assert rep.all_passed
    # per-replicate exponent table rides along as a data CSV
    assert rep.data_header == ["replicate", "lambda_1", "lambda_2"]
    assert len(rep.data_rows) == 80
    rep.write_data_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "replicate,lambda_1,lambda_2"


def test_martingale_suite_small():
    cfg = ExperimentConfig(
        experiment="martingale", d=2, alpha=0.05, ell=2.0, n_markers=12,
        replicates=120, dt=0.05, horizon=2.0, save_times=(0.5, 1.0, 2.0),
        master_seed=31,
    )
    rep = experiments.run_martingale_suite(cfg)
    mean_rows = [r for r in rep.rows if r.label == "mean-volume"]
    assert len(mean_rows) == 2
    assert all(r.passed for r in mean_rows)
    sm_rows = [r for r in rep.rows if r.label == "second-moment"]
    assert len(sm_rows) == 1
    assert "second_moment_corroboration" in rep.extra


def test_persistence_suite_contracting_branch():
    cfg = ExperimentConfig(
        experiment="persistence", d=2, alpha=1.0, ell=1.0, n_markers=8,
        replicates=60, dt=0.01, horizon=4.0, save_times=(0.5, 4.0), master_seed=17,
    )
    rep = experiments.run_persistence_suite(cfg)
    assert rep.rows[0].label == "median-volume-ratio"
    # strong contraction: factor 10 fall by t=4 (rate e^{-4t})
    assert rep.rows[0].passed


def test_persistence_suite_refuses_midrange_model():
    cfg = ExperimentConfig(
        experiment="persistence", d=2, alpha=0.4, ell=1.0, n_markers=8,
        replicates=10, dt=0.05, horizon=1.0, save_times=(0.5, 1.0), master_seed=3,
    )
    # alpha=0.4: lambda_1 > 0 but beta_N/beta_L = 2.2/1.8 < 2
    with pytest.raises(ValueError):
        experiments.run_persistence_suite(cfg)


def test_dispersion_refuses_nontransient():
    cfg = apply_overrides(battery.dispersion_config(), ["model.alpha=1.0"])
    with pytest.raises(ValueError, match="transient"):
        experiments.run_dispersion_forward(cfg)


def test_image_dispersion_refuses_negative_top_exponent():
    cfg = apply_overrides(battery.image_dispersion_config(), ["model.alpha=1.0"])
    with pytest.raises(ValueError, match="top exponent"):
        experiments.run_dispersion_image(cfg)


def test_image_dispersion_trivial_regions():
    cfg = ExperimentConfig(
        experiment="image-dispersion", d=2, alpha=0.05, ell=2.0, n_markers=8,
        replicates=40, dt=0.05, horizon=1.0, save_times=(0.5, 1.0),
        master_seed=23, test_regions=(("all", 0.0), ("empty", 0.0)),
    )
    rep = experiments.run_dispersion_image(cfg)
    for r in rep.rows:
        if r.label.endswith("sq-diff-decrease"):
            # difference is identically zero for the whole and empty regions
            assert r.estimate == 0.0
            assert r.target == 0.0


def test_quad_variation_suite_small():
    cfg = apply_overrides(
        battery.quad_variation_config(),
        ["run.replicates=40", "run.horizon=30.0", "run.dt=0.02", "run.save_times=[30.0]"],
    )
    rep = experiments.run_quad_variation(cfg)
    degenerate = [r for r in rep.rows if r.label == "degenerate-pair"][0]
    assert degenerate.estimate < 1e-13 and degenerate.passed
    transient = [r for r in rep.rows if r.label == "transient-pair"][0]
    assert abs(transient.estimate - 1.0) < 0.1


def test_distance_crosscheck_small():
    cfg = apply_overrides(
        battery.distance_config(),
        ["run.replicates=400", "run.distance_samples=400", "run.dt=0.002"],
    )
    rep = experiments.run_distance_crosscheck(cfg)
    assert len(rep.rows) == 2
    assert rep.all_passed


# --- reproducibility ---------------------------------------------------------------


def test_reports_reproducible_bit_for_bit():
    cfg = apply_overrides(battery.lyapunov_config(), ["run.replicates=20", "run.horizon=1.0",
                                                      "run.save_times=[1.0]"])
    a = experiments.run_lyapunov_suite(cfg).to_dict(volatile=False)
    b = experiments.run_lyapunov_suite(cfg).to_dict(volatile=False)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_worker_count_does_not_change_results(monkeypatch):
    from ibflab.explab.experiments import chunked_volume_run
    from ibflab.simcore import StepConfig
    from ibflab import geometry as geo

    model = IsotropicModel(d=2, alpha=0.05, ell=2.0)
    ball = geo.Ball(center=(0.0, 0.0), radius=1.0)
    step_cfg = StepConfig(dt=0.05, seed=77)

    monkeypatch.setenv("IBF_THREADS", "1")
    serial = chunked_volume_run("trace", ball, model, step_cfg, 0.5, 6, 24, [0.5])
    monkeypatch.setenv("IBF_THREADS", "3")
    pooled = chunked_volume_run("trace", ball, model, step_cfg, 0.5, 6, 24, [0.5])
    np.testing.assert_array_equal(serial.vhat, pooled.vhat)
    np.testing.assert_array_equal(serial.dets, pooled.dets)
    assert serial.min_det == pooled.min_det


def test_golden_lyapunov_report():
    cfg = apply_overrides(
        battery.lyapunov_config(seed=424242),
        ["run.replicates=8", "run.horizon=0.5", "run.dt=0.01", "run.save_times=[0.5]"],
    )
    rep = experiments.run_lyapunov_suite(cfg).to_dict(volatile=False)
    payload = json.dumps(rep, sort_keys=True, indent=1)
    if not GOLDEN.exists():
        GOLDEN.parent.mkdir(parents=True, exist_ok=True)
        GOLDEN.write_text(payload + "\n")
    assert payload + "\n" == GOLDEN.read_text()


# --- command line -------------------------------------------------------------------


def run_cli(*args):
    env = dict(os.environ)
    env["PYTHONPATH"] = str(Path(__file__).parent.parent / "src")
    return subprocess.run(
        [sys.executable, "-m", "ibflab.explab.cli", *args],
        capture_output=True, text=True, env=env,
    )


def test_cli_model_describe():
    out = run_cli("model", "describe", "--set", "model.alpha=0.0")
    assert out.returncode == 0
    data = json.loads(out.stdout)
    assert data["volume_preserving"] is True
    assert data["lyapunov_spectrum"] == [1.0, -1.0]


def test_cli_simulate_and_exit_codes(tmp_path):
    out = run_cli(
        "simulate", "--out", str(tmp_path),
        "--set", "run.replicates=2", "--set", "run.n_particles=3",
        "--set", "run.dt=0.01", "--set", "run.horizon=0.05",
        "--set", "run.save_times=[0.05]", "--binary",
    )
    assert out.returncode == 0, out.stderr
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 1 * 3
    assert (tmp_path / "snapshots_0000.ibf").exists()


def test_cli_psi_table(tmp_path):
    out = run_cli("psi", "table", "--out", str(tmp_path), "--set", "model.alpha=0.05")
    assert out.returncode == 0, out.stderr
    header = (tmp_path / "psi_table.csv").read_text().splitlines()[0]
    assert header == "s,psi,majorant"


def test_cli_geometry_cylinder_ratio():
    out = run_cli(
        "geometry", "cylinder-ratio", "--L", "5", "--delta", "0.2",
        "--samples", "20000", "--set", "model.alpha=0.05",
    )
    assert out.returncode == 0, out.stderr
    data = json.loads(out.stdout)
    assert data["pass"] is True
    assert data["estimate"] <= data["line_reference"] + 3 * data["std_error"]


def test_cli_geometry_extract(tmp_path):
    verts = np.column_stack([np.linspace(-4, 4, 41), np.zeros(41)])
    path = tmp_path / "poly.csv"
    np.savetxt(path, verts, delimiter=",")
    out = run_cli(
        "geometry", "extract", "--polyline", str(path), "--L", "6.0",
        "--domain-radius", "8.0",
    )
    assert out.returncode == 0, out.stderr
    data = json.loads(out.stdout)
    assert data["pass"] is True
    assert data["total_length"] >= data["length_floor"]
