import csv
import hashlib
import json
import os
import subprocess
import sys

import pytest

from slowfast_mdp.cli import main

OU = {"example": "ou_linear"}


def write_config(tmp_path, name="cfg.json", **cfg):
    cfg.setdefault("model", OU)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_average_rows(tmp_path):
    cfg = write_config(tmp_path, options={"x": [0.0, 1.0], "mu_atoms": [0.0]})
    out = tmp_path / "avg"
    assert main(["average", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "average.csv")
    assert [float(r["x"]) for r in rows] == [0.0, 1.0]
    for r in rows:
        assert abs(float(r["gamma_bar"])) < 1e-8
        assert abs(float(r["D_bar"]) - 1.5) < 1e-6
        assert abs(float(r["D_bar_alt"]) - 1.5) < 1e-6


def test_cell_and_equilibrium_rows(tmp_path):
    cfg = write_config(tmp_path, options={"x": [0.5], "grid": {"n": 1025}})
    out = tmp_path / "grid"
    assert main(["cell", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "cell.csv")
    assert len(rows) == 1025
    for r in rows[::64]:
        assert abs(float(r["phi"]) - float(r["y"])) < 1e-5
        assert abs(float(r["phi_y"]) - 1.0) < 1e-5
    assert main(["equilibrium", cfg, "--out", str(out)]) == 0
    (summary,) = read_csv(out / "equilibrium.csv")
    assert abs(float(summary["normalization"]) - 1) < 1e-10
    assert abs(float(summary["variance"]) - 1) < 1e-6
    assert len(read_csv(out / "equilibrium_density.csv")) == 1025


def test_config_errors_exit_2(tmp_path, capsys):
    out = str(tmp_path / "o")
    single = write_config(tmp_path, "single.json", seeds=[0], eps=[0.4, 0.2, 0.1],
                          N=[8, 16, 32])
    assert main(["couple", single, "--out", out]) == 2
    unknown = write_config(tmp_path, "unknown.json", epsilon=0.1)
    assert main(["average", unknown, "--out", out]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["average", str(tmp_path / "missing.json"), "--out", out]) == 2
    bad_seeds = write_config(tmp_path, "dup.json", seeds=[1, 1])
    assert main(["average", bad_seeds, "--out", out]) == 2


def test_failed_validation_exits_2(tmp_path):
    model = {"coefficients": {"b": "y", "c": 0, "sigma": 1, "f": "-y", "g": 0,
                              "tau1": 0, "tau2": 0}, "kappa": 1.0}
    cfg = write_config(tmp_path, model=model, options={"budget": {"n_probes": 256}})
    out = tmp_path / "v"
    assert main(["validate", cfg, "--out", str(out)]) == 2
    report = json.loads((out / "validate.json").read_text())
    assert not report["passed"] and "A1" in report["failed"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "AssumptionViolation"


def test_passing_validation(tmp_path):
    cfg = write_config(tmp_path, options={"budget": {"n_probes": 256}})
    out = tmp_path / "v"
    assert main(["validate", cfg, "--out", str(out)]) == 0
    assert all(r["passed"] == "1" for r in read_csv(out / "validate.csv"))


def test_numerical_fault_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path, options={"grid": {"n": 201, "half_width": 3.0}})
    assert main(["equilibrium", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "GridTooSmallFault" in capsys.readouterr().err


def test_outputs_do_not_depend_on_worker_count(tmp_path):
    cfg = write_config(tmp_path, model={"example": "mean_field_ou"}, N=[6], eps=[0.3],
                       T=0.1, report_dt=0.02, seeds=[3, 1, 2])
    digests = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        assert main(["simulate", cfg, "--out", str(out), "--workers", str(w)]) == 0
        digests.append(hashlib.sha256((out / "simulate.csv").read_bytes()).hexdigest())
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["workers"] == w
    assert digests[0] == digests[1]
    rows = read_csv(tmp_path / "w1" / "simulate.csv")
    assert [int(r["seed"]) for r in rows[::6 * 6]] == [1, 2, 3]


def test_worker_count_from_environment(tmp_path, monkeypatch):
    from slowfast_mdp.cli import worker_count
    from slowfast_mdp.errors import ConfigError
    monkeypatch.setenv("SLOWFAST_MDP_WORKERS", "3")
    assert worker_count() == 3 and worker_count(1) == 1
    monkeypatch.setenv("SLOWFAST_MDP_WORKERS", "many")
    with pytest.raises(ConfigError):
        worker_count()


def rate_config(tmp_path, control):
    return write_config(tmp_path, f"rate_{control['family']}.json", T=0.5, report_dt=0.05, J=12,
                        options={"control": control, "limit_M": 1000})


def test_rate_zero_control(tmp_path):
    out = tmp_path / "r0"
    assert main(["rate", rate_config(tmp_path, {"family": "zero"}), "--out", str(out)]) == 0
    rep = json.loads((out / "rate_report.json").read_text())
    assert rep["variational_cost"] == 0.0 and rep["dg_rate"] == 0.0
    assert len(read_csv(out / "rate_slices.csv")) == 11


def test_rate_constant_control_round_trip(tmp_path):
    out = tmp_path / "r1"
    cfg = rate_config(tmp_path, {"family": "constant", "h1": 1.0, "h2": 0.0})
    assert main(["rate", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "rate_report.json").read_text())
    assert abs(rep["variational_cost"] - 0.25) < 1e-8  # 1/2 |h|^2 T
    assert rep["dg_rate"] <= rep["variational_cost"] + 1e-3
    assert abs(rep["round_trip_dg"] - rep["dg_rate"]) <= 0.05 * rep["dg_rate"]
    assert abs(rep["round_trip_cost"] - rep["dg_rate"]) <= 0.05 * rep["dg_rate"]


def test_rate_expression_control(tmp_path):
    out = tmp_path / "r2"
    cfg = rate_config(tmp_path, {"family": "expression", "h1": "0*x + 1", "h2": "0*y"})
    assert main(["rate", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "rate_report.json").read_text())
    assert abs(rep["variational_cost"] - 0.25) < 1e-8


@pytest.mark.slow
def test_coupling_study_outputs(tmp_path):
    model = {"example": "ou_linear", "init": [0.0, 1.0]}
    cfg = write_config(tmp_path, model=model, eps=[0.4, 0.2, 0.1], N=[8, 16, 32], T=0.1,
                       seeds=list(range(10)), options={"weak_samples": 200, "eps_tiny": 0.1})
    out = tmp_path / "c"
    assert main(["couple", cfg, "--out", str(out)]) == 0
    slopes = {r["quantity"]: float(r["value"]) for r in read_csv(out / "slopes.csv")}
    assert set(slopes) == {"eps_slope", "weak_slope", "N_decreasing_pairs"}
    assert slopes["eps_slope"] > 0  # gap shrinks with eps
    means = read_csv(out / "coupling_means.csv")
    assert {r["study"] for r in means} == {"eps_sweep", "N_sweep", "weak"}
    assert len(read_csv(out / "coupling.csv")) == 3 * 10 + 3 * 10 + 3 * 10


def test_fluctuation_study_files_and_manifest(tmp_path):
    cfg = write_config(tmp_path, N=[8, 16], eps=[0.3], T=0.1, report_dt=0.02, seeds=[0, 1, 2],
                       J=3, options={"scaling": "clt", "csv_stride": 5})
    out = tmp_path / "f"
    assert main(["fluctuate", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "fluctuation_summary.json").read_text())
    assert summary["scaling"] == "clt" and set(summary["per_N"]) == {"8", "16"}
    assert len(summary["per_N"]["8"]["variance_T"]) == 4  # tanh plus three Hermite functions
    assert summary["tanh_variance_ratio"] > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert set(manifest["files"]) == {"fluctuation.csv", "fluctuation_summary.json"}


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, options={"x": [0.0]})
    out = tmp_path / "sub"
    env = dict(os.environ, SLOWFAST_MDP_WORKERS="1")
    proc = subprocess.run([sys.executable, "-m", "slowfast_mdp.cli", "average", cfg,
                           "--out", str(out)], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (out / "average.csv").exists() and (out / "manifest.json").exists()
    bad = subprocess.run([sys.executable, "-m", "slowfast_mdp.cli", "nope", cfg],
                         capture_output=True, text=True)
    assert bad.returncode == 2  # argparse usage error
