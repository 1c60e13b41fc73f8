import io
import os
import subprocess
import sys

import numpy as np
import pytest

from nvrotor.cli import build_run_config, default_config_path, main
from nvrotor.sweep_engine import read_table

BUNDLED = default_config_path()


def run(argv, tmp_path):
    out, err = io.StringIO(), io.StringIO()
    code = main(["--out", str(tmp_path)] + argv, out=out, err=err)
    return code, out.getvalue(), err.getvalue()


def test_params_report_and_csv(tmp_path):
    code, out, _ = run(["params", "--csv"], tmp_path)
    assert code == 0
    assert "anti-crossing" in out.lower()
    assert "102.4" in out
    t = read_table(tmp_path / "params.csv")
    assert len(t.rows) == 1


def test_missing_key_names_it(tmp_path):
    cfg = tmp_path / "bad.cfg"
    text = BUNDLED.read_text().replace("b0 = 90e-3", "")
    cfg.write_text(text)
    code, _, err = run(["--config", str(cfg), "params"], tmp_path)
    assert code == 2
    assert "b0" in err


def test_override_precedence():
    cfg = build_run_config(None, {"b0": "50e-3"})
    assert cfg.system.field.b0 == 50e-3
    cfg = build_run_config(None, {"field.b0": "60e-3", "trap.omega0": "1e7"})
    assert cfg.system.field.b0 == 60e-3
    assert cfg.system.trap.omega0 == 1e7


def test_override_forms_on_command_line(tmp_path):
    for flags in (["--b0", "50e-3"], ["--field.b0=50e-3"], ["--field.b0", "50e-3"]):
        code, out, _ = run(flags + ["params"], tmp_path)
        assert code == 0
        assert "50 mT" in out or "5.000000e-02" in out


def test_unknown_override_is_config_error(tmp_path):
    code, _, err = run(["--field.nonsense", "1", "params"], tmp_path)
    assert code == 2
    code, _, _ = run(["--b0", "abc", "params"], tmp_path)
    assert code == 2


def test_env_var_selects_config(tmp_path, monkeypatch):
    cfg = tmp_path / "env.cfg"
    cfg.write_text(BUNDLED.read_text().replace("b0 = 90e-3", "b0 = 40e-3"))
    monkeypatch.setenv("NVROTOR_CONFIG", str(cfg))
    assert build_run_config().system.field.b0 == 40e-3


def test_echo_revival_without_beta(tmp_path):
    code, _, _ = run(["echo", "--no-beta", "--tau-unit", "revival", "--tau-stop", "1",
                      "--tau-points", "41"], tmp_path)
    assert code == 0
    t = read_table(tmp_path / "echo.csv")
    assert t.column("p_up")[-1] >= 1 - 1e-6


def test_echo_default_grid(tmp_path):
    code, _, _ = run(["echo", "--t2", "0.5e-3", "--n_gamma", "100"], tmp_path)
    assert code == 0
    t = read_table(tmp_path / "echo.csv")
    assert len(t.rows) > 2
    assert t.column("tau_over_revival")[-1] == pytest.approx(1.2)
    p = t.column("p_up")
    assert np.all((p >= 0) & (p <= 1))


def test_echo_grid_must_start_at_zero(tmp_path):
    code, _, err = run(["echo", "--tau-start", "1e-6"], tmp_path)
    assert code == 2
    assert "tau" in err


def test_echo_above_crossing_needs_branch_flag(tmp_path):
    code, _, _ = run(["--b0", "0.15", "echo"], tmp_path)
    assert code == 3
    code, _, _ = run(["--b0", "0.15", "--branch", "negative", "echo"], tmp_path)
    assert code == 0


def test_echo_unstable_beta_is_domain_error(tmp_path):
    code, _, err = run(["--b0", "0.097", "echo"], tmp_path)
    assert code == 3
    assert "beta" in err
    code, _, _ = run(["--b0", "0.097", "echo", "--no-beta"], tmp_path)
    assert code == 0


def test_oracle_agrees_small_grid(tmp_path):
    code, out, _ = run(["--b0", "50e-3", "oracle", "--tau-points", "6"], tmp_path)
    assert code == 0
    t = read_table(tmp_path / "oracle.csv")
    assert t.column("abs_diff").max() < 1e-4


def test_oracle_zero_tolerance_never_succeeds(tmp_path):
    code, _, _ = run(["--b0", "50e-3", "oracle", "--tol", "0", "--tau-points", "3",
                      "--max-dim", "256"], tmp_path)
    assert code in (3, 4)


def test_oracle_without_squeezing(tmp_path):
    code, _, _ = run(["--rates.chi_gamma", "0", "--rates.chi_beta", "0", "oracle",
                      "--tau-points", "5"], tmp_path)
    assert code == 0
    t = read_table(tmp_path / "oracle.csv")
    assert t.column("abs_diff").max() < 1e-12


def test_figure_writes_csv(tmp_path):
    code, _, _ = run(["figure", "fig1d"], tmp_path)
    assert code == 0
    first = (tmp_path / "fig1d.csv").read_bytes()
    run(["figure", "fig1d"], tmp_path)
    assert (tmp_path / "fig1d.csv").read_bytes() == first


def test_figure_series_override(tmp_path):
    code, _, _ = run(["figure", "fig2d", "--n-gamma-series", "1,5"], tmp_path)
    assert code == 0
    names = read_table(tmp_path / "fig2d.csv").names
    assert "p_star_n_gamma=5" in names


def test_unknown_figure_lists_ids(tmp_path):
    code, _, err = run(["figure", "fig9"], tmp_path)
    assert code == 2
    assert "fig1c" in err


def test_sweep_specfile(tmp_path):
    spec = tmp_path / "s.ini"
    spec.write_text("[sweep]\nvariable = B0\nstart = 10e-3\nstop = 50e-3\npoints = 5\n"
                    "outputs = b0, delta_2pi\nname = mine\n")
    code, _, _ = run(["sweep", str(spec)], tmp_path)
    assert code == 0
    t = read_table(tmp_path / "mine.csv")
    assert t.names == ["b0", "delta_2pi", "valid"]


def test_sweep_specfile_errors(tmp_path):
    spec = tmp_path / "s.ini"
    spec.write_text("[sweep]\nvariable = B0\nstart = 10e-3\nstop = 5e-3\npoints = 5\n"
                    "outputs = b0\n")
    assert run(["sweep", str(spec)], tmp_path)[0] == 2
    assert run(["sweep", str(tmp_path / "none.ini")], tmp_path)[0] == 2
    spec.write_text("[sweep]\nvariable = B0\nstart = 1e-3\nstop = 5e-3\npoints = 5\n"
                    "outputs = b0\n[field]\nbee = 1\n")
    assert run(["sweep", str(spec)], tmp_path)[0] == 2


def test_usage_errors(tmp_path):
    assert run([], tmp_path)[0] == 2
    assert run(["bogus"], tmp_path)[0] == 2


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nvrotor.cli", "--out", str(tmp_path),
                           "params"], capture_output=True, text=True,
                          env={**os.environ, "NVROTOR_CONFIG": str(BUNDLED)})
    assert proc.returncode == 0
