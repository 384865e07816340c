"""Command line front end: artifacts, exit codes, byte-stable reruns."""

import numpy as np

from penmfg.cli import main

BASE = """\
[run]
command = simulate
seed = 5

[domain]
kind = box
lower = 0
upper = 1

[model]
preset = lq_control
sigma = 0.4
horizon = 0.25
c = 1.0
gamma = 0.5
x0 = 0.4

[sim]
n_particles = 60
dt = 0.025
scheme = reflected_projected

[dp]
hx = 0.05

[fixed_point]
damping = 0.5
max_iters = 6
tol = 0.05
"""


def write_cfg(tmp_path, text=BASE, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def run_cli(*argv):
    return main(list(argv))


def test_simulate_writes_expected_artifacts(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "sim"
    assert run_cli("simulate", "--config", cfg, "--out", str(out)) == 0
    for name in ("paths.csv", "flow.csv", "report.txt", "manifest.txt"):
        assert (out / name).exists()
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[0] == "t,particle,x_1,k_1,kvar"
    assert len(lines) == 1 + 60 * (10 + 1)  # header + N * (M+1)
    manifest = (out / "manifest.txt").read_text()
    assert "seed = 5" in manifest and "config_sha256 = " in manifest


def test_identical_runs_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("simulate", "--config", cfg, "--out", str(out_a)) == 0
    assert run_cli("simulate", "--config", cfg, "--out", str(out_b)) == 0
    for name in ("paths.csv", "flow.csv", "report.txt", "manifest.txt"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_seed_flag_changes_the_draws(tmp_path):
    cfg = write_cfg(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("simulate", "--config", cfg, "--out", str(out_a)) == 0
    assert run_cli("simulate", "--config", cfg, "--out", str(out_b),
                   "--seed", "99") == 0
    assert (out_a / "paths.csv").read_bytes() \
        != (out_b / "paths.csv").read_bytes()
    assert "seed = 99" in (out_b / "manifest.txt").read_text()


def test_cost_command_reports_breakdown(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "cost"
    assert run_cli("cost", "--config", cfg, "--out", str(out)) == 0
    report = (out / "report.txt").read_text()
    for token in ("cost ", "running", "boundary", "terminal"):
        assert token in report


def test_dp_command_writes_value_table(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "dp"
    assert run_cli("dp", "--config", cfg, "--out", str(out)) == 0
    lines = (out / "value.csv").read_text().splitlines()
    assert lines[0] == "t,x_1,value,u_index"
    assert len(lines) == 1 + (10 + 1) * 21
    assert lines[-1].endswith(",-1")  # terminal slice has no control


def test_equilibrium_exit_codes(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "eq"
    assert run_cli("equilibrium", "--config", cfg, "--out", str(out)) == 0
    assert (out / "flow.csv").exists() and (out / "value.csv").exists()
    assert "converged True" in (out / "report.txt").read_text()
    out2 = tmp_path / "eq0"
    code = run_cli("equilibrium", "--config", cfg, "--out", str(out2),
                   "--override", "fixed_point.max_iters=0")
    assert code == 2
    assert "NOT CONVERGED" in (out2 / "report.txt").read_text()


def test_sweep_writes_rows_plus_reference(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "sweep"
    assert run_cli("sweep-n", "--config", cfg, "--out", str(out),
                   "--override", "sweep.n_list=8 32") == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 + 1  # header, two levels, reference
    assert lines[0].startswith("penalty,converged,")
    assert lines[1].startswith("8,") and lines[2].startswith("32,")
    assert lines[3].startswith("ref,")


def test_chatter_command(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "chat"
    assert run_cli("chatter", "--config", cfg, "--out", str(out),
                   "--override", "sim.dt=0.0125",
                   "--override", "sweep.deltas=0.1 0.05",
                   "--override", "sweep.n0=2",
                   "--override", "sweep.epsilon=0.25") == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("delta,penalty,control_distance,")
    assert len(lines) == 3
    d = [float(line.split(",")[2]) for line in lines[1:]]
    assert d[1] < d[0]


def test_chatter_rejects_penalized_base(tmp_path, capsys):
    text = BASE.replace("scheme = reflected_projected",
                        "scheme = penalized_splitting\npenalty = 64")
    cfg = write_cfg(tmp_path, text)
    assert run_cli("chatter", "--config", cfg,
                   "--out", str(tmp_path / "x")) == 1
    assert "reflected" in capsys.readouterr().err


def test_diagnose_command(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "diag"
    assert run_cli("diagnose", "--config", cfg, "--out", str(out)) == 0
    report = (out / "report.txt").read_text()
    assert "growth constants" in report
    assert "lq_control" in report or "sigma" in report


def test_parse_error_exits_one_with_line_number(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE + "nonsense = 7\n")
    assert run_cli("simulate", "--config", cfg,
                   "--out", str(tmp_path / "x")) == 1
    err = capsys.readouterr().err
    assert "nonsense" in err and "line" in err


def test_dp_without_grid_section_fails_cleanly(tmp_path, capsys):
    text = BASE.replace("[dp]\nhx = 0.05\n\n", "")
    cfg = write_cfg(tmp_path, text)
    assert run_cli("dp", "--config", cfg, "--out", str(tmp_path / "x")) == 1
    assert "hx" in capsys.readouterr().err


def test_command_defaults_to_config_value(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "implied"
    assert run_cli("--config", cfg, "--out", str(out)) == 0
    assert (out / "paths.csv").exists()  # [run] command = simulate


def test_overrides_change_artifacts(tmp_path):
    cfg = write_cfg(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("simulate", "--config", cfg, "--out", str(out_a)) == 0
    assert run_cli("simulate", "--config", cfg, "--out", str(out_b),
                   "--override", "model.sigma=0.8") == 0
    xa = np.loadtxt(out_a / "paths.csv", delimiter=",", skiprows=1)
    xb = np.loadtxt(out_b / "paths.csv", delimiter=",", skiprows=1)
    assert xa.shape == xb.shape
    assert not np.allclose(xa[:, 2], xb[:, 2])
