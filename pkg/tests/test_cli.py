import csv
import io
import math

import numpy as np
import pytest

from collapselab.cli import analyze_nc, main
from collapselab.fileio import save_dump
from collapselab.geometry import build_simplex_etf
from collapselab.stats import LabeledFeatures, class_stats, nc1, nc2

TINY = """
[experiment]
scenario = {scenario}

[stream]
n_tasks = {n_tasks}
k_per_task = 3
d_input = 8
samples_per_class = 20

[model]
hidden_widths = 16
feature_dim = 8

[train]
steps = 60
log_every = 30

[sweep]
rho = {rho}
seeds = {seeds}

[probe]
max_iter = 50
"""


def write_config(tmp_path, name="cfg.ini", scenario="CIL", n_tasks=2, rho="0.1", seeds="0"):
    path = tmp_path / name
    path.write_text(TINY.format(scenario=scenario, n_tasks=n_tasks, rho=rho, seeds=seeds))
    return path


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_run_single_task_gives_1x1_matrix(tmp_path, capsys):
    cfg = write_config(tmp_path, n_tasks=1, rho="0")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    (point,) = [p for p in (tmp_path / "out").iterdir() if p.is_dir()]
    assert point.name == "CIL_rho0_wd0.0005_seed0"
    header, row = (point / "A.csv").read_text().splitlines()
    assert header == "session,task0"
    assert 0 <= float(row.split(",")[1]) <= 1
    assert len((point / "A_star.csv").read_text().splitlines()) == 2
    assert "mean_shallow" in capsys.readouterr().out


def test_run_is_byte_identical_across_reruns_and_jobs(tmp_path):
    cfg = write_config(tmp_path, rho="0, 0.2")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a.keys() == b.keys() and a == b


def test_sweep_makes_one_directory_per_point(tmp_path):
    cfg = write_config(tmp_path, rho="0, 0.1, 0.5", seeds="0, 1")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    dirs = [p for p in (tmp_path / "o").iterdir() if p.is_dir()]
    assert len(dirs) == 6
    for d in dirs:
        assert {"A.csv", "A_star.csv", "config.ini", "forgetting.csv", "nc5.csv", "nc_trajectory.csv", "sessions.csv"} <= {
            p.name for p in d.iterdir()
        }
    assert len((tmp_path / "o" / "summary.csv").read_text().splitlines()) == 7


def test_seed_override_and_jobs_env(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, seeds="0, 1", n_tasks=1, rho="0")
    monkeypatch.setenv("COLLAPSELAB_JOBS", "2")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed-override", "7"]) == 0
    assert [p.name for p in (tmp_path / "o").iterdir() if p.is_dir()] == ["CIL_rho0_wd0.0005_seed7"]
    monkeypatch.setenv("COLLAPSELAB_JOBS", "many")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2


def test_buffer_rows_in_feature_dumps(tmp_path):
    cfg = write_config(tmp_path, rho="0.25")
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    point = tmp_path / "o" / "CIL_rho0.25_wd0.0005_seed0"
    rows = read_csv((point / "features_session1.csv").read_text())
    buffered = [r for r in rows if r["split"] == "buffer"]
    assert len(buffered) == 15 and {r["task"] for r in buffered} == {"0"}
    assert not any(r["split"] == "buffer" for r in read_csv((point / "features_session0.csv").read_text()))


def test_run_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlr = 0.1\nbatch = 0\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "bad.ini:3" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["run", "--config", str(write_config(tmp_path)), "--jobs", "0"]) == 2


def test_analyze_etf_dump(tmp_path, capsys):
    etf = build_simplex_etf(5, 8, 2.0, rotation_seed=1)
    data = LabeledFeatures(np.repeat(etf.means.T, 3, axis=0), np.repeat(np.arange(5), 3))
    save_dump(data, tmp_path / "etf.csv")
    assert main(["analyze", str(tmp_path / "etf.csv"), "--metric", "nc"]) == 0
    (row,) = read_csv(capsys.readouterr().out)
    assert float(row["nc2_cos_std"]) < 1e-12
    assert float(row["nc2_cos_mean"]) == pytest.approx(-0.25)


def test_analyze_matches_in_memory(tmp_path, capsys, rng):
    x = rng.normal(size=(60, 4)) + np.repeat(rng.normal(scale=3, size=(3, 4)), 20, axis=0)
    data = LabeledFeatures(x, np.repeat(np.arange(3), 20))
    save_dump(data, tmp_path / "d.csv")
    main(["analyze", str(tmp_path / "d.csv"), "--metric", "nc"])
    (row,) = read_csv(capsys.readouterr().out)
    s = class_stats(data)
    assert float(row["nc1_ratio"]) == nc1(data, s)[1]
    assert float(row["nc2_cos_std"]) == nc2(s).cos_std
    header, rows = analyze_nc(data)
    assert rows[0][header.index("nc1_delta")] == float(row["nc1_delta"])
    for metric in ("snr", "nc5"):
        assert main(["analyze", str(tmp_path / "d.csv"), "--metric", metric]) == 0
    out = capsys.readouterr().out
    assert "mahalanobis_sq" in out and "nc5_vs_task0" in out


def test_analyze_gap_flags_single_sample_class(tmp_path, capsys, rng):
    pop = rng.normal(size=(20, 3))
    obs = np.r_[pop[:3], pop[10:11]]
    data = LabeledFeatures(
        np.r_[pop, obs],
        np.r_[np.repeat([0, 1], 10), [0, 0, 0, 1]],
        np.zeros(24),
        np.r_[["train"] * 20, ["buffer"] * 4],
    )
    save_dump(data, tmp_path / "g.csv")
    assert main(["analyze", str(tmp_path / "g.csv"), "--metric", "gap"]) == 0
    rows = {r["class"]: r for r in read_csv(capsys.readouterr().out)}
    assert rows["1"]["degenerate"] == "yes" and rows["1"]["n_obs"] == "1"
    assert rows["0"]["degenerate"] == "no"


def test_analyze_malformed_dump(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("task,class,split,f0\n0,0,train,1\n0,0,train,1,2\n")
    assert main(["analyze", str(tmp_path / "m.csv")]) == 1
    assert "line 3" in capsys.readouterr().err


SIM = """
[simulate]
k = 4
d = 12
eta = 0.1
lambda = {lam}
pi = {pi}
t_max = 1000
t_step = 250
n = 4000
beta_rate = 0.002
delta_rate = 0.99
"""


def simulate(tmp_path, capsys, lam, pi):
    path = tmp_path / "sim.ini"
    path.write_text(SIM.format(lam=lam, pi=pi))
    assert main(["simulate", "--config", str(path)]) == 0
    return read_csv(capsys.readouterr().out)


def test_simulate_flat_without_decay(tmp_path, capsys):
    rows = simulate(tmp_path, capsys, "0", "0")
    norms = [float(r["mean_norm_perp"]) for r in rows]
    assert max(norms) - min(norms) < 1e-12


def test_simulate_mean_norm_follows_decay(tmp_path, capsys):
    for r in simulate(tmp_path, capsys, "0.01", "0"):
        expected = 0.999 ** int(r["t"])
        assert float(r["mean_norm_perp"]) == pytest.approx(expected, rel=0.01)
        assert float(r["predicted_mean_norm_perp"]) == pytest.approx(expected, rel=1e-12)


def test_simulate_pure_collapse_snr_grows(tmp_path, capsys):
    snrs = [float(r["snr_measured"]) for r in simulate(tmp_path, capsys, "0.01", "1")]
    assert all(b > a for a, b in zip(snrs, snrs[1:]))
    assert all(math.isfinite(s) for s in snrs)


def test_simulate_rejects_unstable_decay(tmp_path, capsys):
    path = tmp_path / "sim.ini"
    path.write_text(SIM.format(lam="20", pi="0"))
    assert main(["simulate", "--config", str(path)]) == 2
    assert "eta*lambda" in capsys.readouterr().err


def test_validate_subset_passes(capsys):
    assert main(["validate", "--criteria", "1,2,3"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3


def test_validate_tampered_tolerance_fails(capsys):
    assert main(["validate", "--criteria", "3", "--set-tolerance", "3.spread=0"]) == 1
    assert "[FAIL]" in capsys.readouterr().out


def test_validate_bad_arguments():
    assert main(["validate", "--criteria", "0"]) == 2
    assert main(["validate", "--criteria", "a"]) == 2
    assert main(["validate", "--set-tolerance", "3=1"]) == 2
