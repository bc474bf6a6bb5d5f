import json
import subprocess
import sys

import numpy as np
import pytest

from masub.cli import main
from masub.model import LogisticModel
from masub.moments import XYMoment
from masub.sampling import derive_seed, uniform_plan, unit_uniform

from oracles import gmm_lstsq_step, irls_logistic, naive_assembly


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("--seed", 3, "--out", out, "gen-data", "--model", "logistic", "--N", 20000) == 0
    return out / "data.csv"


def test_gen_data_layout(tmp_path):
    assert run("--seed", 1, "--out", tmp_path, "gen-data", "--model", "logistic", "--N", 1000) == 0
    lines = (tmp_path / "data.csv").read_text().splitlines()
    assert len(lines) == 1001
    assert lines[0] == "y," + ",".join(f"x{j}" for j in range(1, 10))
    assert all(len(line.split(",")) == 10 for line in lines[1:])


def test_gen_data_byte_identical(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run("--seed", 4, "--out", tmp_path, "gen-data", "--model", "weibull", "--p", 2,
                   "--N", 300, "--output", name) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_gen_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("--out", blocker / "sub", "gen-data", "--model", "logistic", "--N", 10) == 2
    assert "error" in capsys.readouterr().err


def test_fit_round_trip(generated, tmp_path, capsys):
    code = run("--seed", 7, "--threads", 2, "--out", tmp_path, "fit", "--model", "logistic", "--data", generated,
               "--response", "y", "--n", 2000, "--pilot", 200, "--estimator", "uni", "--moment", "opt")
    captured = capsys.readouterr()
    assert code == 0
    assert "warning" not in captured.err
    doc = json.loads((tmp_path / "result.json").read_text())
    assert doc["schema"] == 1 and doc["estimator"] == "UNI-MAS-OPT"
    assert doc["covariates"] == [f"x{j}" for j in range(1, 10)]
    assert len(doc["theta_mas"]) == 10 and all(s > 0 for s in doc["std_errors"])
    assert np.all(np.abs(np.array(doc["theta_mas"]) - np.r_[0.0, np.full(9, 0.2)])
                  < 6 * np.array(doc["std_errors"]))
    assert "theta_mas" in captured.out and "UNI-MAS-OPT" in captured.out


def test_fit_is_deterministic_across_threads(generated, tmp_path):
    docs = []
    for threads in (1, 3):
        out = tmp_path / str(threads)
        assert run("--seed", 2, "--threads", threads, "--out", out, "fit", "--model", "logistic", "--data",
                   generated, "--response", "y", "--n", 1500, "--estimator", "mscl") == 0
        docs.append(json.loads((out / "result.json").read_text()))
    assert docs[0]["theta_mas"] == docs[1]["theta_mas"]


def test_missing_response(generated, tmp_path, capsys):
    assert run("--out", tmp_path, "fit", "--model", "logistic", "--data", generated,
               "--response", "outcome", "--n", 100) == 2
    assert "outcome" in capsys.readouterr().err


def test_bad_labels_rejected(tmp_path, capsys):
    path = tmp_path / "d.csv"
    path.write_text("y,x1\n0,0.1\n2,0.3\n1,0.2\n")
    assert run("--out", tmp_path, "fit", "--model", "logistic", "--data", path, "--response", "y",
               "--n", 2, "--pilot", 0, "--moment", "xy") == 2
    assert "d.csv:2-4" in capsys.readouterr().err


def test_malformed_row(tmp_path, capsys):
    path = tmp_path / "d.csv"
    path.write_text("y,x1\n0,0.1\n1,abc\n")
    assert run("--out", tmp_path, "fit", "--model", "logistic", "--data", path, "--response", "y",
               "--n", 1, "--pilot", 0, "--moment", "xy") == 2
    assert "d.csv:3" in capsys.readouterr().err


def test_separable_data_exit_3(tmp_path, capsys):
    x = np.linspace(-1, 1, 400)
    path = tmp_path / "sep.csv"
    np.savetxt(path, np.column_stack([(x > 0).astype(int), x]), delimiter=",", header="y,x1",
               comments="", fmt="%.10g")
    assert run("--out", tmp_path, "fit", "--model", "logistic", "--data", path, "--response", "y",
               "--n", 200, "--pilot", 0, "--moment", "xy") == 3
    assert "Separation" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, generated, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "logistic", "learning_rate": 0.1}))
    assert run("--config", cfg, "--out", tmp_path, "fit", "--data", generated, "--response", "y",
               "--n", 100) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_config_values_used(tmp_path, generated):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "logistic", "data": str(generated), "response": "y", "n": 800,
                               "estimator": "ipw", "moment": "xy", "seed": 5}))
    assert run("--config", cfg, "--out", tmp_path, "fit") == 0
    doc = json.loads((tmp_path / "result.json").read_text())
    assert doc["estimator"] == "IPW-MAS-XY" and doc["diagnostics"]["seed"] == 5


TEN_X = np.array([[-0.9, 0.3], [-0.5, -0.7], [-0.2, 0.8], [0.1, -0.1], [0.4, 0.6], [0.7, -0.4],
                  [0.9, 0.2], [-0.6, 0.5], [0.3, -0.9], [0.0, 0.0]])
TEN_Y = np.array([1, 0, 0, 1, 1, 0, 1, 0, 1, 0.0])


def test_ten_row_fit_matches_hand_trace(tmp_path):
    path = tmp_path / "ten.csv"
    np.savetxt(path, np.column_stack([TEN_X, TEN_Y]), delimiter=",", header="x1,x2,y", comments="",
               fmt="%.17g")
    seed = 13
    assert run("--seed", seed, "--out", tmp_path, "fit", "--model", "logistic", "--data", path,
               "--response", "y", "--n", 5, "--pilot", 0, "--estimator", "uni", "--moment", "xy") == 0
    doc = json.loads((tmp_path / "result.json").read_text())

    # Without a pilot the whole file is the population; each record is kept at rate 5/10.
    keep = unit_uniform(derive_seed(seed, "main"), np.arange(10)) < 0.5
    assert keep.sum() == 7
    Xs, ys = TEN_X[keep], TEN_Y[keep]
    theta_tilde = irls_logistic(Xs, ys)
    mu = (TEN_Y[:, None] * TEN_X).mean(0)
    plan = uniform_plan(5, 10)
    g, G, Om = naive_assembly("uni", LogisticModel(2), plan, XYMoment(2), mu, theta_tilde, Xs, ys,
                              np.full(7, 0.5), 5)
    expect = gmm_lstsq_step(theta_tilde, g, G, Om)
    np.testing.assert_allclose(doc["theta_tilde"], theta_tilde, rtol=0, atol=1e-10)
    np.testing.assert_allclose(doc["theta_mas"], expect, rtol=0, atol=1e-10)


SIM_ARGS = ("simulate", "--scenario", "logistic-paper", "--desk", "--replications", 12, "--n", 2000)


def test_simulate_shape_and_repeatability(tmp_path):
    for sub, threads in (("a", 1), ("b", 2)):
        assert run("--seed", 1, "--threads", threads, "--out", tmp_path / sub, *SIM_ARGS, "--svg") == 0
    body = (tmp_path / "a" / "report.csv").read_bytes()
    assert body == (tmp_path / "b" / "report.csv").read_bytes()
    lines = body.decode().splitlines()
    assert len(lines) == 1 + 9 * 10
    assert len({line.split(",")[0] for line in lines[1:]}) == 9
    meta = json.loads((tmp_path / "a" / "report_meta.json").read_text())
    assert meta["config"]["replications"] == 12 and len(meta["seeds"]) == 12
    assert (tmp_path / "a" / "rmse.svg").exists()


def test_simulate_bad_scenario(tmp_path, capsys):
    assert run("--out", tmp_path, "simulate", "--scenario", "airline") == 2
    assert "airline" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "masub", "--out", str(tmp_path), "gen-data", "--model",
                           "logistic", "--p", "2", "--N", "5"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len((tmp_path / "data.csv").read_text().splitlines()) == 6
