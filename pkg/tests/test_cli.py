import csv
import json

import numpy as np
import pytest

from robfplm.bspline import FunctionalSample
from robfplm.cli import ingest, main, read_config, serialize
from robfplm.errors import ParseError
from robfplm.model import Dataset
from robfplm.simulation import SimulationConfig, simulate


def tecator_like(n=215, seed=0):
    rng = np.random.default_rng(seed)
    grid = np.linspace(850.0, 1050.0, 100)
    u = (grid - 850.0) / 200.0
    curves = (2.5 + rng.normal(0, 0.3, (n, 1)) + np.outer(rng.normal(size=n), np.sin(3 * u))
              + rng.normal(0, 0.01, (n, 100)))
    protein = rng.uniform(11, 21, n)
    moisture = rng.uniform(40, 76, n)
    fat = 60 - 0.7 * moisture + 0.5 * (protein - 16) ** 2 / 10 + curves[:, 40] + rng.normal(size=n)
    return Dataset(fat, FunctionalSample(grid, curves), protein, v=moisture)


@pytest.fixture
def tecator_files(tmp_path):
    ds = tecator_like()
    c, s = tmp_path / "curves.csv", tmp_path / "scalars.csv"
    serialize(ds, c, s)
    return ds, c, s


@pytest.fixture(scope="module")
def sim_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--n", "200", "--replicate", "3", "--out", str(out)]) == 0
    return out / "curves.csv", out / "scalars.csv"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_ingest_tecator_layout(tecator_files):
    ds, c, s = tecator_files
    got = ingest(c, s)
    assert got.n == 215 and got.curves.grid.size == 100
    assert got.include_intercept and got.v is not None
    assert got.t_domain == (850.0, 1050.0)
    assert got.t_map.to_unit(np.array([950.0]))[0] == 0.5


def test_round_trip_is_exact(tecator_files, tmp_path):
    ds, c, s = tecator_files
    got = ingest(c, s)
    for name in ("y", "z", "v"):
        np.testing.assert_array_equal(getattr(got, name), getattr(ds, name))
    np.testing.assert_array_equal(got.curves.values, ds.curves.values)
    w = np.random.default_rng(1).normal(size=(215, 2)) * 1e-7
    ds2 = Dataset(ds.y, ds.curves, ds.z, w=w)
    serialize(ds2, tmp_path / "c2.csv", tmp_path / "s2.csv")
    np.testing.assert_array_equal(ingest(tmp_path / "c2.csv", tmp_path / "s2.csv").w, w)


def test_empty_curves_file(tecator_files, tmp_path):
    _, _, s = tecator_files
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ParseError, match="empty.csv"):
        ingest(empty, s)


def test_extra_scalar_row(tecator_files):
    _, c, s = tecator_files
    with open(s, "a") as fh:
        fh.write("1.0,15.0,50.0\n")
    with pytest.raises(ParseError, match="215") as info:
        ingest(c, s)
    assert "216" in str(info.value)


@pytest.mark.parametrize("curves_text,needle", [
    ("0,0.5,1\n1,2,x\n", "line 2, column 3"),
    ("0,0.5,1\n1,2,nan\n", "non-finite"),
    ("0,0.7,0.5\n1,2,3\n", "strictly increasing"),
    ("0,0.5,1\n1,2\n", "expected 3 values"),
])
def test_curve_parse_errors(tmp_path, curves_text, needle):
    (tmp_path / "c.csv").write_text(curves_text)
    (tmp_path / "s.csv").write_text("y,z\n1,0.5\n")
    with pytest.raises(ParseError, match=needle):
        ingest(tmp_path / "c.csv", tmp_path / "s.csv")


@pytest.mark.parametrize("header,needle", [("y,q", "unknown column"), ("y,y,z", "duplicate"),
                                           ("z,v", "missing required")])
def test_scalar_header_errors(tmp_path, header, needle):
    (tmp_path / "c.csv").write_text("0,1\n1,2\n")
    (tmp_path / "s.csv").write_text(header + "\n" + ",".join(["1"] * len(header.split(","))) + "\n")
    with pytest.raises(ParseError, match=needle):
        ingest(tmp_path / "c.csv", tmp_path / "s.csv")


def test_fit_ls_and_mm_agree(sim_files, tmp_path, capsys):
    c, s = sim_files
    grids = {}
    for est in ("ls", "mm"):
        out = tmp_path / est
        code, stdout, _ = run(["fit", "--curves", c, "--scalars", s, "--estimator", est,
                               "--p1", 5, "--p2", 8, "--monotone", "--out", out], capsys)
        assert code == 0 and json.loads(stdout)["status"] == "ok"
        beta = np.loadtxt(out / "beta.csv", delimiter=",", skiprows=1)
        grids[est] = beta[:, 1]
        header = open(out / "eta.csv").readline().strip().split(",")
        assert header == ["z", "eta", "eta_mod"]
        payload = json.load(open(out / "fit.json"))
        assert payload["p1"] == 5 and payload["fit"]["estimator"] == est
    assert np.corrcoef(grids["ls"], grids["mm"])[0, 1] > 0.9


def test_select_writes_table(sim_files, tmp_path, capsys):
    c, s = sim_files
    code, stdout, _ = run(["select", "--curves", c, "--scalars", s, "--estimator", "ls",
                           "--grid", "4:6", "--out", tmp_path], capsys)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "rbic_table.csv")))
    assert rows[0] == ["p1", "p2", "rbic"] and len(rows) == 10
    best = min(rows[1:], key=lambda r: float(r[2]))
    res = json.loads(stdout)
    assert (res["p1"], res["p2"]) == (int(best[0]), int(best[1]))


def test_predict_from_saved_fit(sim_files, tmp_path, capsys):
    c, s = sim_files
    assert run(["fit", "--curves", c, "--scalars", s, "--estimator", "m", "--p1", 5,
                "--p2", 6, "--out", tmp_path], capsys)[0] == 0
    code, _, _ = run(["predict", "--curves", c, "--scalars", s, "--fit", tmp_path / "fit.json",
                      "--out", tmp_path], capsys)
    assert code == 0
    fit = json.load(open(tmp_path / "fit.json"))["fit"]
    pred = json.load(open(tmp_path / "predict.json"))["predictions"]
    y = ingest(c, s).y
    np.testing.assert_allclose(y - np.array(pred), fit["residuals"], atol=1e-10)


def test_predict_train_test(tecator_files, tmp_path, capsys):
    _, c, s = tecator_files
    code, stdout, _ = run(["predict", "--curves", c, "--scalars", s, "--train-size", 155,
                           "--p1", 5, "--p2", 5, "--n-subsamples", 200, "--out", tmp_path], capsys)
    assert code == 0
    payload = json.load(open(tmp_path / "predict.json"))
    assert payload["n_train"] == 155 and payload["n_test"] == 60
    for est in ("ls", "m_huber", "mm", "ls_minus_out"):
        m = payload["metrics"][est]
        assert {"mspe", "medspe", "mspe_clean"} <= set(m)
        assert all(np.isfinite(m[k]) for k in ("mspe", "medspe", "mspe_clean"))


def test_simulate_writes_truth(tmp_path, capsys):
    code, stdout, _ = run(["simulate", "--scenario", "c2", "--mu", 12, "--n", 100,
                           "--out", tmp_path], capsys)
    assert code == 0
    truth = json.load(open(tmp_path / "truth.json"))
    assert len(truth["contaminated"]) == json.loads(stdout)["contaminated"]
    ds = ingest(tmp_path / "curves.csv", tmp_path / "scalars.csv")
    ref, _ = simulate(SimulationConfig(n=100, scenario="c2", mu=12.0), 0)
    np.testing.assert_array_equal(ds.y, ref.y)


def test_montecarlo_smoke(tmp_path, capsys):
    code, _, _ = run(["montecarlo", "--scenario", "c2", "--mu", 12, "--reps", 10,
                      "--n", 80, "--grid", "4:5", "--n-subsamples", 100,
                      "--write-grids", "--out", tmp_path], capsys)
    assert code == 0
    report = json.load(open(tmp_path / "report.json"))
    assert len(report["metrics"]) == 3 * 3 * 4
    assert all(np.isfinite(m["value"]) for m in report["metrics"])
    assert len(list((tmp_path / "grids").iterdir())) == 9


def test_reproducible_outputs(sim_files, tmp_path, capsys):
    c, s = sim_files
    for k in ("a", "b"):
        assert run(["fit", "--curves", c, "--scalars", s, "--p1", 5, "--p2", 6, "--seed", 3,
                    "--out", tmp_path / k], capsys)[0] == 0
    for name in ("fit.json", "beta.csv", "eta.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_file_and_precedence(sim_files, tmp_path, capsys):
    c, s = sim_files
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# defaults\ncurves = {c}\nscalars = {s}\nestimator = ls\n"
                   "p1 = 4\np2 = 6\nmonotone = true\n")
    assert run(["fit", "--config", cfg, "--out", tmp_path / "a"], capsys)[0] == 0
    assert json.load(open(tmp_path / "a" / "fit.json"))["p1"] == 4
    assert "eta_mod" in open(tmp_path / "a" / "eta.csv").readline()
    assert run(["fit", "--config", cfg, "--p1", 6, "--out", tmp_path / "b"], capsys)[0] == 0
    payload = json.load(open(tmp_path / "b" / "fit.json"))
    assert payload["p1"] == 6 and payload["estimator"] == "ls"


def test_read_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("estimator mm\n")
    with pytest.raises(ValueError, match="line 1"):
        read_config(bad)


@pytest.mark.parametrize("argv,code,err", [
    (["fit", "--curves", "a", "--scalars", "b", "--p1", "5", "--p2", "5", "--c1", "-1"],
     2, "invalid_config"),
    (["fit", "--curves", "a", "--scalars", "b"], 2, "invalid_config"),
    (["fit", "--curves", "/nonexistent.csv", "--scalars", "b", "--p1", "5", "--p2", "5"],
     2, "parse_error"),
    (["simulate", "--scenario", "c1"], 2, "invalid_config"),
    (["montecarlo", "--reps", "0"], 2, "invalid_config"),
    (["predict", "--curves", "a", "--scalars", "b", "--p1", "5", "--p2", "5"], 2, "invalid_config"),
    ([], 2, "invalid_config"),
])
def test_error_json(argv, code, err, capsys):
    got, out, stderr = run(argv, capsys)
    assert got == code
    payload = json.loads(stderr)
    assert payload["error"] == err and payload["message"]
    assert out == ""


def test_model_error_exit_code(sim_files, tmp_path, capsys):
    c, s = sim_files
    got, _, stderr = run(["fit", "--curves", c, "--scalars", s, "--p1", 100, "--p2", 100,
                          "--out", tmp_path], capsys)
    assert got == 1
    assert json.loads(stderr)["error"] == "insufficient_data"
