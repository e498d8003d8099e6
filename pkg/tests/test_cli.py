import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from catfuse.cli import SCHEMA_VERSION, canonical, main

ROLES = {
    "color": "categorical",
    "shape": "categorical",
    "region": "categorical",
    "y": "response",
    "clicked": "response",
    "note": "ignore",
}


def write_data(path, n=300, seed=1):
    rng = np.random.default_rng(seed)
    a, b, g = rng.integers(0, 6, n), rng.integers(0, 4, n), rng.integers(0, 2, n)
    eff = np.array([-2, -2, 0, 0, 2, 2.0])
    y = eff[a] + rng.normal(0, 1, n)
    clicked = (eff[a] + rng.normal(0, 1, n) > 0).astype(int)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ROLES))
        for i in range(n):
            w.writerow([f"c{a[i]}", f"s{b[i]}", ["north", "south"][g[i]], f"{y[i]:.6f}", clicked[i], 'free, "text"'])


@pytest.fixture
def workspace(tmp_path):
    write_data(tmp_path / "data.csv")
    (tmp_path / "config.json").write_text(json.dumps({"columns": ROLES, "lambda": 1.0, "seed": 3}))
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_fit_report_contents(workspace):
    out = workspace / "fit.json"
    assert run("fit", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--output", out, "--coef-csv", workspace / "coef.csv") == 0
    rep = json.loads(out.read_text())
    assert rep["schema_version"] == SCHEMA_VERSION and "created_at" in rep
    assert [r["name"] for r in rep["responses"]] == ["y", "clicked"]
    r = rep["responses"][0]
    assert set(r["coefficients"]) == {"color", "shape", "region"}
    assert set(r["coefficients"]["color"]) == {f"c{k}" for k in range(6)}
    assert r["active"] == ["color"]
    assert sorted(map(sorted, r["groups"]["color"])) == [["c0", "c1"], ["c2", "c3"], ["c4", "c5"]]
    assert isinstance(r["objective"], float) and r["converged"] is True
    with open(workspace / "coef.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["level", "predictor", "response", "coefficient", "group_id"]
    assert len(rows) == 2 * (6 + 4 + 2)


def test_fit_deterministic(workspace):
    args = ["fit", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--test-fraction", "0.3"]
    run(*args, "--output", workspace / "a.json")
    run(*args, "--output", workspace / "b.json")
    a, b = (json.loads((workspace / f).read_text()) for f in ("a.json", "b.json"))
    assert canonical(a) == canonical(b)


def test_split_by_and_misclassification(workspace):
    out = workspace / "split.json"
    assert run("fit", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--split-by", "region", "--test-fraction", "0.5", "--output", out) == 0
    reports = sorted(workspace.glob("split_*.json"))
    assert [p.name for p in reports] == ["split_north.json", "split_south.json"]
    for p in reports:
        rep = json.loads(p.read_text())
        assert rep["split_by"] == "region"
        assert "region" not in rep["responses"][0]["coefficients"]
        ev = {r["name"]: r for r in rep["evaluation"]["responses"]}
        assert "misclassification" not in ev["y"]
        assert 0 <= ev["clicked"]["misclassification"] <= 0.5


def test_null_model_misclassification(tmp_path):
    rng = np.random.default_rng(0)
    n = 200
    with open(tmp_path / "d.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "b"])
        for i in range(n):
            w.writerow(["k", int(rng.random() < 0.3)])
    cfg = {"columns": {"x": "categorical", "b": "response"}, "lambda": 1.0}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("fit", "--config", tmp_path / "c.json", "--input", tmp_path / "d.csv", "--test-fraction", "0.5", "--output", tmp_path / "o.json") == 0
    rep = json.loads((tmp_path / "o.json").read_text())
    p_hat = rep["responses"][0]["intercept"]
    rows = list(csv.DictReader(open(tmp_path / "d.csv")))
    perm = np.random.default_rng(0).permutation(n)
    y_test = np.array([float(rows[i]["b"]) for i in perm[:100]])
    expected = np.mean(y_test != (1.0 if p_hat >= 0.5 else 0.0))
    assert rep["evaluation"]["responses"][0]["misclassification"] == pytest.approx(expected)
    assert expected == pytest.approx(min(y_test.mean(), 1 - y_test.mean()))


def test_cv_command(workspace):
    out = workspace / "cv.json"
    assert run("cv", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--lambda", "0.5,1,2", "--folds", "3", "--output", out) == 0
    rep = json.loads(out.read_text())
    assert rep["cross_validation"]["grid"] == [2.0, 1.0, 0.5]
    assert len(rep["lambda_multiplier"]) == 2


def test_predict_unseen_levels(workspace, capsys):
    run("fit", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--output", workspace / "fit.json")
    lines = (workspace / "data.csv").read_text().splitlines()
    new = [lines[0], lines[1].replace("c", "zz", 1), lines[2]]
    (workspace / "new.csv").write_text("\n".join(new) + "\n")
    assert run("predict", "--report", workspace / "fit.json", "--input", workspace / "new.csv", "--output", workspace / "pred.json") == 0
    assert "1 cell(s)" in capsys.readouterr().err
    pred = json.loads((workspace / "pred.json").read_text())
    fit = json.loads((workspace / "fit.json").read_text())
    assert pred["unseen_level_cells"] == 1
    r = fit["responses"][0]
    row = next(csv.reader([new[1]]))
    expected = r["intercept"] + r["coefficients"]["shape"][row[1]] + r["coefficients"]["region"][row[2]]
    assert pred["predictions"]["y"][0] == pytest.approx(expected)


def test_predict_rejects_newer_schema(workspace, capsys):
    run("fit", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--output", workspace / "fit.json")
    rep = json.loads((workspace / "fit.json").read_text())
    rep["schema_version"] = SCHEMA_VERSION + 1
    (workspace / "v.json").write_text(json.dumps(rep))
    code = run("predict", "--report", workspace / "v.json", "--input", workspace / "data.csv")
    assert code != 0 and "newer" in capsys.readouterr().err


def test_diagnose_and_simulate(workspace):
    run("fit", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--output", workspace / "fit.json", "--coef-csv", workspace / "coef.csv")
    assert run("diagnose", "--config", workspace / "config.json", "--input", workspace / "data.csv", "--truth", workspace / "coef.csv", "--output", workspace / "diag.json") == 0
    diag = json.loads((workspace / "diag.json").read_text())["diagnostics"]
    assert diag["s"][0][0] == 3
    (workspace / "sim.json").write_text(json.dumps({"scenario": {"n": 80, "p": 4, "replications": 1, "lambda_grid": [1.0], "folds": 2}}))
    assert run("simulate", "--config", workspace / "sim.json", "--mode", "one-pass", "--seed", "4", "--output", workspace / "s.json") == 0
    rep = json.loads((workspace / "s.json").read_text())
    assert rep["mode"] == "one_pass" and rep["spec"]["base_seed"] == 4 and len(rep["rows"]) == 2


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda c: c["columns"].update({"missing": "response"}), "unknown column"),
        (lambda c: c["columns"].update({"region": "response"}), "not numeric"),
        (lambda c: c.update({"bogus": 1}), "unknown config entry"),
    ],
)
def test_config_errors(workspace, capsys, mutate, fragment):
    cfg = json.loads((workspace / "config.json").read_text())
    mutate(cfg)
    (workspace / "bad.json").write_text(json.dumps(cfg))
    assert run("fit", "--config", workspace / "bad.json", "--input", workspace / "data.csv") != 0
    assert fragment in capsys.readouterr().err


def test_error_codes_are_distinct(workspace, capsys):
    (workspace / "broken.json").write_text("{nope")
    codes = {
        "config": run("fit", "--config", workspace / "broken.json", "--input", workspace / "data.csv"),
        "input": run("fit", "--config", workspace / "config.json", "--input", workspace / "absent.csv"),
    }
    err = capsys.readouterr().err
    assert "not valid JSON" in err and "cannot read input" in err
    assert all(c != 0 for c in codes.values()) and len(set(codes.values())) == 2


def test_no_traceback_on_failure(workspace):
    proc = subprocess.run(
        [sys.executable, "-m", "catfuse", "fit", "--config", str(workspace / "config.json"), "--input", str(workspace / "absent.csv")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode != 0
    assert proc.stderr.startswith("error:") and "Traceback" not in proc.stderr
