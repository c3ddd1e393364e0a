import json
import math
import subprocess
import sys

import pytest

from conftest import VALID_ROW, csv_text
from pathloss_lab.cli import main
from pathloss_lab.regression import variance_reduction


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A full synth -> clean -> fit -> anova -> residuals -> report run."""
    d = tmp_path_factory.mktemp("run")
    spec = d / "synth.json"
    spec.write_text(json.dumps({"n": 4000, "seed": 5}))
    assert main(["synth", "--spec", str(spec), "--out-dir", str(d / "data")]) == 0
    assert (
        main(
            [
                "clean",
                "--input", str(d / "data/measurements.csv"),
                "--links", str(d / "data/links.json"),
                "--sf", "7:10",
                "--contamination", "0.01",
                "--seed", "42",
                "--out", str(d / "clean.csv"),
            ]
        )
        == 0
    )
    fit_args = [
        "fit",
        "--input", str(d / "clean.csv"),
        "--links", str(d / "data/links.json"),
        "--radio", str(d / "data/radio.json"),
        "--solver", "lm",
        "--cv", "5",
        "--seed", "42",
        "--out", str(d / "fit.json"),
    ]
    assert main(fit_args) == 0
    assert main(["anova", "--fit", str(d / "fit.json"), "--out", str(d / "anova.json")]) == 0
    assert (
        main(
            [
                "residuals", "--fit", str(d / "fit.json"),
                "--gmm-components", "1:5", "--restarts", "2",
                "--out-dir", str(d / "resid"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "report", "--fit", str(d / "fit.json"),
                "--clean-summary", str(d / "clean.summary.json"),
                "--anova", str(d / "anova.json"),
                "--residuals", str(d / "resid/residuals.json"),
                "--out", str(d / "report.json"),
            ]
        )
        == 0
    )
    return d, fit_args


def load(path):
    return json.loads(path.read_text())


def test_clean_summary(run_dir):
    d, _ = run_dir
    s = load(d / "clean.summary.json")
    assert s["rows_in"] == 4000
    assert s["outliers_flagged"] == 40
    assert s["rows_out"] == 3960
    assert len(s["input"]["sha256"]) == 64


def test_fit_report(run_dir):
    d, _ = run_dir
    f = load(d / "fit.json")
    assert f["environment"]["fit"]["solver"] == "lm"
    assert len(f["environment"]["cv"]["folds"]) == 5
    assert f["baseline"]["spec"]["include_environment"] is False
    assert "co2" not in f["baseline"]["fit"]["coefficients"]
    assert (d / f["residuals_csv"]).exists()
    assert f["seed"] == 42 and f["schema_version"] == 1


def test_fit_is_reproducible(run_dir, tmp_path):
    d, args = run_dir
    args = list(args)
    args[args.index("--out") + 1] = str(tmp_path / "again.json")
    assert main(args) == 0

    def strip(obj):
        obj = dict(obj)
        obj.pop("timings_s")
        obj.pop("residuals_csv")
        return obj

    assert strip(load(tmp_path / "again.json")) == strip(load(d / "fit.json"))


def test_anova_table(run_dir):
    d, _ = run_dir
    a = load(d / "anova.json")
    assert a["type"] == "II"
    for row in a["rows"]:
        if row["t_value"] is not None:
            assert row["F_statistic"] == pytest.approx(row["t_value"] ** 2, rel=1e-6)


def test_residual_outputs(run_dir):
    d, _ = run_dir
    r = load(d / "resid/residuals.json")
    table = r["distributions"]["table"]
    assert len(table) == 5
    families = {row["family"] for row in table}
    assert families == {"normal", "skew_normal", "cauchy", "student_t", "gmm"}
    gmm = next(row for row in table if row["family"] == "gmm")
    assert 1 <= gmm["components"] <= 5
    assert len(r["gmm_scan"]) == 5
    for label, name in r["plots"]["qq"].items():
        lines = (d / "resid" / name).read_text().splitlines()
        assert lines[0] == "theoretical,empirical" and len(lines) > 100
    assert (d / "resid/histogram.csv").read_text().startswith("bin_center,bin_width,density")
    assert r["diagnostics"]["kurtosis"] > 0


def test_report(run_dir):
    d, _ = run_dir
    rep = load(d / "report.json")
    vr = rep["variance_reduction"]
    assert vr["percent"] == pytest.approx(variance_reduction(vr["r2_baseline"], vr["r2_environment"]), rel=1e-12)
    assert rep["seeds"]["fit"] == 42 and rep["seeds"]["clean"] == 42
    assert rep["winner"] is not None
    assert rep["cleaning"]["rows_out"] == 3960
    assert "measurements" in rep["input_digests"]


def test_missing_input_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["clean", "--out", "x.csv"])
    assert exc.value.code == 1


def test_strict_bad_row_exit_2(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(csv_text(VALID_ROW, VALID_ROW.replace(",ED1,", ",,")))
    assert main(["clean", "--input", str(raw), "--strict", "--out", str(tmp_path / "c.csv")]) == 2
    assert main(["clean", "--input", str(raw), "--out", str(tmp_path / "c.csv")]) == 0


def test_missing_upstream_named(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["anova", "--fit", str(missing), "--out", str(tmp_path / "a.json")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_io_error_exit_3(run_dir, tmp_path):
    d, _ = run_dir
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["synth", "--n", "20", "--out-dir", str(blocker / "sub")])
    assert code == 3


def test_unknown_device_in_fit(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(csv_text(*[VALID_ROW.replace("12:00:00", f"12:00:{i:02d}") for i in range(20)]))
    links = tmp_path / "links.json"
    links.write_text(json.dumps([{"device_id": "ED2", "distance_m": 5}]))
    assert main(["fit", "--input", str(raw), "--links", str(links), "--out", str(tmp_path / "f.json")]) == 2


def test_threads_env_does_not_change_fit(run_dir, tmp_path, monkeypatch):
    d, args = run_dir
    args = list(args)
    args[args.index("--out") + 1] = str(tmp_path / "t.json")
    monkeypatch.setenv("PATHLOSS_LAB_THREADS", "3")
    assert main(args) == 0
    a, b = load(tmp_path / "t.json"), load(d / "fit.json")
    assert a["environment"]["cv"] == b["environment"]["cv"]


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "pathloss_lab.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "0.1.0" in out.stdout
