import json
import shutil

import numpy as np
import pytest

from hpfr import artifact
from hpfr.cli import EXIT_ERROR, EXIT_NONCONVERGED, EXIT_OK, main
from hpfr.sample import sample_paths


@pytest.fixture
def workdir(tmp_path):
    for p in sample_paths():
        shutil.copy(p, tmp_path / p.name)
    return tmp_path


def _config(workdir, **sections):
    """Sample config with some keys replaced."""
    import configparser
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read(workdir / "renal_like.ini")
    for sec, kv in sections.items():
        if not cp.has_section(sec):
            cp.add_section(sec)
        for k, v in kv.items():
            cp.set(sec, k, v)
    path = workdir / "run.ini"
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def _read_csv(path):
    import csv
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_predict_roundtrip(workdir):
    cfg = _config(workdir, fit={"change_ratio": "no"})
    out = workdir / "out"
    assert main(["fit", "--config", str(cfg), "--family", "T", "--out", str(out)]) == EXIT_OK
    for name in ("fit.json", "params.csv", "subjects.csv", "trace.csv"):
        assert (out / name).is_file()
    params = {r["name"]: r for r in _read_csv(out / "params.csv")}
    for name in ("gamma[dose]", "gamma[dose2]", "v0", "w[0]", "phi_b[0]", "phi_eps", "nu"):
        assert float(params[name]["estimate"]) == float(params[name]["estimate"])
        assert float(params[name]["std_error"]) > 0
    subjects = _read_csv(out / "subjects.csv")
    assert len(subjects) == 40
    trace = [float(r["loglik"]) for r in _read_csv(out / "trace.csv")]
    assert np.all(np.diff(trace) >= -1e-8 * abs(trace[-1]))

    assert main(["predict", "--config", str(cfg), "--fit", str(out / "fit.json"),
                 "--out", str(out), "--seed", "3"]) == EXIT_OK
    rows = _read_csv(out / "predictions.csv")
    assert len(rows) == 80
    cols = list(rows[0])
    assert cols[:4] == ["id", "t", "mean", "variance"]
    assert len(cols) == 4 + 3 * 6
    r = rows[0]
    assert float(r["BTS_lo95"]) < float(r["mean"]) < float(r["BTS_hi95"])
    assert r["BTS_lo95"] != r["PL1_lo95"]
    first = (out / "predictions.csv").read_bytes()
    main(["predict", "--config", str(cfg), "--fit", str(out / "fit.json"), "--out", str(out),
          "--seed", "3"])
    assert (out / "predictions.csv").read_bytes() == first


def test_gaussian_prediction_at_training_points_reproduces_y(workdir):
    cfg = _config(workdir, predict={"targets": "observed", "methods": "PL0"},
                  fit={"change_ratio": "no", "information": "no"})
    out = workdir / "out"
    assert main(["fit", "--config", str(cfg), "--family", "N", "--out", str(out)]) == EXIT_OK
    assert main(["predict", "--config", str(cfg), "--fit", str(out / "fit.json"),
                 "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out / "predictions.csv")
    data = _read_csv(workdir / "renal_like.csv")
    assert len(rows) == len(data)
    lookup = {(d["id"], float(d["t"])): float(d["y"]) for d in data}
    for r in rows:
        assert float(r["mean"]) == pytest.approx(lookup[(r["id"], float(r["t"]))], abs=1e-6)
    assert [c for c in rows[0] if "_" in c] == ["PL0_lo80", "PL0_hi80", "PL0_lo90", "PL0_hi90",
                                                "PL0_lo95", "PL0_hi95"]


def test_comparison_report(workdir):
    out = workdir / "out"
    cfg = _config(workdir, model={"family": "N, T"})
    assert main(["fit", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    report = (out / "report.txt").read_text()
    assert report.splitlines()[0].split()[:6] == ["Model", "Degree", "BIC", "RMSE", "dose",
                                                  "dose2"]
    assert "BIC ranking: T1 < N" in report
    assert "after dropping p07, p19, p26, p33" in report
    subjects = {r["id"]: r for r in _read_csv(out / "subjects_N.csv")}
    assert {k for k, r in subjects.items() if r["outlier"] == "1"} == {"p07", "p19", "p26", "p33"}
    t_subjects = _read_csv(out / "subjects_T1.csv")
    w = {r["id"]: float(r["weight"]) for r in t_subjects}
    assert max(w[k] for k in ("p07", "p19", "p26", "p33")) < min(
        v for k, v in w.items() if k not in ("p07", "p19", "p26", "p33"))


def test_nonconverged_exit_code(workdir):
    cfg = _config(workdir, fit={"max_iter": "1", "change_ratio": "no", "information": "no"})
    assert main(["fit", "--config", str(cfg), "--family", "T",
                 "--out", str(workdir / "o")]) == EXIT_NONCONVERGED


def test_errors_exit_one(workdir, capsys):
    assert main(["fit", "--config", str(workdir / "missing.ini")]) == EXIT_ERROR
    bad = workdir / "bad.csv"
    bad.write_text("id,t,y,dose,dose2\na,0,1,x,1\n")
    cfg = _config(workdir, data={"path": "bad.csv"})
    assert main(["fit", "--config", str(cfg)]) == EXIT_ERROR
    assert "row 1" in capsys.readouterr().err
    cfg = _config(workdir, model={"family": "Z"})
    assert main(["fit", "--config", str(cfg)]) == EXIT_ERROR


def test_artifact_version_and_schema_checks(workdir):
    cfg = _config(workdir, fit={"change_ratio": "no", "information": "no"})
    out = workdir / "out"
    main(["fit", "--config", str(cfg), "--family", "N", "--out", str(out)])
    d = json.loads((out / "fit.json").read_text())
    model = artifact.from_dict(d)
    assert model.params.fam.kind == "N" and model.info is None
    d["version"] = 99
    (out / "old.json").write_text(json.dumps(d))
    assert main(["predict", "--config", str(cfg), "--fit", str(out / "old.json")]) == EXIT_ERROR
    other = _config(workdir, data={"v": "dose"})
    assert main(["predict", "--config", str(other), "--fit", str(out / "fit.json")]) == EXIT_ERROR


def test_artifact_roundtrip_is_exact(workdir):
    cfg = _config(workdir, fit={"change_ratio": "no"})
    out = workdir / "out"
    main(["fit", "--config", str(cfg), "--family", "CN", "--out", str(out)])
    model = artifact.load(out / "fit.json")
    d = json.loads((out / "fit.json").read_text())
    assert model.params.beta.tolist() == d["beta"]
    assert model.params.fam.nu == d["family"]["nu"]
    assert model.layout.names == d["information"]["names"]


def test_simulate_smoke(tmp_path):
    ini = tmp_path / "sim.ini"
    ini.write_text("[simulate]\nbootstrap_J = 4\nbootstrap_B = 5\npl1_draws = 300\n")
    args = ["simulate", "--config", str(ini), "--scheme", "IV", "--n", "31", "--reps", "1",
            "--families", "N", "--threads", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    txt = (tmp_path / "a" / "bench_IV_n31.txt").read_text()
    assert "Scheme IV" in txt and "Coverage" in txt
    assert (tmp_path / "a" / "bench_IV_n31.csv").is_file()
