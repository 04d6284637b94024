import json
import subprocess
import sys

import pytest

from cwripple.cli import main
from cwripple.dataset import read_csv
from cwripple.forest import load_model

GRID = ["--stages", "2,4", "--vin-kv", "5,15", "--cap-uf", "1,5,10", "--freq-hz", "100,500",
        "--rload-mohm", "6,12,60"]
FAST = ["--steps-per-cycle", "256", "--settle-rel-tol", "1e-5", "--max-cycles", "400"]
TINY_FOREST = ["--n-trees", "10", "--max-depth", "none,4", "--min-samples-leaf", "1", "--feature-fraction",
               "1/3", "--cv-folds", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["sweep", "--out", str(d / "data.csv"), "--workers", "1",
                 "--waveform-dir", str(d / "waves"), *GRID, *FAST]) == 0
    assert main(["train", "--data", str(d / "data.csv"), "--model-out", str(d / "model.json"),
                 "--report-dir", str(d / "train"), *TINY_FOREST]) == 0
    return d


def test_sweep_outputs(workdir):
    records = read_csv(workdir / "data.csv")
    assert len(records) == 72
    manifest = json.loads((workdir / "data.manifest.json").read_text())
    assert manifest["n_cases"] == 72 and manifest["failed_cases"] == []
    assert manifest["config"]["schema_version"] == 1
    assert manifest["config"]["sim"]["steps_per_cycle"] == 256
    assert "total_s" in manifest["timing"]
    assert len(list((workdir / "waves").glob("case_*.csv"))) == 72


def test_sweep_worker_count_does_not_change_bytes(workdir, tmp_path):
    assert main(["sweep", "--out", str(tmp_path / "par.csv"), "--workers", "2", *GRID, *FAST]) == 0
    assert (tmp_path / "par.csv").read_bytes() == (workdir / "data.csv").read_bytes()


def test_single_case_sweep(tmp_path):
    assert main(["sweep", "--out", str(tmp_path / "one.csv"), "--stages", "2", "--vin-kv", "5",
                 "--cap-uf", "10", "--freq-hz", "500", "--rload-mohm", "60", *FAST]) == 0
    assert len(read_csv(tmp_path / "one.csv")) == 1


def test_train_outputs_and_determinism(workdir, tmp_path, capsys):
    names = {p.name for p in (workdir / "train").iterdir()}
    assert {"train_report.txt", "cv_table.csv", "global_test.csv", "regimes_test.csv", "regimes_full.csv",
            "importances.csv"} <= names
    report = (workdir / "train" / "train_report.txt").read_text()
    assert "selected:" in report and "Feature importance" in report
    imp = (workdir / "train" / "importances.csv").read_text().splitlines()[1:]
    scores = [float(line.split(",")[1]) for line in imp]
    assert scores == sorted(scores, reverse=True)
    assert main(["train", "--data", str(workdir / "data.csv"), "--model-out", str(tmp_path / "m.json"),
                 "--report-dir", str(tmp_path / "r"), *TINY_FOREST]) == 0
    assert (tmp_path / "m.json").read_bytes() == (workdir / "model.json").read_bytes()
    for name in names:
        assert (tmp_path / "r" / name).read_bytes() == (workdir / "train" / name).read_bytes()


def test_evaluate(workdir, tmp_path):
    out = tmp_path / "eval"
    assert main(["evaluate", "--model", str(workdir / "model.json"), "--data", str(workdir / "data.csv"),
                 "--out-dir", str(out)]) == 0
    header = (out / "residual_vs_frequency.csv").read_text().splitlines()[0]
    assert header == "freq_hz,mean_abs_residual_v,max_abs_residual_v,n_cases"
    rows = (out / "regimes_full.csv").read_text().splitlines()
    assert "rmse_reduction_pct" in rows[0]
    assert (out / "residual_vs_frequency.png").stat().st_size > 0
    again = tmp_path / "eval2"
    main(["evaluate", "--model", str(workdir / "model.json"), "--data", str(workdir / "data.csv"),
          "--out-dir", str(again)])
    for p in out.iterdir():
        assert (again / p.name).read_bytes() == p.read_bytes(), p.name


def test_evaluate_rejects_mismatched_model(workdir, tmp_path, capsys):
    doc = json.loads((workdir / "model.json").read_text())
    doc["feature_names"] = [n for n in doc["feature_names"] if n != "stage_4"] + ["stage_4x"]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    rc = main(["evaluate", "--model", str(tmp_path / "bad.json"), "--data", str(workdir / "data.csv"),
               "--out-dir", str(tmp_path / "e")])
    assert rc == 1
    assert "differ" in capsys.readouterr().err


def _predict(workdir, capsys, *extra, model="model.json"):
    rc = main(["predict", "--model", str(workdir / model), "--stages", "4", "--vin-kv", "15",
               "--cap-uf", "5", "--freq-hz", "100", "--rload-mohm", "12", *extra])
    captured = capsys.readouterr()
    return rc, captured


def test_predict_full_mode_needs_waveform(workdir, capsys):
    rc, captured = _predict(workdir, capsys)
    assert rc == 1 and "--waveform" in captured.err and "kurtosis" in captured.err


def test_predict_with_waveform_within_bounds(workdir, capsys):
    records = read_csv(workdir / "data.csv")
    rec = next(r for r in records if (r.n_stages, r.vin_peak_v, round(r.cap_f * 1e6), r.freq_hz, r.rload_ohm)
               == (4, 15e3, 5, 100.0, 12e6))
    wave = workdir / "waves" / f"case_{rec.case_id:04d}.csv"
    rc, captured = _predict(workdir, capsys, "--waveform", str(wave))
    assert rc == 0
    out = json.loads(captured.out)
    model = load_model(workdir / "model.json")
    train_ids = set(model.metadata["train_case_ids"])
    residuals = [r.residual_v for r in records if r.case_id in train_ids]
    assert min(residuals) <= out["residual_pred_v"] <= max(residuals)
    assert out["vpp_theory_v"] == pytest.approx(rec.vpp_theory_v, rel=1e-12)
    assert out["vpp_corrected_v"] == pytest.approx(out["vpp_theory_v"] + out["residual_pred_v"], rel=1e-12)


def test_predict_params_mode(workdir, tmp_path, capsys):
    assert main(["train", "--data", str(workdir / "data.csv"), "--model-out", str(tmp_path / "p.json"),
                 "--report-dir", str(tmp_path / "r"), "--feature-mode", "params", *TINY_FOREST]) == 0
    capsys.readouterr()
    rc, captured = _predict(tmp_path, capsys, model="p.json")
    assert rc == 0
    out = json.loads(captured.out)
    assert out["feature_mode"] == "params" and out["vpp_corrected_v"] >= 0


def test_predict_corrupt_waveform(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,volts\n0,1\n")
    rc, captured = _predict(workdir, capsys, "--waveform", str(bad))
    assert rc == 1 and "t_s,v_out_v" in captured.err


def test_export_plots(workdir, tmp_path):
    out = tmp_path / "plots"
    assert main(["export-plots", "--data", str(workdir / "data.csv"), "--out-dir", str(out)]) == 0
    assert {"residual_vs_frequency.csv", "residual_vs_frequency.png", "residual_by_stage.png",
            "residual_by_frequency.png"} <= {p.name for p in out.iterdir()}
    assert main(["export-plots", "--data", str(workdir / "data.csv"), "--model", str(workdir / "model.json"),
                 "--out-dir", str(tmp_path / "p2")]) == 0


def test_schema_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("case_id,n_stages\n0,2\n")
    assert main(["train", "--data", str(bad)]) == 1
    assert "missing" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert main(["evaluate", "--model", str(tmp_path / "nope.json"), "--data", str(tmp_path / "x.csv")]) == 1


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    cfg = {"schema_version": 1, "grid": {"stages": [2], "vin_kv": [5], "cap_uf": [10], "freq_hz": [500],
                                         "rload_mohm": [6, 60]},
           "sim": {"steps_per_cycle": 256, "settle_rel_tol": 1e-5, "max_cycles": 400}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "a.csv")]) == 0
    assert len(read_csv(tmp_path / "a.csv")) == 2
    # flags beat the file
    assert main(["sweep", "--config", str(path), "--rload-mohm", "60", "--out", str(tmp_path / "b.csv")]) == 0
    assert len(read_csv(tmp_path / "b.csv")) == 1
    # the environment variable supplies the default config path
    monkeypatch.setenv("CWRIPPLE_CONFIG", str(path))
    assert main(["sweep", "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_bytes() == (tmp_path / "a.csv").read_bytes()


@pytest.mark.parametrize("doc", [{"schema_version": 2}, {"bogus": 1}, {"grid": {"stages": "x"}},
                                 {"sim": {"steps": 1}}, {"feature_mode": "other"}])
def test_bad_config_exit_code(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "x.csv")]) == 1


@pytest.mark.parametrize("command", ["sweep", "train", "evaluate", "predict", "export-plots"])
def test_help_documents_defaults(command):
    out = subprocess.run([sys.executable, "-m", "cwripple", command, "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert "--" in out
    if command == "sweep":
        for text in ("ESR, Ohm (default: 0.5)", "2,4,6,8", "5,15,25", "1,5,10", "50,100,500", "6,12,60",
                     "default: 5000", "default: 1e-08"):
            assert text in " ".join(out.split()), text
    if command == "train":
        for text in ("100,300", "none,8,16", "1,2,5", "1/3,sqrt", "default: 5"):
            assert text in " ".join(out.split()), text
