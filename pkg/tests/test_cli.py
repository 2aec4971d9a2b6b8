import json
import subprocess
import sys

import pytest

from driftcal.cli import main, read_config
from driftcal.data import load_dataset
from driftcal.errors import ConfigError
from driftcal.harness import CSV_COLUMNS, load_report


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small grid dataset, a trained model and a tuned schedule shared by the tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main([
        "gen-data", "--classes", "3", "--dim", "4", "--per-class", "60", "--stddev", "0.6",
        "--grid", "2x2x1", "--split", "0.5,0.25,0.25", "--out", str(d / "blobs.bin"),
    ]) == 0
    assert main(["train", "--data", str(d / "blobs.train.bin"), "--epochs", "300", "--out", str(d / "model.json")]) == 0
    assert main([
        "tune-p", "--model", str(d / "model.json"), "--val", str(d / "blobs.val.bin"), "--kind", "ts",
        "--out", str(d / "ts_p.json"), "--schedule-out", str(d / "sched.json"),
    ]) == 0
    assert main(["tune", "--model", str(d / "model.json"), "--val", str(d / "blobs.val.bin"),
                 "--kind", "ts", "--out", str(d / "ts.json")]) == 0
    return d


def test_gen_data_split_files(workdir):
    sizes = [len(load_dataset(workdir / f"blobs.{n}.bin", "raw")) for n in ("train", "val", "test")]
    assert sizes == [90, 45, 45]


def test_schedule_file(workdir):
    doc = json.loads((workdir / "sched.json").read_text())
    assert doc["N"] == 10 and len(doc["epsilons"]) == 10
    assert doc["targets"][0] == pytest.approx(1 / 3)


def test_sweep_and_report(workdir, capsys):
    out = workdir / "report.csv"
    code = main([
        "sweep", "--model", str(workdir / "model.json"), "--test", str(workdir / "blobs.test.bin"),
        "--schedule", str(workdir / "sched.json"), "--perturbations", "gaussian,rot_right",
        "--cal", f"TS={workdir / 'ts.json'}", "--cal", f"TS-P={workdir / 'ts_p.json'}", "--out", str(out),
    ])
    assert code == 0
    report = load_report(out)
    assert out.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(report.rows) == 3 * 2 * 11
    capsys.readouterr()
    assert main(["report", "--input", str(out), "--metric", "nll"]) == 0
    table = capsys.readouterr().out
    assert "TS-P" in table and "rot_right" in table
    assert main(["report", "--input", str(out), "--report-format", "json", "--out", str(workdir / "r.json")]) == 0
    assert load_report(workdir / "r.json").rows == report.rows


def test_inapplicable_family_is_a_config_error(workdir, tmp_path):
    assert main([
        "sweep", "--model", str(workdir / "model.json"), "--test", str(workdir / "blobs.test.bin"),
        "--perturbations", "gaussian", "--out", str(tmp_path / "r.csv"),
    ]) == 2


def test_level_spec_override(workdir):
    out = workdir / "custom.json"
    assert main([
        "sweep", "--model", str(workdir / "model.json"), "--test", str(workdir / "blobs.test.bin"),
        "--perturbations", "brightness", "--level-spec", "brightness:0,.1,.2,.3,.4,.5,.6,.7,.8,.9",
        "--out", str(out),
    ]) == 0
    report = load_report(out)
    assert report.perturbations == ["brightness"]
    assert report.select("Base", "brightness", 9)[0].param == 0.9


def test_confidence_hist(workdir, capsys):
    assert main([
        "confidence-hist", "--model", str(workdir / "model.json"), "--data", str(workdir / "blobs.test.bin"),
        "--cal", str(workdir / "ts_p.json"), "--perturb", "gaussian:0.05", "--bins", "5",
    ]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "bucket_lo,bucket_hi,count"
    assert sum(int(ln.split(",")[2]) for ln in lines[1:]) == 45


def test_valsize_sweep(workdir):
    out = workdir / "valsize.csv"
    assert main([
        "valsize-sweep", "--model", str(workdir / "model.json"), "--val", str(workdir / "blobs.val.bin"),
        "--test", str(workdir / "blobs.test.bin"), "--sizes", "20,45", "--kinds", "ts",
        "--schedule", str(workdir / "sched.json"), "--out", str(out),
    ]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "size,calibrator,mean_micro_ece,mean_accuracy"
    assert len(lines) == 1 + 2 * 3


def test_exit_codes(workdir, tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m.json")]) == 3
    assert main(["train", "--out", str(tmp_path / "m.json")]) == 2
    (tmp_path / "bad.csv").write_text("f0,label\n0.1,x\n")
    assert main(["train", "--data", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "m.json")]) == 3
    assert main(["tune", "--model", str(workdir / "model.json"), "--val", str(workdir / "blobs.val.bin"),
                 "--kind", "bbq", "--out", str(tmp_path / "c.json")]) == 3
    (tmp_path / "cfg.txt").write_text("no_such_key = 1\n")
    assert main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", "x", "--out", "y"]) == 2
    (tmp_path / "big.csv").write_text("f0,label\n1e150,1\n-1e150,0\n")
    with pytest.warns(UserWarning, match="outside"):
        code = main(["train", "--data", str(tmp_path / "big.csv"), "--lr", "1e200",
                     "--epochs", "5", "--out", str(tmp_path / "m.json")])
    assert code == 4


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# blob settings\nclasses = 2\ndim = 2\nper_class = 5\nseed = 7\n")

    def labels(path):
        return load_dataset(path).features.tobytes()

    monkeypatch.delenv("DRIFT_CALIB_SEED", raising=False)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--seed", "7", "--per-class", "5", "--out", str(tmp_path / "b.csv")]) == 0
    assert labels(tmp_path / "a.csv") == labels(tmp_path / "b.csv")
    assert len(load_dataset(tmp_path / "a.csv")) == 10
    monkeypatch.setenv("DRIFT_CALIB_SEED", "8")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c.csv")]) == 0
    assert labels(tmp_path / "c.csv") != labels(tmp_path / "a.csv")
    assert main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "d.csv")]) == 0
    assert labels(tmp_path / "d.csv") == labels(tmp_path / "a.csv")


def test_read_config_errors(tmp_path):
    (tmp_path / "c.cfg").write_text("just words\n")
    with pytest.raises(ConfigError, match=":1:"):
        read_config(tmp_path / "c.cfg")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "absent.cfg")


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "driftcal", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for verb in ("gen-data", "train", "tune", "tune-p", "sweep", "valsize-sweep", "confidence-hist", "report"):
        assert verb in out.stdout
