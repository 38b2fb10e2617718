import json

import pandas as pd
import pytest

from app.main import run_cli
from app.services.checkpoint import load_checkpoint

SMALL = {
    "model": "bdt",
    "horizons": [6],
    "runs": 2,
    "hyperparams": {"num_layers": 1, "num_epochs": 1, "num_heads": 1, "model_dim": 4, "lookback": 24,
                    "hidden_dim": 2},
    "train": {"batch_size": 64, "pretrain_epochs": 1},
}


def _train(workspace, out_name):
    out = workspace / out_name
    code = run_cli(["train", "--config", str(workspace / "small.json"), "--data", str(workspace / "synthetic.csv"),
                    "--out", str(out), "--seed", "1"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["make-synthetic", "--out", str(root), "--hours", "200", "--seed", "0"]) == 0
    (root / "small.json").write_text(json.dumps(SMALL))
    _train(root, "first")
    return root


def test_help_exits_cleanly(capsys):
    assert run_cli(["--help"]) == 0
    out = capsys.readouterr().out
    assert "{ingest,train,grid,eval,predict,report}" in out
    assert "make-synthetic" not in out


def test_usage_errors_exit_2():
    assert run_cli([]) == 2
    assert run_cli(["forecast"]) == 2
    assert run_cli(["train", "--model", "arima"]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert run_cli(["train", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli(["train", "--config", str(bad), "--data", "x.csv"]) == 1
    assert run_cli(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_writes_runs_and_checkpoints(workspace):
    run_dir = workspace / "first" / "bdt" / "h6"
    runs = pd.read_csv(run_dir / "runs.csv")
    assert runs["seed"].tolist() == [1, 2]
    ckpt = load_checkpoint(run_dir / "run0" / "model.bdtc")
    assert ckpt.kind == "bdt" and ckpt.hyperparams.horizon == 6
    assert ckpt.normalizer is not None
    resolved = json.loads((workspace / "first" / "resolved_config.json").read_text())
    assert resolved["train"]["seed"] == 1 and resolved["horizons"] == [6]


def test_same_seed_gives_identical_files(workspace):
    second = _train(workspace, "second")
    for k in range(2):
        a = (workspace / "first" / "bdt" / "h6" / f"run{k}" / "model.bdtc").read_bytes()
        b = (second / "bdt" / "h6" / f"run{k}" / "model.bdtc").read_bytes()
        assert a == b
    for out in (workspace / "first", second):
        assert run_cli(["report", "--out", str(out)]) == 0
    assert (workspace / "first" / "report.csv").read_bytes() == (second / "report.csv").read_bytes()


def test_eval_and_its_horizon_check(workspace, capsys):
    ckpt = str(workspace / "first" / "bdt" / "h6" / "run0" / "model.bdtc")
    data = str(workspace / "synthetic.csv")
    out = str(workspace / "eval")
    assert run_cli(["eval", "--checkpoint", ckpt, "--data", data, "--out", out]) == 0
    result = json.loads((workspace / "eval" / "eval.json").read_text())
    assert result["split"] == "test" and result["rmse"] >= result["mae"]
    assert capsys.readouterr().out.startswith("✓ eval bdt 6-h")
    assert run_cli(["eval", "--checkpoint", ckpt, "--data", data, "--out", out, "--horizon", "24"]) == 1


def test_eval_and_predict_reject_a_different_model_kind(workspace, capsys):
    ckpt = str(workspace / "first" / "bdt" / "h6" / "run0" / "model.bdtc")
    data = str(workspace / "synthetic.csv")
    out = str(workspace / "kind")
    assert run_cli(["eval", "--checkpoint", ckpt, "--data", data, "--out", out, "--model", "gru"]) == 1
    assert "holds a bdt model" in capsys.readouterr().err
    assert run_cli(["predict", "--checkpoint", ckpt, "--data", data, "--out", out, "--model", "gru"]) == 1
    # the config file names bdt at 6 h, matching the checkpoint
    assert run_cli(["eval", "--checkpoint", ckpt, "--data", data, "--out", out,
                    "--config", str(workspace / "small.json")]) == 0


def test_predict_writes_forecast(workspace):
    ckpt = str(workspace / "first" / "bdt" / "h6" / "run0" / "model.bdtc")
    assert run_cli(["predict", "--checkpoint", ckpt, "--data", str(workspace / "synthetic.csv"),
                    "--out", str(workspace / "predict")]) == 0
    frame = pd.read_csv(workspace / "predict" / "forecast.csv")
    assert list(frame.columns) == ["timestamp", "load_kwh"]
    assert len(frame) == 6 and (frame["load_kwh"] >= 0).all()


def test_report_with_persistence_column(workspace):
    out = workspace / "first"
    assert run_cli(["report", "--out", str(out), "--config", str(workspace / "small.json"),
                    "--data", str(workspace / "synthetic.csv")]) == 0
    text = (out / "report.txt").read_text()
    assert text.splitlines()[0].split()[2:] == ["bdt", "persistence"]
    total = next(line for line in text.splitlines() if line.startswith("Total Win"))
    assert total.split()[2:] == ["1", "-"]
    assert "vs persistence" not in text
    assert (out / "plot_mae.csv").exists() and (out / "plot_rmse.csv").exists()


def test_published_report(tmp_path):
    assert run_cli(["report", "--published", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "published_report.txt").read_text()
    assert "Total Win" in text


def test_report_without_runs_fails(tmp_path):
    assert run_cli(["report", "--out", str(tmp_path)]) == 1


def test_ingest_writes_hourly_and_rejects(tmp_path, capsys):
    sessions = tmp_path / "sessions.csv"
    sessions.write_text("session_id,start_time,end_time,energy_kwh\n"
                        "a,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z,4.0\n"
                        "b,2020-01-01T03:00:00Z,2020-01-01T02:00:00Z,1.0\n")
    assert run_cli(["ingest", "--data", str(sessions), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "hourly.csv").read_text().splitlines()[1:] == [
        "2020-01-01T00:00:00Z,2", "2020-01-01T01:00:00Z,2"]
    assert pd.read_csv(tmp_path / "rejected.csv")["line"].tolist() == [3]
    hour = pd.read_csv(tmp_path / "profile_hour.csv")
    assert hour[["hour", "mean_kwh"]].values.tolist() == [[0, 2.0], [1, 2.0]]
    for kind in ("weekday", "month", "trend"):
        assert (tmp_path / f"profile_{kind}.csv").exists()
    assert capsys.readouterr().out.startswith("⚠ ingested 1 sessions")


def test_ingest_rejects_an_unknown_time_zone_before_writing(tmp_path):
    sessions = tmp_path / "sessions.csv"
    sessions.write_text("session_id,start_time,end_time,energy_kwh\n"
                        "a,2020-01-01T00:00:00Z,2020-01-01T02:00:00Z,4.0\n")
    out = tmp_path / "out"
    assert run_cli(["ingest", "--data", str(sessions), "--out", str(out), "--tz", "Nowhere/Land"]) == 1
    assert not (out / "hourly.csv").exists()


def test_grid_subcommand(workspace, tmp_path):
    config = dict(SMALL, model="cnn", grid={"num_layers": [1], "num_epochs": [1]})
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(config))
    assert run_cli(["grid", "--config", str(path), "--data", str(workspace / "synthetic.csv"),
                    "--out", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "cnn" / "h6" / "grid.csv")
    assert len(table) == 1 and bool(table["selected"].iloc[0])
    best = json.loads((tmp_path / "cnn" / "h6" / "best_hyperparams.json").read_text())
    assert best["horizon"] == 6
