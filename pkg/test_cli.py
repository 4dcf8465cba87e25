"""
Command line: files, determinism and exit codes
"""
import json

import numpy as np
import pandas as pd
import pytest

import cli
from dataset_io import read_dataset, write_dataset, write_frame
from errors import ProtocolInconsistencyError
from forest import Forest

SMALL = ["--num-clients", "3", "--samples-per-client", "50", "--num-features", "3", "--n-aux", "500"]
FAST = ["--trees", "3", "--max-depth", "3", "--sketch-size", "8"]


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(out), *SMALL]) == cli.EXIT_OK
    return out


# ─── gen-data ────────────────────────────────────────────────────────────────

def test_gen_data_writes_shards_test_file_and_provenance(data_dir):
    names = sorted(p.name for p in data_dir.iterdir())
    assert names == ["client_0.csv", "client_1.csv", "client_2.csv", "ground_truth.json", "scenario.json", "test.csv"]
    assert len(read_dataset(data_dir / "client_1.csv")) == 50
    assert len(read_dataset(data_dir / "test.csv")) == round(150 * 0.3 / 0.7)
    scenario = json.loads((data_dir / "scenario.json").read_text())
    assert scenario["num_clients"] == 3
    assert scenario["resolved"]["gamma"] == 0.0
    Forest.load(data_dir / "ground_truth.json")


def test_gen_data_is_byte_identical_across_runs(tmp_path, data_dir):
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--out", str(again), *SMALL]) == cli.EXIT_OK
    for path in data_dir.iterdir():
        assert (again / path.name).read_bytes() == path.read_bytes()


def test_parse_and_re_emit_is_byte_identical(tmp_path, data_dir):
    for name in ("client_0.csv", "test.csv"):
        copy = tmp_path / name
        write_frame(read_dataset(data_dir / name), copy)
        assert copy.read_bytes() == (data_dir / name).read_bytes()


def test_one_feature_is_a_config_error(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--num-features", "1"]) == cli.EXIT_CONFIG


# ─── train / predict / evaluate ──────────────────────────────────────────────

def test_train_writes_model_and_metrics(tmp_path, data_dir):
    model = tmp_path / "out" / "model.json"
    assert cli.main(["train", "--data", str(data_dir), "--model-out", str(model), *FAST]) == cli.EXIT_OK
    forest = Forest.load(model)
    assert len(forest.trees) == 3
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["config"]["trees"] == 3
    assert metrics["run_config"]["sketch_size"] == 8
    assert metrics["run_config"]["min_leaf"] == 5
    assert metrics["ledger"]["scalars_up"] == forest.ledger.scalars_up
    assert metrics["rounds"] == forest.ledger.rounds
    assert {"sketch", "eval", "init"} <= set(metrics["per_phase"])
    assert metrics["nodes"][0].keys() == {"tree", "path", "phase", "scalars_up", "scalars_down"}
    assert metrics["training_error"]["metric_name"] == "mse"
    assert "numpy" in metrics["versions"]


def test_training_is_reproducible(tmp_path, data_dir):
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    for path in (first, second):
        assert cli.main(["train", "--data", str(data_dir), "--model-out", str(path), *FAST]) == cli.EXIT_OK
    assert first.read_bytes() == second.read_bytes()


def test_flag_beats_config_file(tmp_path, data_dir):
    config = tmp_path / "run.env"
    config.write_text("TREES=4\nMAX_DEPTH=2\nsketch_size=8\n")
    model = tmp_path / "m.json"
    code = cli.main(["train", "--config", str(config), "--data", str(data_dir), "--model-out", str(model), "--trees", "2"])
    assert code == cli.EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["config"]["trees"] == 2
    assert metrics["config"]["max_depth"] == 2
    assert metrics["config"]["sketch_size"] == 8


def test_fully_grown_single_client_tree_has_zero_training_error(tmp_path):
    rng = np.random.default_rng(7)
    data = tmp_path / "single"
    data.mkdir()
    write_dataset(data / "client_0.csv", rng.normal(size=(60, 3)), rng.normal(size=60), np.zeros(60, dtype=int))
    metrics_out = tmp_path / "metrics.json"
    code = cli.main([
        "train", "--data", str(data), "--model-out", str(tmp_path / "m.json"), "--metrics-out", str(metrics_out),
        "--trees", "1", "--max-depth", "64", "--min-leaf", "1", "--mtry", "3", "--bootstrap", "false",
    ])
    assert code == cli.EXIT_OK
    assert json.loads(metrics_out.read_text())["training_error"]["metric"] == pytest.approx(0.0, abs=1e-20)


def test_predict_and_evaluate(tmp_path, data_dir):
    model = tmp_path / "model.json"
    cli.main(["train", "--data", str(data_dir), "--model-out", str(model), *FAST])
    predictions = tmp_path / "pred.csv"
    assert cli.main(["predict", "--model", str(model), "--data", str(data_dir / "test.csv"), "--out", str(predictions)]) == 0
    frame = pd.read_csv(predictions)
    assert list(frame.columns) == ["client_id", "prediction"]
    assert len(frame) == len(read_dataset(data_dir / "test.csv"))

    report = tmp_path / "eval.json"
    assert cli.main(["evaluate", "--model", str(model), "--data", str(data_dir / "test.csv"), "--out", str(report)]) == 0
    result = json.loads(report.read_text())
    assert result["metric_name"] == "mse"
    assert result["metric"] > 0


# ─── benchmark / diagnose ────────────────────────────────────────────────────

def test_benchmark_tables(tmp_path):
    out = tmp_path / "bench"
    code = cli.main([
        "benchmark", "--out", str(out), "--scenario", "disjoint_step", "--num-clients", "2",
        "--samples-per-client", "40", "--num-features", "3", "--gammas", "0,5", "--seeds", "0,1",
        "--methods", "local_learning,fedforest_quantiles_x", *FAST,
    ])
    assert code == cli.EXIT_OK
    results = pd.read_csv(out / "results.csv", keep_default_na=False)
    assert list(results.columns) == [
        "method", "scenario", "gamma", "delta", "seed", "metric_name", "metric", "comm_scalars", "rounds", "error",
    ]
    assert len(results) == 8
    assert (results["error"] == "").all()
    assert list(results["method"][:2]) == ["fedforest_quantiles_x", "fedforest_quantiles_x"]
    federated = results[results["method"] == "fedforest_quantiles_x"]
    assert (federated["comm_scalars"] > 0).all()
    assert (results[results["method"] == "local_learning"]["comm_scalars"] == 0).all()
    summary = pd.read_csv(out / "summary.csv")
    assert len(summary) == 4
    assert set(summary["n"]) == {2}
    assert (out / "config.json").exists()


def test_benchmark_rejects_unknown_methods(tmp_path):
    assert cli.main(["benchmark", "--out", str(tmp_path), "--methods", "xgboost"]) == cli.EXIT_CONFIG


def test_diagnose_end_to_end(tmp_path):
    data = tmp_path / "data"
    cli.main(["gen-data", "--out", str(data), "--scenario", "disjoint_step", "--num-clients", "2",
              "--samples-per-client", "100", "--num-features", "3"])
    report_path = tmp_path / "report.json"
    code = cli.main([
        "diagnose", "--data", str(data), "--out", str(report_path), "--trees", "5", "--max-depth", "4",
        "--site-trees", "10", "--diagnostic-repeats", "2",
    ])
    assert code == cli.EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["site_auc"] >= 0.95
    assert report["recommendation"] == "robust_mode"


# ─── exit codes ──────────────────────────────────────────────────────────────

def test_missing_config_file(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "nope.env")]) == cli.EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    config = tmp_path / "bad.env"
    config.write_text("TREES=3\nNUM_LEAVES=9\n")
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(config)]) == cli.EXIT_CONFIG


def test_duplicate_config_key(tmp_path):
    config = tmp_path / "dup.env"
    config.write_text("TREES=3\ntrees=4\n")
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(config)]) == cli.EXIT_CONFIG


def test_unparseable_cell_reports_row_and_column(tmp_path, caplog):
    data = tmp_path / "bad"
    data.mkdir()
    (data / "client_0.csv").write_text("client_id,x0,x1,y\n0,1.0,2.0,3.0\n0,1.5,oops,2.0\n")
    code = cli.main(["train", "--data", str(data), "--model-out", str(tmp_path / "m.json")])
    assert code == cli.EXIT_DATA
    assert "row 3" in caplog.text
    assert "column 'x1'" in caplog.text


def test_broken_model_file(tmp_path, data_dir):
    model = tmp_path / "model.json"
    model.write_text("{}")
    code = cli.main(["predict", "--model", str(model), "--data", str(data_dir / "test.csv"), "--out", str(tmp_path / "p.csv")])
    assert code == cli.EXIT_DATA


def test_protocol_inconsistency_exit_code(tmp_path, data_dir, monkeypatch):
    def lying_fit(shards, config):
        raise ProtocolInconsistencyError("left child exceeds node", 0, "", 1)

    monkeypatch.setattr(cli, "fit", lying_fit)
    code = cli.main(["train", "--data", str(data_dir), "--model-out", str(tmp_path / "m.json")])
    assert code == cli.EXIT_PROTOCOL


def test_library_value_error_is_a_data_error(tmp_path, data_dir, monkeypatch):
    def failing_fit(shards, config):
        raise ValueError("quantile levels must be increasing")

    monkeypatch.setattr(cli, "fit", failing_fit)
    code = cli.main(["train", "--data", str(data_dir), "--model-out", str(tmp_path / "m.json")])
    assert code == cli.EXIT_DATA


# ─── client ids ──────────────────────────────────────────────────────────────

@pytest.fixture
def sparse_ids(tmp_path):
    """Two clients with ids 5 and 9 and a constant outcome each"""
    rng = np.random.default_rng(11)
    data = tmp_path / "sparse"
    data.mkdir()
    for client_id, outcome in ((5, 0.0), (9, 20.0)):
        write_dataset(
            data / f"client_{client_id}.csv", rng.normal(size=(40, 2)), np.full(40, outcome),
            np.full(40, client_id),
        )
    rows = tmp_path / "rows.csv"
    write_dataset(rows, rng.normal(size=(4, 2)), np.array([0.0, 0.0, 20.0, 20.0]), np.array([5, 5, 9, 9]))
    model = tmp_path / "model.json"
    code = cli.main([
        "train", "--data", str(data), "--model-out", str(model), "--include-h", "true", "--min-leaf", "2", *FAST,
    ])
    assert code == cli.EXIT_OK
    return model, rows


def test_predict_routes_file_client_ids_through_the_saved_map(tmp_path, sparse_ids):
    model, rows = sparse_ids
    assert Forest.load(model).site_map == {5: 0, 9: 1}
    out = tmp_path / "pred.csv"
    assert cli.main(["predict", "--model", str(model), "--data", str(rows), "--out", str(out)]) == cli.EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame["client_id"]) == [5, 5, 9, 9]
    assert list(frame["prediction"]) == [0.0, 0.0, 20.0, 20.0]


def test_evaluate_with_file_client_ids(tmp_path, sparse_ids):
    model, rows = sparse_ids
    report = tmp_path / "eval.json"
    assert cli.main(["evaluate", "--model", str(model), "--data", str(rows), "--out", str(report)]) == cli.EXIT_OK
    assert json.loads(report.read_text())["metric"] == 0.0


def test_unknown_client_id_without_fallback_is_a_data_error(tmp_path, sparse_ids):
    model, _ = sparse_ids
    rows = tmp_path / "stranger.csv"
    write_dataset(rows, np.zeros((2, 2)), np.zeros(2), np.array([5, 7]))
    code = cli.main([
        "predict", "--model", str(model), "--data", str(rows), "--out", str(tmp_path / "p.csv"), "--no-site-fallback",
    ])
    assert code == cli.EXIT_DATA
