import json

import numpy as np
import pytest

from wavemotif.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from wavemotif.data import SpeedMatrix
from wavemotif.roadgraph import write_edge_list

SMALL = """version = 1
[model]
trend_window = 2
period_window = 2
hidden = 8
filters = 4
[wavelet]
window = 30
[training]
epochs = 2
batch_size = 16
dtype = "float64"
[arma]
max_p = 2
max_q = 1
residual_window = 32
[split]
train_days = 6
"""


@pytest.fixture
def workspace(tmp_path, small_problem):
    graph, speeds = small_problem
    speeds.to_csv(tmp_path / "matrix.csv")
    write_edge_list(graph, tmp_path / "graph.edges")
    (tmp_path / "run.toml").write_text(SMALL)
    return tmp_path


def run(ws, *args, out="out"):
    return main([*args, "--config", str(ws / "run.toml"), "--output-dir", str(ws / out)])


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["decompose", "--output-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["decompose", "--matrix", str(tmp_path / "nope.csv"), "--output-dir", str(tmp_path)]) == EXIT_DATA
    assert "error [decompose]" in capsys.readouterr().err
    assert main(["decompose", "--set", "model.order=42", "--output-dir", str(tmp_path)]) == EXIT_USAGE


def test_ingest(tmp_path):
    (tmp_path / "g.edges").write_text("# 2 nodes\n0,1\n")
    (tmp_path / "r.csv").write_text("timestamp_iso8601,segment_id,speed_kmh\n"
                                    "2016-11-01T00:01:00,0,30\n2016-11-01T00:10:00,0,50\n"
                                    "2016-11-01T00:20:00,1,44\n")
    code = main(["ingest", "--records", str(tmp_path / "r.csv"), "--graph", str(tmp_path / "g.edges"),
                 "--output-dir", str(tmp_path / "out")])
    assert code == EXIT_OK
    m = SpeedMatrix.read_csv(tmp_path / "out" / "matrix.csv")
    assert m.values.shape == (2, 96) and m.values[0, 0] == 40.0 and m.values[1, 1] == 44.0
    assert m.missing_mask.sum() == 2 * 96 - 2

    (tmp_path / "bad.csv").write_text("2016-11-01T00:01:00,0,thirty\n")
    assert main(["ingest", "--records", str(tmp_path / "bad.csv"), "--graph", str(tmp_path / "g.edges"),
                 "--output-dir", str(tmp_path / "out")]) == EXIT_DATA
    (tmp_path / "empty.csv").write_text("")
    assert main(["ingest", "--records", str(tmp_path / "empty.csv"), "--graph", str(tmp_path / "g.edges"),
                 "--output-dir", str(tmp_path / "out")]) == EXIT_DATA


def test_synth_is_byte_reproducible(tmp_path):
    assert main(["synth", "--output-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main(["synth", "--output-dir", str(tmp_path / "b")]) == EXIT_OK
    for name in ("matrix.csv", "graph.edges", "segments.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    m = SpeedMatrix.read_csv(tmp_path / "a" / "matrix.csv")
    assert m.values.shape == (40, 2880)


@pytest.mark.parametrize("causal", [False, True])
def test_decompose(workspace, causal):
    args = ["decompose", "--matrix", str(workspace / "matrix.csv"), "--verify"] + (["--causal"] if causal else [])
    assert run(workspace, *args) == EXIT_OK
    bands = [np.loadtxt(workspace / "out" / f"band_{b}.csv", delimiter=",", skiprows=1)
             for b in ("A", "D1", "D2", "D3")]
    x = SpeedMatrix.read_csv(workspace / "matrix.csv").values
    np.testing.assert_allclose(sum(bands).T, x, atol=1e-9)


def test_decompose_short_series(tmp_path):
    SpeedMatrix(np.ones((2, 5)), interval_minutes=60).to_csv(tmp_path / "m.csv")
    assert main(["decompose", "--matrix", str(tmp_path / "m.csv"), "--output-dir", str(tmp_path)]) == EXIT_DATA


def test_train_predict_evaluate(workspace):
    common = ["--matrix", str(workspace / "matrix.csv"), "--graph", str(workspace / "graph.edges")]
    names = ("checkpoint.npz", "arma_models.jsonl", "loss_history.csv")
    assert run(workspace, "train", *common, out="a") == EXIT_OK
    first = {n: (workspace / "a" / n).read_bytes() for n in names}
    assert run(workspace, "train", *common, out="a") == EXIT_OK
    for n in names:
        assert (workspace / "a" / n).read_bytes() == first[n]
    assert run(workspace, "predict", "--matrix", str(workspace / "matrix.csv"), out="a") == EXIT_OK
    report = json.loads((workspace / "a" / "report.json").read_text())
    assert report["sample_count"] == 5 * 2 * 22
    assert run(workspace, "evaluate", "--report", "again.json", out="a") == EXIT_OK
    again = json.loads((workspace / "a" / "again.json").read_text())
    assert again["mae"] == pytest.approx(report["mae"], rel=1e-12)


def test_evaluate_perfect_predictions(tmp_path):
    (tmp_path / "p.csv").write_text("segment_id,day,interval,predicted_speed,actual_speed\n"
                                    "a,6,1,30.0,30.0\na,6,2,31.5,31.5\nb,6,1,20.0,20.0\nb,6,2,22.0,22.0\n")
    assert main(["evaluate", "--predictions", str(tmp_path / "p.csv"), "--output-dir", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["mae"] == 0 and rep["rmse"] == 0 and rep["mape_percent"] == 0
    (tmp_path / "q.csv").write_text("segment_id,predicted_speed,actual_speed\na,1,1\na,1,1\nb,1,1\n")
    assert main(["evaluate", "--predictions", str(tmp_path / "q.csv"), "--output-dir", str(tmp_path)]) == EXIT_DATA


def test_baseline_and_sweep(workspace):
    common = ["--matrix", str(workspace / "matrix.csv"), "--graph", str(workspace / "graph.edges")]
    assert run(workspace, "baseline", "--kind", "persistence", *common) == EXIT_OK
    assert (workspace / "out" / "report_persistence.json").exists()
    assert run(workspace, "sweep", "--axis", "K", "--values", "1", *common) == EXIT_OK
    lines = (workspace / "out" / "sweep_K.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("K,1,")
    assert run(workspace, "sweep", "--axis", "K", "--values", "one", *common) == EXIT_USAGE


def test_diverging_training_exits_numeric(workspace, monkeypatch, capsys):
    from wavemotif import neural

    def boom(*args, **kwargs):
        raise neural.TrainingDiverged("non-finite loss or gradient")

    monkeypatch.setattr(neural, "train", boom)
    common = ["--matrix", str(workspace / "matrix.csv"), "--graph", str(workspace / "graph.edges")]
    assert run(workspace, "train", *common) == EXIT_NUMERIC
    assert "error [train]" in capsys.readouterr().err
