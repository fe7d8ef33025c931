import json

import pytest

from graph_informer.main import main
from graph_informer.src.errors import ConfigurationError
from graph_informer.src.settings import get_run_settings
from graph_informer.src.training import save_dataset, synth_node_task


@pytest.fixture
def run_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GRAPH_INFORMER_REPORT_DIR", str(tmp_path / "reports"))
    monkeypatch.setenv("GRAPH_INFORMER_CHECKPOINT_DIR", str(tmp_path / "checkpoints"))
    monkeypatch.setenv("GRAPH_INFORMER_SEED", "0")
    monkeypatch.setenv("GRAPH_INFORMER_WORKERS", "1")
    monkeypatch.delenv("GRAPH_INFORMER_LOG_FILE", raising=False)
    return tmp_path


def test_wl_compare_triangle_and_path(run_env, capsys):
    assert main(["wl-compare", "Bw", "Bg"]) == 0
    out = capsys.readouterr().out
    assert "separated" in out
    assert "different" in out


def test_wl_compare_builtin_pair_is_indistinguishable(run_env, capsys):
    report = run_env / "wl.json"
    assert main(["wl-compare", "--set", "RegN6D3", "--report", str(report)]) == 0
    rows = json.loads(report.read_text())["pairs"]
    assert rows == [
        {
            "first": "RegN6D3-K33",
            "second": "RegN6D3-prism",
            "wl": "indistinguishable",
            "spectrum": "different",
        }
    ]


def test_wl_compare_needs_two_graphs(run_env):
    assert main(["wl-compare", "Bw"]) == 2


def test_malformed_graph6_exits_with_one(run_env, capsys):
    assert main(["wl-compare", "Bw", "B"]) == 1
    assert "graph-informer:" in capsys.readouterr().err


def test_iso_test_reports_separation_table(run_env, capsys):
    assert main(["iso-test", "--set", "RegN8D3", "--seeds", "3"]) == 0
    out = capsys.readouterr().out
    assert "Separated / Total" in out
    assert "5 / 5" in out
    document = json.loads((run_env / "reports" / "iso-test.json").read_text())
    assert [report["seed"] for report in document["reports"]] == [0, 1, 2]
    assert document["route_features"]["histogram_k"] == 4


def test_iso_test_runs_both_score_maps(run_env, capsys):
    assert main(["iso-test", "--set", "RegN6D3", "--score-map", "both"]) == 0
    out = capsys.readouterr().out
    assert "sigmoid" in out and "softmax" in out


def test_gradcheck_passes(run_env, capsys):
    report = run_env / "gradcheck.json"
    assert main(["gradcheck", "--max-coordinates", "5", "--report", str(report)]) == 0
    assert "passed" in capsys.readouterr().out
    document = json.loads(report.read_text())
    assert document["passed"] is True
    assert len(document["max_relative_error"]) == 4
    assert all(error < 1e-4 for error in document["max_relative_error"].values())


def test_invalid_environment_exits_with_two(run_env, monkeypatch):
    monkeypatch.setenv("GRAPH_INFORMER_WORKERS", "0")
    assert main(["wl-compare", "Bw", "Bg"]) == 2


def test_non_integer_seed_is_a_configuration_error(run_env, monkeypatch):
    monkeypatch.setenv("GRAPH_INFORMER_SEED", "zero")
    with pytest.raises(ConfigurationError):
        get_run_settings()
    assert main(["wl-compare", "Bw", "Bg"]) == 2


def test_missing_checkpoint_exits_with_one(run_env):
    assert main(["eval", "--checkpoint", str(run_env / "none.json"), "--dataset", "x"]) == 1


def test_attention_dump_of_json_graph(run_env, capsys):
    graph = run_env / "triangle.json"
    graph.write_text(json.dumps({"n": 3, "edges": [[0, 1], [1, 2], [0, 2]]}))
    output = run_env / "dump.json"
    assert main(["attn-dump", "--graph-json", str(graph), "--output", str(output)]) == 0
    entries = json.loads(output.read_text())
    assert len(entries) == 2 * 6
    assert entries[0]["node_labels"] == ["0", "1", "2"]
    assert entries[0]["pool_index"] is None
    assert "layer 0 head 0 sample 0" in capsys.readouterr().out


def test_train_toy_then_eval(run_env, capsys):
    checkpoint = run_env / "toy.json"
    args = ["train-toy", "node", "--seed", "7", "--epochs", "1"]
    args += ["--n-graphs", "8", "--n-valid", "2"]
    assert main([*args, "--checkpoint", str(checkpoint)]) == 0
    assert checkpoint.exists()
    report = json.loads((run_env / "reports" / "train-toy-node-seed7.json").read_text())
    assert report["seed"] == 7 and report["best_epoch"] == 1

    dataset = run_env / "dataset"
    save_dataset(synth_node_task(4, seed=1), dataset)
    assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset)]) == 0
    assert "mae" in capsys.readouterr().out
