import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from circscope.cli import main
from circscope.eap import EdgeScoreTable
from circscope.evaluation import GroundTruthCircuit, roc_from_ranking, youden_grid
from circscope.model import init_weights, load_model, save_weights
from circscope.tasks import load_task

from conftest import affine_model, make_config, make_task


@pytest.fixture
def files(tmp_path):
    cfg = make_config()
    cfg.save(tmp_path / "model.json")
    assert main(["init-weights", "--model", str(tmp_path / "model.json"), "--seed", "3",
                 "--out", str(tmp_path / "w.bin")]) == 0
    make_task(cfg.vocab_size, n_pairs=3, seed=2).save(tmp_path / "task.json")
    return tmp_path


def run_args(d, *extra, out="out"):
    return ["--model", str(d / "model.json"), "--weights", str(d / "w.bin"),
            "--task", str(d / "task.json"), "--out", str(d / out), *extra]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_discover_eap_writes_artifacts(files, capsys):
    assert main(["discover", *run_args(files, "--top-k", "10")]) == 0
    out = files / "out"
    assert {p.name for p in out.iterdir()} == {"scores.csv", "circuit.json", "passes.json", "manifest.json"}
    passes = json.loads((out / "passes.json").read_text())
    assert passes["forwards"] == 6 and passes["backwards"] == 3 and passes["edges"] == 61
    assert len(json.loads((out / "circuit.json").read_text())["edges"]) == 10
    assert "6 forward / 3 backward" in capsys.readouterr().out


def test_discover_is_byte_identical_across_runs(files):
    for name in ("a", "b"):
        assert main(["discover", *run_args(files, "--threshold", "0.244", out=name)]) == 0
    for f in ("scores.csv", "circuit.json", "passes.json"):
        assert (files / "a" / f).read_bytes() == (files / "b" / f).read_bytes()


def test_discover_top_k_zero_and_acdc_large_tau(files):
    assert main(["discover", *run_args(files, "--top-k", "0")]) == 0
    assert json.loads((files / "out" / "circuit.json").read_text())["edges"] == []
    assert main(["discover", *run_args(files, "--method", "acdc", "--tau-acdc", "1e9", out="acdc")]) == 0
    assert json.loads((files / "acdc" / "circuit.json").read_text())["edges"] == []


def test_discover_actpatch_and_combined(files):
    assert main(["discover", *run_args(files, "--method", "actpatch")]) == 0
    assert json.loads((files / "out" / "passes.json").read_text())["forwards"] == 3 * 63
    assert main(["discover", *run_args(files, "--method", "eap+acdc", "--tau-eap", "0.01",
                                       "--tau-acdc", "0.01", out="combo")]) == 0
    circ = json.loads((files / "combo" / "circuit.json").read_text())
    assert circ["method"] == "eap+acdc"
    scores = EdgeScoreTable.load_csv(files / "combo" / "scores.csv")
    assert set(circ["edges"]) <= {e for e, a in zip(scores.edge_ids, scores.abs) if a > 0.01}


def test_usage_errors_exit_one(files, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["discover", *run_args(files, "--top-k", "1", "--threshold", "0.1")])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert main(["discover", *run_args(files, "--method", "eap+acdc")]) == 1
    assert main(["discover", *run_args(files, "--method", "acdc")]) == 1
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_two(files, capsys):
    (files / "bad.json").write_text('{"pairs": [{"clean_tokens": [1, 2], "corrupt_tokens": [1]}]}')
    args = run_args(files)
    args[args.index(str(files / "task.json"))] = str(files / "bad.json")
    assert main(["discover", *args]) == 2
    assert "length mismatch at pair 0" in capsys.readouterr().err
    args = run_args(files)
    args[args.index(str(files / "w.bin"))] = str(files / "missing.bin")
    assert main(["discover", *args]) == 2
    assert main(["discover", *run_args(files, "--pass-budget", "3")]) == 2
    assert main(["sweep", *run_args(files, "--edge", "a1.h0.out->a0.h0.q_input")]) == 2


def test_non_finite_weights_exit_three(files, capsys):
    w = dict(init_weights(make_config(), 0))
    w["a0.h0.W_Q"] = np.full_like(w["a0.h0.W_Q"], np.inf)
    save_weights(files / "w.bin", w)
    with np.errstate(all="ignore"):
        assert main(["discover", *run_args(files)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_kl_metric_warns_on_stderr(files, capsys):
    assert main(["discover", *run_args(files, "--metric", "kl")]) == 0
    err = capsys.readouterr().err
    assert "circscope: warning: zero-gradient warning" in err


def test_evaluate_roc_matches_library(files):
    main(["discover", *run_args(files)])
    table = EdgeScoreTable.load_csv(files / "out" / "scores.csv")
    truth = GroundTruthCircuit("t", set(table.edge_ids[-12:]))
    truth.save(files / "truth.json")
    assert main(["evaluate", "--truth", str(files / "truth.json"), "--scores", str(files / "out" / "scores.csv"),
                 "--model", str(files / "model.json"), "--out", str(files / "ev")]) == 0
    r = rows(files / "ev" / "roc.csv")
    assert r[0] == ["parameter", "fpr", "tpr"]
    assert float(r[-1][2]) == roc_from_ranking(table, truth).auc
    assert len(r) == 1 + 62 + 1


def test_evaluate_roc_from_circuits(files):
    for tau in ("0.0", "0.05"):
        main(["discover", *run_args(files, "--method", "acdc", "--tau-acdc", tau, out=f"c{tau}")])
    GroundTruthCircuit("t", {"a1.h0.out->final.in", "a1.h1.out->final.in"}).save(files / "truth.json")
    assert main(["evaluate", "--truth", str(files / "truth.json"), "--model", str(files / "model.json"),
                 "--circuit", str(files / "c0.0" / "circuit.json"),
                 "--circuit", str(files / "c0.05" / "circuit.json"), "--out", str(files / "ev")]) == 0
    r = rows(files / "ev" / "roc.csv")
    assert r[1][1:] == ["0.0", "0.0"] and r[-2][1:] == ["1.0", "1.0"]
    assert main(["evaluate", "--truth", str(files / "truth.json"),
                 "--circuit", str(files / "c0.0" / "circuit.json"), "--out", str(files / "ev")]) == 1


def test_evaluate_grid_matches_recomputation(files):
    GroundTruthCircuit("t", {"a1.h0.out->final.in", "m1.out->final.in", "embed.out->a0.h0.v_input"}).save(
        files / "truth.json")
    assert main(["evaluate", "--mode", "grid", "--truth", str(files / "truth.json"),
                 *run_args(files, "--tau-eap", "0,0.05", "--tau-acdc", "0,0.1", out="grid")]) == 0
    r = rows(files / "grid" / "grid.csv")
    assert r[0] == ["tau_eap", "tau_acdc", "tpr", "fpr", "youden_j"] and len(r) == 5
    model = load_model(files / "model.json", files / "w.bin")
    cells = youden_grid(model, load_task(files / "task.json"), GroundTruthCircuit.load(files / "truth.json"),
                        [0, 0.05], [0, 0.1])
    for row, cell in zip(r[1:], cells):
        assert [float(x) for x in row] == [cell.tau_eap, cell.tau_acdc, cell.tpr, cell.fpr, cell.youden_j]


def test_evaluate_histogram_with_roles(files):
    main(["discover", *run_args(files)])
    GroundTruthCircuit("t", {"a1.h0.out->final.in", "a0.h1.out->final.in"},
                       {"a1.h0.out": "Mover", "a0.h1.out": "Helper"}).save(files / "truth.json")
    assert main(["evaluate", "--mode", "hist", "--truth", str(files / "truth.json"), "--bins", "4",
                 "--scores", str(files / "out" / "scores.csv"), "--out", str(files / "ev")]) == 0
    r = rows(files / "ev" / "histogram.csv")
    groups = [x[0] for x in r[1:]]
    assert groups == ["in-circuit"] * 4 + ["out-of-circuit"] * 4 + ["role:Helper"] * 4 + ["role:Mover"] * 4
    assert sum(int(x[3]) for x in r[1:9]) == 61


def test_evaluate_rejects_mismatched_scores(files, capsys):
    main(["discover", *run_args(files)])
    GroundTruthCircuit("t", {"a9.h0.out->final.in"}).save(files / "truth.json")
    assert main(["evaluate", "--truth", str(files / "truth.json"), "--model", str(files / "model.json"),
                 "--scores", str(files / "out" / "scores.csv"), "--out", str(files / "ev")]) == 2


def test_sweep_grids(files):
    edge = "a1.h0.out->final.in"
    assert main(["sweep", *run_args(files, "--edge", edge, "--lambdas", "2")]) == 0
    r = rows(files / "out" / "sweep.csv")
    assert r[0] == ["lambda", "metric_delta", "linear_reference"]
    assert [x[0] for x in r[1:]] == ["0.0", "1.0"] and float(r[1][1]) == 0.0
    assert main(["sweep", *run_args(files, "--edge", edge)]) == 0
    lams = [float(x[0]) for x in rows(files / "out" / "sweep.csv")[1:]]
    assert len(lams) == 21 and lams == sorted(lams)


def test_sweep_affine_model_is_linear(tmp_path):
    model, task = affine_model()
    model.config.save(tmp_path / "model.json")
    save_weights(tmp_path / "w.bin", model.weights)
    task.save(tmp_path / "task.json")
    assert main(["sweep", *run_args(tmp_path, "--edge", "embed.out->final.in")]) == 0
    for row in rows(tmp_path / "out" / "sweep.csv")[1:]:
        assert float(row[1]) == pytest.approx(float(row[2]), abs=1e-6)


def test_console_script_runs(files):
    proc = subprocess.run([sys.executable, "-m", "circscope.cli", "discover", *run_args(files, "--top-k", "3")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "circscope.cli", "discover"], capture_output=True, text=True)
    assert proc.returncode == 1
