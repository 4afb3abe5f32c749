import json
from pathlib import Path

import pytest

from mabo_dmpc.cli import main
from mabo_dmpc.scenarios import scenario_text


def csvs(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).glob("*.csv"))}


@pytest.mark.parametrize("argv", [[], ["learn"], ["learn", "--bogus"], ["baseline", "--scenario", "example9"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_schema_error_exit(tmp_path, capsys):
    doc = json.loads(scenario_text("toy-decoupled"))
    doc["horizonn"] = 3
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert main(["baseline", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "horizonn" in capsys.readouterr().err


def test_baseline_outputs(tmp_path):
    out = tmp_path / "b"
    assert main(["baseline", "--scenario", "toy-lq-2agent", "--out", str(out)]) == 0
    assert {"trace_ep0.csv", "distances.csv"} <= set(csvs(out))
    assert (out / "config.json").is_file() and (out / "diagnostics.log").is_file()
    lines = (out / "trace_ep0.csv").read_text().splitlines()
    assert lines[0] == "step,agent,x0,x1,u0,stop_reason,dual_iters"
    assert len(lines) == 1 + 2 * 11


def test_learn_rerun_byte_identical(tmp_path):
    argv = ["learn", "--scenario", "toy-lq-2agent", "--episodes", "2", "--seed", "7"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    a, b = csvs(tmp_path / "a"), csvs(tmp_path / "b")
    assert "learning_curve.csv" in a and "episodes.csv" in a
    assert a == b


def test_config_snapshot_reruns(tmp_path):
    assert main(["learn", "--scenario", "toy-lq-2agent", "--episodes", "1", "--seed", "3",
                 "--out", str(tmp_path / "a")]) == 0
    snap = json.loads((tmp_path / "a" / "config.json").read_text())
    assert snap["seed"] == 3 and snap["learning"]["episodes"] == 1
    assert main(["learn", "--scenario", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == 0
    assert csvs(tmp_path / "a") == csvs(tmp_path / "b")


def test_learning_curve_warmup_rows_blank(tmp_path):
    main(["learn", "--scenario", "toy-separable-quadratic", "--episodes", "3", "--out", str(tmp_path)])
    rows = (tmp_path / "learning_curve.csv").read_text().splitlines()
    assert rows[0] == "episode,agent,J_iN,best_so_far,primal_residual,dual_residual"
    assert rows[1].endswith(",,")  # warm-up evaluation
    assert not rows[-1].endswith(",,")


def test_verify_theory(tmp_path, capsys):
    assert main(["verify-theory", "--seed", "0", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out
    text = (tmp_path / "theory.csv").read_text().splitlines()
    assert text[0] == "check,max_error,trials,tolerance" and len(text) == 4


def test_export_plots(tmp_path):
    assert main(["export-plots", "--scenario", "toy-lq-2agent", "--episodes", "1", "--out", str(tmp_path)]) == 0
    names = set(csvs(tmp_path))
    assert {"fig_distances.csv", "fig_first_state.csv", "fig_controls.csv", "learning_curve.csv"} <= names
    body = (tmp_path / "fig_distances.csv").read_text()
    assert "baseline," in body and "learned," in body


def test_export_plots_needs_closed_loop(tmp_path):
    assert main(["export-plots", "--scenario", "toy-separable-quadratic", "--out", str(tmp_path)]) == 1
