import csv
import json

import pytest

from ballcatch.cli import main


def manifest(path):
    doc = json.loads((path / "manifest.json").read_text())
    assert doc["schema"] and len(doc["config_sha256"]) == 64
    return doc


def test_simulate_small(tmp_path, capsys):
    out = tmp_path / "sim"
    argv = ["simulate", "--preset", "experiment_b", "--learning", "off", "--n-throws", "3", "--jobs", "1",
            "--seed", "5", "--out", str(out)]
    assert main(argv) == 0
    rows = list(csv.DictReader(open(out / "episodes.csv")))
    assert len(rows) == 3
    doc = manifest(out)
    assert doc["argv"] == argv and doc["seed"] == 5 and doc["config"]["learning"] is False
    assert "success rate" in capsys.readouterr().out


def test_simulate_jobs_invariant(tmp_path):
    base = ["simulate", "--preset", "experiment_b", "--learning", "off", "--n-throws", "4"]
    assert main(base + ["--jobs", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "episodes.csv").read_bytes() == (tmp_path / "b" / "episodes.csv").read_bytes()


def test_simulate_config_errors(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("format_version = 1\nflavour = 'x'\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--preset", "experiment_b", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--no-such-flag"])
    assert exc.value.code == 2


@pytest.mark.parametrize("low", ["qp", "trapezoid"])
def test_plan_then_validate(tmp_path, capsys, low):
    out = tmp_path / low
    assert main(["plan", "--low-level", low, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "catch at t_f" in text and "timings" in text
    doc = json.loads((out / "plan.json").read_text())
    assert doc["planner"]["low_level"] == low
    manifest(out)
    assert main(["validate", str(out / "plan.json")]) == 0


def test_validate_catches_tampering(tmp_path):
    out = tmp_path / "p"
    assert main(["plan", "--out", str(out)]) == 0
    doc = json.loads((out / "plan.json").read_text())
    doc["trajectory"]["q"][3][0] += 0.01
    (out / "bad.json").write_text(json.dumps(doc))
    assert main(["validate", str(out / "bad.json")]) == 1
    (out / "cut.json").write_text((out / "plan.json").read_text()[:200])
    assert main(["validate", str(out / "cut.json")]) == 2
    (out / "other.json").write_text(json.dumps({"schema": "something.else"}))
    assert main(["validate", str(out / "other.json")]) == 2
    assert main(["validate", str(out / "missing.json")]) == 2


def test_plan_unreachable(tmp_path):
    ball = tmp_path / "ball.json"
    ball.write_text(json.dumps({"schema": "ballcatch.ball_state", "version": 1,
                                "b": [9.0, 6.0, 1.2], "b_dot": [0.0, 0.0, 4.0]}))
    assert main(["plan", "--ball", str(ball), "--out", str(tmp_path / "o")]) == 4


def test_plan_bad_inputs(tmp_path):
    assert main(["plan", "--ball", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    assert main(["plan", "--q0", "1,2,3", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "ball.json"
    bad.write_text(json.dumps({"schema": "ballcatch.ball_state", "version": 1, "b": [1, 2, 3]}))
    assert main(["plan", "--ball", str(bad), "--out", str(tmp_path)]) == 2


def test_estimate_drag_synthetic(tmp_path, capsys):
    out = tmp_path / "drag"
    assert main(["estimate-drag", "--synthetic", "20", "--out", str(out)]) == 0
    doc = json.loads((out / "drag_model.json").read_text())
    assert abs(doc["K_D"] - 0.0238) / 0.0238 < 0.01 and doc["n_tosses"] == 20
    manifest(out)
    # the written tosses can be read back as a directory input
    assert main(["estimate-drag", str(out / "tosses"), "--out", str(tmp_path / "again")]) == 0
    again = json.loads((tmp_path / "again" / "drag_model.json").read_text())
    assert again["K_D"] == doc["K_D"]


def test_estimate_drag_without_input(tmp_path):
    assert main(["estimate-drag", "--out", str(tmp_path)]) == 2


def test_train_outputs(tmp_path, capsys):
    out = tmp_path / "model"
    assert main(["train", "--seed", "1", "--trajectories", "3", "--epochs", "3", "--out", str(out)]) == 0
    assert (out / "model.npz").exists()
    assert all((out / f"joint_{j}.npz").exists() for j in range(8))
    rows = list(csv.DictReader(open(out / "loss_curves.csv")))
    assert len(rows) == 8 * 3
    assert manifest(out)["seed"] == 1
    assert "held-out RMSE reduction" in capsys.readouterr().out


def test_simulate_with_trained_model(tmp_path):
    model = tmp_path / "model"
    assert main(["train", "--trajectories", "8", "--out", str(model)]) == 0
    out = tmp_path / "sim"
    assert main(["simulate", "--preset", "experiment_b", "--n-throws", "2", "--jobs", "1",
                 "--model", str(model / "model.npz"), "--out", str(out)]) == 0
    assert manifest(out)["config"]["model_path"].endswith("model.npz")


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "ballcatch" in capsys.readouterr().out
