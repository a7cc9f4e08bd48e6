import json
from pathlib import Path

import numpy as np
import pytest

from debatejudge.cli import main
from debatejudge.harness import write_scores_csv
from debatejudge.mixture import RoundScores, fit

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def score_file(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for t in range(1, 6):
        comp = rng.random(300) < 0.6
        s = rng.binomial(7, np.where(comp, rng.beta(8, 2, 300), rng.beta(2, 8, 300)))
        rows += [(t, f"i{j}", int(v), 7) for j, v in enumerate(s)]
    path = tmp_path / "scores.csv"
    write_scores_csv(path, rows)
    return path


def test_simulate_writes_artifacts_and_report(capsys, tmp_path):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "simulate", "--items", "50", "--rounds", "4", "--seed", "2", "--out", str(out_dir))
    assert code == 0
    report = json.loads(out)
    assert report["items"] == 50 and report["T"] == 4
    for name in ("manifest.json", "items.jsonl", "scores.csv", "summary.json"):
        assert (out_dir / name).exists()
    man = json.loads((out_dir / "manifest.json").read_text())
    assert man["argv"][:1] == ["simulate"]

    code, out2, _ = run(capsys, "report", "--run", str(out_dir), "--histograms-csv", str(tmp_path / "h.csv"))
    assert code == 0
    again = json.loads(out2)
    assert again["accuracy"] == report["accuracy"]
    assert (tmp_path / "h.csv").read_text().startswith("round,correct_count,items")


def test_simulate_config_file_with_override(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"items": 30, "T": 3, "seed": 1}))
    code, out, _ = run(capsys, "simulate", "--config", str(cfg), "--rounds", "2")
    assert code == 0
    report = json.loads(out)
    assert report["items"] == 30 and report["T"] == 2


def test_fit_matches_library(capsys, score_file):
    code, out, _ = run(capsys, "fit", "--scores", str(score_file), "--round", "2")
    assert code == 0
    (row,) = json.loads(out)
    import csv

    with open(score_file) as fh:
        scores = [int(r["correct_count"]) for r in csv.DictReader(fh) if r["round"] == "2"]
    expected = fit(RoundScores(7, tuple(scores))).final.as_dict()
    assert {k: row[k] for k in expected} == expected


def test_stop_and_sweep(capsys, score_file):
    code, out, _ = run(capsys, "stop", "--scores", str(score_file), "--ks-threshold", "1.0")
    assert code == 0
    res = json.loads(out)
    assert res["stopped"] and res["stop_round"] == 3
    assert res["records"][0]["ks"] is None

    code, out, _ = run(capsys, "sweep", "--scores", str(score_file), "--thresholds", "0.0", "0.05", "1.0")
    assert code == 0
    rows = json.loads(out)
    assert [r["threshold"] for r in rows] == [0.0, 0.05, 1.0]
    assert rows[0]["rounds_processed"] == 5 and not rows[0]["stopped_early"]
    assert rows[2]["rounds_processed"] == 3


def test_debate_offline_fake_reply(capsys, tmp_path):
    task = json.loads((GOLDEN / "bomb_task.json").read_text())
    tasks = tmp_path / "tasks.jsonl"
    tasks.write_text(json.dumps(task) + "\n")
    code, out, _ = run(
        capsys, "debate", "--tasks", str(tasks), "--n-agents", "3", "--rounds", "2",
        "--fake-reply", "Reasoning\nFinal Answer: 2", "--out", str(tmp_path / "llm"),
    )
    assert code == 0
    report = json.loads(out)
    assert report["outcome_kinds"] == {"Consensus": 1}
    tr = json.loads(next((tmp_path / "llm" / "transcripts").glob("*.json")).read_text())
    assert tr["outcome"] == "2" and tr["rounds_executed"] == 1


def test_debate_requires_endpoint(capsys, tmp_path):
    tasks = tmp_path / "t.jsonl"
    tasks.write_text((GOLDEN / "bomb_task.json").read_text().replace("\n", "") + "\n")
    code, _, err = run(capsys, "debate", "--tasks", str(tasks))
    assert code == 2
    assert json.loads(err)["error"] == "ConfigError"


@pytest.mark.parametrize(
    "argv",
    [
        ("fit", "--scores", "/nonexistent/scores.csv"),
        ("simulate", "--items", "0"),
        ("simulate", "--ks-threshold", "3"),
    ],
)
def test_errors_are_json_with_nonzero_exit(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 2 and out == ""
    payload = json.loads(err)
    assert set(payload) == {"error", "message"}


def test_bad_score_header(capsys, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    code, _, err = run(capsys, "stop", "--scores", str(path))
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


def test_usage_error_exit_code(capsys):
    assert main(["nope"]) == 2
    assert main(["--help"]) == 0
