import json

import pytest

from tsasan.cli import apply_override, default_config, main

FAST = ["--set", "trainer.epochs=1", "--set", "data.stride=32", "--set", "data.runs_per_class=1"]


def test_simulate_writes_run(tmp_path, capsys):
    assert main(["simulate", "--mode", "M1", "--fault", "F3", "--seed", "7", "--out", str(tmp_path)]) == 0
    csv_path = tmp_path / "M1_F3_s7.csv"
    assert len(csv_path.read_text().splitlines()) == 1201
    assert json.loads((tmp_path / "M1_F3_s7.json").read_text())["fault_id"] == "F3"
    first = csv_path.read_bytes()
    assert main(["simulate", "--mode", "M1", "--fault", "F3", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert csv_path.read_bytes() == first
    assert main(["simulate", "--mode", "M1", "--fault", "F3", "--seed", "7", "--out", str(tmp_path),
                 "--check"]) == 0
    assert "identical" in capsys.readouterr().out


def test_unknown_fault_is_usage_error(tmp_path, capsys):
    assert main(["simulate", "--fault", "F99", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert all(f in err for f in ["H", "F1", "F5", "F9"])


def test_bad_arguments_exit_one():
    with pytest.raises(SystemExit) as exc:
        main(["experiment"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1


def test_overrides():
    cfg = default_config()
    apply_override(cfg, "trainer.epochs=5")
    apply_override(cfg, "generation.iss_ratio=0.25")
    apply_override(cfg, "plant.Kp=3.5")
    assert cfg["trainer"]["epochs"] == 5 and cfg["generation"]["iss_ratio"] == 0.25
    assert cfg["plant"]["Kp"] == 3.5


def test_report(tmp_path, capsys):
    paths = []
    for t, acc in (("T1", 0.9), ("T2", 0.6)):
        p = tmp_path / t / "metrics.json"
        p.parent.mkdir()
        p.write_text(json.dumps({"task_id": t, "acc": acc}))
        paths.append(str(p.parent))
    out = tmp_path / "summary.csv"
    assert main(["report", "--inputs", *paths, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "model,T1,T2,average"
    assert float(lines[1].split(",")[-1]) == pytest.approx(0.75, abs=1e-12)
    assert main(["report", "--inputs", str(tmp_path / "missing.json")]) == 2


def test_missing_runs_message(tmp_path, capsys):
    runs = tmp_path / "runs"
    assert main(["simulate", "--mode", "M1", "--fault", "H", "--out", str(runs / "train")]) == 0
    code = main(["experiment", "--task", "T4", "--runs", str(runs), "--out", str(tmp_path / "exp")])
    assert code == 2
    assert "tsasan simulate --task T4" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert main(["simulate", "--task", "T4", "--seed", "3", "--out", str(root / "runs"), *FAST]) == 0
    assert main(["build", "--task", "T4", "--runs", str(root / "runs"), "--seed", "3",
                 "--out", str(root / "ds"), *FAST]) == 0
    return root


def test_stepwise_pipeline(pipeline, capsys):
    root = pipeline
    assert main(["generate", "--dataset", str(root / "ds"), "--out", str(root / "gen"), *FAST]) == 0
    assert (root / "gen" / "domain_stats.json").exists()
    assert main(["train", "--dataset", str(root / "gen"), "--out", str(root / "model"), *FAST]) == 0
    assert main(["evaluate", "--checkpoint", str(root / "model" / "checkpoint.json"),
                 "--dataset", str(root / "gen"), "--out", str(root / "eval")]) == 0
    m = json.loads((root / "eval" / "metrics.json").read_text())
    assert 0 <= m["acc"] <= 1 and len(m["fdr"]) == 10


def test_experiment_with_existing_runs(pipeline, capsys):
    out = pipeline / "exp"
    args = ["experiment", "--task", "T4", "--ablation", "A5", "--runs", str(pipeline / "runs"),
            "--seed", "3", "--out", str(out), *FAST]
    assert main(args) == 0
    printed = capsys.readouterr().out
    assert "ACC" in printed and "FDR" in printed
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["run_spec"]["config"]["trainer"]["epochs"] == 1
    assert main(args + ["--check"]) == 0
    (out / "metrics.json").write_text("{}")
    assert main(args + ["--check"]) == 3
