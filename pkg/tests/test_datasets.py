from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsasan.cstr import VARIABLES, CstrParams, SimRun, export_run, load_run
from tsasan.datasets import (HEALTH_STATES, TASK_IDS, RunRegistry, WindowSet, build_task,
                             class_balance_report, derive_seed, import_external_csv, load_dataset,
                             read_windows, save_dataset, task_config, window_run, write_windows)
from tsasan.errors import ConfigurationError, DatasetError, ParseError

H = HEALTH_STATES.index("H")


def fake_run(mode="M1", fault="H", n=1200, onset=200, seed=0, v=len(VARIABLES)):
    x = np.arange(n, dtype=float)[:, None] + 1000.0 * np.arange(v)[None, :]
    return SimRun(mode, fault, x, onset, seed=seed)


def fake_registry(task, per_class=1):
    reg = RunRegistry()
    for split_i, split in enumerate(("train", "test")):
        cats = task.train_categories if split == "train" else task.test_categories
        for d in task.modes:
            for c in cats[d]:
                for rep in range(per_class):
                    reg.add(fake_run(d, c, n=300, seed=derive_seed(0, d, c, split, rep)), split)
    return reg


def test_healthy_window_count():
    ws = window_run(fake_run(), 4)
    assert len(ws) == (1200 - 64) // 4 + 1 == 285
    assert np.all(ws.labels == H)
    assert ws.features.shape[1:] == (len(VARIABLES), 64)


def test_straddling_windows_dropped():
    ws = window_run(fake_run(fault="F2"), 4)
    starts = ws.features[:, 0, 0].astype(int)
    for s, lab in zip(starts, ws.labels):
        contains = set(range(s, s + 64))
        assert not ({199, 200} <= contains)
        assert lab == (HEALTH_STATES.index("F2") if s >= 200 else H)
    assert Counter(ws.labels.tolist()) == {H: 35, HEALTH_STATES.index("F2"): 235}


def test_stride_equal_to_length_gives_one_window():
    ws = window_run(fake_run(n=64), 64)
    assert len(ws) == 1 and ws.features[0, 0, 0] == 0


def test_onset_zero_labels_everything_faulty():
    ws = window_run(fake_run(fault="F5", onset=0), 8)
    assert np.all(ws.labels == HEALTH_STATES.index("F5"))


def test_short_run_rejected():
    with pytest.raises(DatasetError):
        window_run(fake_run(n=63), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(64, 400), st.integers(1, 70))
def test_windows_start_at_multiples_of_stride(n, stride):
    ws = window_run(fake_run(n=n), stride)
    starts = ws.features[:, 0, 0]
    np.testing.assert_array_equal(starts, stride * np.arange(len(ws)))
    assert len(ws) == (n - 64) // stride + 1


@pytest.mark.parametrize("task_id", TASK_IDS)
def test_task_table_coverage(task_id):
    task = task_config(task_id)
    union = set().union(*map(set, task.train_categories.values()))
    assert union == set(HEALTH_STATES)
    assert all("H" in c for c in task.train_categories.values())
    assert all(set(c) == set(HEALTH_STATES) for c in task.test_categories.values())


def test_table_rows_for_t4_and_t7():
    t4 = task_config("T4")
    assert t4.modes == ("M1", "M2")
    assert t4.train_categories["M1"] == ("H", "F1", "F2", "F3", "F4")
    assert t4.train_categories["M2"] == ("H", "F5", "F6", "F7", "F8", "F9")
    t7 = task_config("T7")
    assert t7.modes == ("M1", "M2", "M3") and t7.train_categories["M3"] == ("H",)
    t1 = task_config("T1")
    assert "F9" not in t1.train_categories["M1"] and "F8" not in t1.train_categories["M2"]


def test_unknown_task():
    with pytest.raises(ConfigurationError, match="T1"):
        task_config("T10")


@pytest.fixture(scope="module")
def t4_built():
    task = task_config("T4")
    return task, build_task(task, fake_registry(task), stride=8)


def test_build_respects_train_categories(t4_built):
    task, (train, test, manifest) = t4_built
    assert len(train.select(domain="M2", category="F1")) == 0
    for d, c in train.pairs():
        assert c in task.train_categories[d]
    assert test.pairs() == {(d, c) for d in task.modes for c in HEALTH_STATES}


def test_manifest_counts_match_windows(t4_built):
    _, (train, test, manifest) = t4_built
    total = sum(n for k, n in manifest.counts.items() if k.startswith("train/"))
    assert total == len(train)
    assert sum(r["windows"] for r in manifest.runs if r["split"] == "test") == len(test)
    train_seeds = {r["seed"] for r in manifest.runs if r["split"] == "train"}
    test_seeds = {r["seed"] for r in manifest.runs if r["split"] == "test"}
    assert not train_seeds & test_seeds


def test_missing_runs_enumerated():
    task = task_config("T4")
    reg = fake_registry(task)
    del reg.runs["M2", "F7", "test"]
    with pytest.raises(DatasetError, match=r"\(M2, F7, test\)"):
        build_task(task, reg)


def test_shared_seed_rejected():
    task = task_config("T4")
    reg = fake_registry(task)
    reg.get("M1", "H", "test")[0].seed = reg.get("M1", "H", "train")[0].seed
    with pytest.raises(DatasetError, match="share seeds"):
        build_task(task, reg)


def test_balance_report():
    assert class_balance_report(WindowSet.empty()) == {}
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 200)
    doms = rng.choice(["M1", "M2"], 200)
    ws = WindowSet(np.zeros((200, 2, 64)), labels, doms)
    rep = class_balance_report(ws)
    assert sum(rep.values()) == 200
    for (d, c), n in rep.items():
        assert n == sum(1 for i in range(200) if doms[i] == d and labels[i] == HEALTH_STATES.index(c))


def test_import_round_trip_gives_identical_windows(tmp_path):
    from tsasan.cstr import fault_spec, mode_spec, simulate

    run = simulate(CstrParams(), mode_spec("M1"), fault_spec("F1"), 4)
    path, _ = export_run(run, tmp_path / "r.csv")
    back = import_external_csv(path, "M1", "F1", 200)
    a, b = window_run(run, 4), window_run(back, 4)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert load_run(path).fault_id == "F1"


def test_import_reports_line_numbers(tmp_path):
    lines = ["a,b,c"] + [f"{i},{i},{i}" for i in range(20)]
    lines[16] = "1,oops,3"         # the 17th line of the file
    p = tmp_path / "bad.csv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        import_external_csv(p, "TE", "F1", 0)
    assert exc.value.line == 17 and ":17:" in str(exc.value)
    lines[16] = "1,2"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="columns"):
        import_external_csv(p, "TE", "F1", 0)


def test_external_domain_windows(tmp_path):
    p = tmp_path / "ext.csv"
    rows = ["x,y"] + [f"{i},{2 * i}" for i in range(100)]
    p.write_text("\n".join(rows) + "\n")
    run = import_external_csv(p, "TE", "F3", 0)
    ws = window_run(run, 4)
    assert ws.features.shape[1] == 2 and set(ws.domains) == {"TE"}
    assert np.all(ws.labels == HEALTH_STATES.index("F3"))


def test_windows_csv_round_trip(tmp_path, t4_built):
    task, (train, test, manifest) = t4_built
    path = write_windows(train[:50], tmp_path / "w.csv")
    back = read_windows(path)
    assert back.features.tobytes() == train[:50].features.tobytes()
    assert list(back.domains) == list(train[:50].domains)
    save_dataset(tmp_path / "ds", train, test, manifest)
    tr, te, man = load_dataset(tmp_path / "ds")
    assert len(tr) == len(train) and len(te) == len(test) and man.counts == manifest.counts


def test_registry_save_load(tmp_path):
    reg = RunRegistry()
    reg.add(fake_run("M1", "H", n=100, seed=1), "train")
    reg.add(fake_run("M1", "F1", n=100, seed=2), "test")
    reg.save(tmp_path)
    back = RunRegistry.load(tmp_path)
    assert back.seeds("train") == {1} and back.seeds("test") == {2}
    with pytest.raises(DatasetError):
        RunRegistry.load(tmp_path / "nothing")
