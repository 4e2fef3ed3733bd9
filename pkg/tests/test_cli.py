import json

from nnilqr.cli import main
from nnilqr.config import bundled_scenario_dir
from nnilqr.datagen import generate_dataset
from nnilqr.neural import TransitionDataset


def short_scenarios(dest, duration=0.3):
    dest.mkdir()
    for f in sorted(bundled_scenario_dir().glob("*.scenario")):
        text = f.read_text().replace("duration = 120.0", f"duration = {duration}")
        (dest / f.name).write_text(text)
    return dest


# -- usage --------------------------------------------------------------------------


def test_no_command_is_a_usage_error(capsys):
    assert main([]) == 2


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["run", "gem_circle", "--bogus"]) == 2


def test_global_flags_work_before_and_after_the_command(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "a"), "gen-data", "--seconds", "2"]) == 0
    assert main(["gen-data", "--seconds", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "gem.data.csv").read_text() == (tmp_path / "b" / "gem.data.csv").read_text()


# -- gen-data / train ---------------------------------------------------------------


def test_gen_data_writes_dataset_and_coverage(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["gen-data", "--platform", "warthog", "--seconds", "30", "--seed", "4", "--output", str(out)]) == 0
    data = TransitionDataset.from_csv(out)
    ref = generate_dataset("warthog", 30, seed=4)
    assert len(data) == len(ref) and data.platform == "warthog"
    report = json.loads((tmp_path / "d.coverage.json").read_text())
    assert report["rows"] == len(ref) and set(report["channels"]) >= {"v", "omega", "v_cmd", "omega_cmd"}
    assert "v_cmd" in (tmp_path / "d.coverage.txt").read_text()
    assert f"wrote {len(ref)} rows" in capsys.readouterr().out


def test_gen_data_rejects_nonpositive_seconds(capsys):
    assert main(["gen-data", "--seconds", "0"]) == 2
    assert "--seconds" in capsys.readouterr().err


def test_train_on_one_row_fails_with_message(tmp_path, capsys):
    full = generate_dataset("gem", 1.0, seed=0)
    one = TransitionDataset(full.X[:1], full.U[:1], full.X_next[:1], full.episode_id[:1], full.platform, full.dt)
    path = tmp_path / "one.csv"
    one.to_csv(path)
    assert main(["train", str(path), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "1 rows" in err and "at least" in err
    assert not (tmp_path / "gem.model.json").exists()


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", str(tmp_path / "none.csv")]) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_train_writes_model_and_enforces_ceiling(tmp_path, capsys):
    data = tmp_path / "w.csv"
    assert main(["gen-data", "--platform", "warthog", "--seconds", "120", "--output", str(data)]) == 0
    # two epochs cannot reach a 0.01% relative error: files are written, exit code flags the ceiling
    rc = main(["train", str(data), "--epochs", "2", "--max-rel-rms", "0.0001", "--out", str(tmp_path)])
    assert rc == 1
    assert "exceeds ceiling" in capsys.readouterr().err
    assert (tmp_path / "warthog.model.json").exists()
    report = json.loads((tmp_path / "warthog.train.json").read_text())
    assert report["epochs"] == 2 and len(report["val_rel_rms"]) == 2
    assert main(["train", str(data), "--epochs", "2", "--max-rel-rms", "10", "--out", str(tmp_path)]) == 0


# -- run ----------------------------------------------------------------------------


def test_run_bundled_scenario(tmp_path, capsys):
    assert main(["run", "gem_circle", "--duration", "0.5", "--out", str(tmp_path), "--trace"]) == 0
    metrics = json.loads((tmp_path / "gem_circle.metrics.json").read_text())
    assert set(metrics) == {"ace", "mce", "ave", "mve"}
    summary = json.loads((tmp_path / "gem_circle.summary.json").read_text())
    assert summary["steps"] == 15 and summary["metrics"] == metrics
    assert summary["metrics_after_transient"] is None  # shorter than the 5 s transient
    lines = (tmp_path / "gem_circle.log.csv").read_text().splitlines()
    assert len(lines) == 16 and lines[0].startswith("t,s,d_e,v_e,theta_e,")
    trace = [json.loads(x) for x in (tmp_path / "gem_circle.trace.jsonl").read_text().splitlines()]
    assert trace and {"iteration", "mu", "alpha", "cost"} <= set(trace[0])
    assert "ACE" in capsys.readouterr().out


def test_run_seed_changes_noise(tmp_path, capsys):
    for seed in ("1", "2"):
        assert main(["run", "gem_circle", "--duration", "0.3", "--seed", seed, "--out", str(tmp_path / seed)]) == 0
    a = (tmp_path / "1" / "gem_circle.log.csv").read_text()
    b = (tmp_path / "2" / "gem_circle.log.csv").read_text()
    assert a != b


def test_run_missing_model_names_the_path(tmp_path, capsys):
    scen = tmp_path / "m.scenario"
    scen.write_text('platform = "gem"\n[model]\npath = "no_such_model.json"\n')
    assert main(["run", str(scen), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "model file not found" in err and "no_such_model.json" in err


def test_run_unknown_scenario(capsys):
    assert main(["run", "does_not_exist"]) == 2
    assert "scenario file not found" in capsys.readouterr().err


def test_run_config_error_has_location(tmp_path, capsys):
    scen = tmp_path / "bad.scenario"
    scen.write_text('platform = "gem"\n[controller]\nhorizon = 2\n')
    assert main(["run", str(scen)]) == 2
    assert "bad.scenario:3: field 'controller.horizon'" in capsys.readouterr().err


# -- table --------------------------------------------------------------------------


def test_table_over_bundled_scenarios(tmp_path, capsys):
    d = short_scenarios(tmp_path / "scen")
    assert main(["table", str(d), "--out", str(tmp_path / "o1")]) == 0
    text = (tmp_path / "o1" / "table.txt").read_text().splitlines()
    assert text[0].split() == ["Reference", "ACE", "MCE", "AVE", "MVE"]
    assert [ln.split()[0] for ln in text[1:]] == [
        "gem_circle", "gem_combination", "gem_eight", "gem_oval", "gem_snake", "warthog_combination",
    ]
    assert main(["table", str(d), "--jobs", "2", "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o1" / "table.csv").read_text() == (tmp_path / "o2" / "table.csv").read_text()


def test_table_filter_and_failures(tmp_path, capsys):
    d = short_scenarios(tmp_path / "scen")
    (d / "gem_oval.scenario").write_text(
        (d / "gem_oval.scenario").read_text().replace('path = "bundled:gem"', 'path = "bundled:warthog"')
    )
    assert main(["table", str(d), "--filter", "oval,circle", "--out", str(tmp_path / "o")]) == 1
    csv_lines = (tmp_path / "o" / "table.csv").read_text().splitlines()
    assert len(csv_lines) == 3
    assert csv_lines[2].startswith("gem_oval,,,,,") and "warthog" in csv_lines[2]


def test_table_usage_errors(tmp_path, capsys):
    assert main(["table", str(tmp_path / "missing")]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["table", str(empty)]) == 2


# -- verify -------------------------------------------------------------------------


def test_verify_single_suite(capsys):
    assert main(["verify", "--filter", "riccati"]) == 0
    out = capsys.readouterr().out
    assert "riccati" in out and "gradient" not in out and "all suites passed" in out


def test_verify_unknown_suite(capsys):
    assert main(["verify", "--filter", "nope"]) == 2


def test_verify_with_corrupted_model_fails(tmp_path, capsys):
    bad = tmp_path / "bad.model.json"
    bad.write_text('{"format": "nnilqr.mlp", "version": 1, "weights": [')
    assert main(["verify", "--filter", "gradient", "--model", str(bad)]) == 1
    assert "failed suites: gradient" in capsys.readouterr().out


def test_verify_with_nan_model_fails(tmp_path, capsys):
    model = json.loads((bundled_scenario_dir().parent / "models" / "gem.model.json").read_text())
    model["weights"][0][0][0] = float("nan")
    bad = tmp_path / "nan.model.json"
    bad.write_text(json.dumps(model))
    assert main(["verify", "--filter", "gradient", "--model", str(bad)]) == 1
    assert "failed suites: gradient" in capsys.readouterr().out
