import json

import pytest

from anharmonic import lab


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return path


def test_validate_exit_zero_and_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path / "v.json", experiment="validate", model="harmonic-chain")
    out = tmp_path / "out"
    assert lab.main(["validate", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("manifest.json", "results.json", "config.json", "series.csv"):
        assert (out / name).exists(), name
    text = capsys.readouterr().out
    assert "PASS" in text and "FAIL" not in text
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == "validate"
    assert manifest["passed"] is True
    names = [c["name"] for c in manifest["checks"]]
    assert len(names) == len(set(names)) > 0


def test_failing_check_exits_one(tmp_path):
    # an impossible reversal tolerance must fail, not crash
    cfg = write_config(tmp_path / "e.json", experiment="evolve", model="harmonic-chain",
                       params={"a": 2, "t": 0.1, "h": 0.01, "n_snapshots": 2},
                       tolerances={"reversal": 0.0, "energy_drift": 0.0})
    assert lab.main(["evolve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


@pytest.mark.parametrize("content", ["{not json", json.dumps({"experiment": "validate", "bogus": 1}),
                                     json.dumps({"experiment": "evolve"}),
                                     json.dumps({"experiment": "validate", "model": "no-such-model"}),
                                     json.dumps({"experiment": "validate", "seed": -1})])
def test_config_errors_exit_two(tmp_path, content):
    cfg = tmp_path / "bad.json"
    cfg.write_text(content)
    assert lab.main(["validate", "--config", str(cfg)]) == 2


def test_usage_errors_exit_two(tmp_path):
    assert lab.main(["no-such-experiment", "--config", "x.json"]) == 2
    assert lab.main(["validate"]) == 2
    assert lab.main(["validate", "--config", str(tmp_path / "missing.json")]) == 2


def test_unknown_tolerance_rejected():
    with pytest.raises(lab.ConfigError):
        lab.ExperimentConfig("validate", tolerances={"not_a_tolerance": 1.0})
    with pytest.raises(lab.ConfigError):
        lab.ExperimentConfig("nope")


def test_inline_model_and_relative_path(tmp_path):
    from anharmonic.model import save_model, fpu_chain
    save_model(fpu_chain(), tmp_path / "m.json")
    cfg = lab.ExperimentConfig.from_file(write_config(tmp_path / "c.json", experiment="validate",
                                                      model="m.json"))
    assert cfg.load_model().hash == fpu_chain().hash


def test_evolve_writes_snapshots(tmp_path):
    cfg = write_config(tmp_path / "e.json", experiment="evolve", model="harmonic-chain",
                       params={"a": 2, "t": 0.5, "h": 0.001, "n_snapshots": 5})
    out = tmp_path / "o"
    assert lab.main(["evolve", "--config", str(cfg), "--out", str(out)]) == 0
    json.loads((out / "trajectory.json").read_text())
    assert len(list(out.glob("snapshot_*.csv"))) >= 2


def test_series_rows_are_tidy(tmp_path):
    cfg = lab.ExperimentConfig("periodize", model="harmonic-chain", params={"N": 2000},
                               out=str(tmp_path))
    manifest = lab.run(cfg)
    rows = lab.emit_plots(manifest)
    assert rows and set(rows[0]) == {"experiment", "series", "x", "y", "stderr"}
    header = (tmp_path / "series.csv").read_text().splitlines()[0]
    assert header.split(",") == ["experiment", "series", "x", "y", "stderr"]


def _results(tmp_path, tag, threads, seed=3):
    cfg = lab.ExperimentConfig("conserve-energy", model="fpu-chain", seed=seed, threads=threads,
                               params={"a": 6, "N": 3000, "t_grid": [0.5]}, out=str(tmp_path / tag))
    lab.run(cfg)
    return (tmp_path / tag / "results.json").read_text()


def test_rerun_is_bit_exact(tmp_path):
    assert _results(tmp_path, "a", 1) == _results(tmp_path, "b", 1)


def test_thread_count_does_not_change_results(tmp_path):
    assert _results(tmp_path, "a", 1) == _results(tmp_path, "b", 4)


def test_seed_changes_results(tmp_path):
    assert _results(tmp_path, "a", 1, seed=1) != _results(tmp_path, "b", 1, seed=2)


def test_every_experiment_registered():
    assert set(lab.EXPERIMENTS) == {"validate", "evolve", "conserve-energy", "conserve-entropy", "locality",
                                    "bracket", "pressure", "equilibrium", "variational", "des-diagnostic",
                                    "periodize"}
