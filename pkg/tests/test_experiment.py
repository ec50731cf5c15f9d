import json

import numpy as np
import pytest

from conftest import TINY_OVERRIDES
from warpbench import config
from warpbench.errors import WarpBenchError
from warpbench.experiment import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    FIELD_FILE,
    REPORT_FILE,
    _lock,
    load_report,
    run_defense_only,
    run_evaluation,
    run_experiment,
)
from warpbench.warp import WarpField


def _cfg(data_dir, out, **extra):
    values = {**TINY_OVERRIDES, "data_dir": str(data_dir), "output_dir": str(out), **extra}
    return config.with_overrides(config.ExperimentConfig(), values)


def test_run_writes_complete_report(fake_mnist, tmp_path):
    cfg = _cfg(fake_mnist, tmp_path / "run")
    report = run_experiment(cfg)
    run = tmp_path / "run"
    for name in (REPORT_FILE, CONFIG_FILE, FIELD_FILE, CHECKPOINT_FILE):
        assert (run / name).is_file()
    on_disk = load_report(run)
    assert on_disk == json.loads(json.dumps(report))
    assert on_disk["complete"] and on_disk["kind"] == "train"
    assert set(on_disk["metrics"]["final"]) == {"clean", "attack", "noise"}
    assert on_disk["metrics"]["epochs_run"] == 2 and len(on_disk["metrics"]["history"]) == 2
    assert config.load(run / CONFIG_FILE) == cfg
    assert "defenses" not in on_disk


def test_noise_metric_only_with_noise_mode(fake_mnist, tmp_path):
    cfg = _cfg(fake_mnist, tmp_path / "run", **{"poison.rho_n": 0.0})
    assert set(run_experiment(cfg)["metrics"]["final"]) == {"clean", "attack"}


def test_identical_configs_give_identical_metrics(fake_mnist, tmp_path):
    a = run_experiment(_cfg(fake_mnist, tmp_path / "a"))
    b = run_experiment(_cfg(fake_mnist, tmp_path / "b"))
    assert a["metrics"] == b["metrics"]
    assert (tmp_path / "a" / CHECKPOINT_FILE).read_bytes() == (tmp_path / "b" / CHECKPOINT_FILE).read_bytes()
    c = run_experiment(_cfg(fake_mnist, tmp_path / "c", seed=1))
    assert c["metrics"]["history"] != a["metrics"]["history"]


def test_warp_field_follows_warp_seed(fake_mnist, tmp_path):
    run_experiment(_cfg(fake_mnist, tmp_path / "a", **{"train.epochs": 0}))
    run_experiment(_cfg(fake_mnist, tmp_path / "b", **{"train.epochs": 0, "train.seed": 99}))
    run_experiment(_cfg(fake_mnist, tmp_path / "c", **{"train.epochs": 0, "warp.seed": 99}))
    fields = [WarpField.load(tmp_path / d / FIELD_FILE).offsets for d in "abc"]
    assert np.array_equal(fields[0], fields[1])
    assert not np.array_equal(fields[0], fields[2])


def test_evaluation_reproduces_final_metrics(fake_mnist, tmp_path):
    cfg = _cfg(fake_mnist, tmp_path / "run")
    report = run_experiment(cfg)
    again = run_evaluation(cfg, tmp_path / "run" / CHECKPOINT_FILE, tmp_path / "run" / FIELD_FILE)
    assert again == report["metrics"]["final"]


def test_defenses_during_training(fake_mnist, tmp_path):
    cfg = _cfg(fake_mnist, tmp_path / "run", **{f"defense.{d}": True
                                                 for d in ("neural_cleanse", "fine_pruning", "strip", "spectral")})
    report = run_experiment(cfg)
    run = tmp_path / "run"
    for name in ("neural_cleanse.csv", "fine_pruning.csv", "strip.csv", "spectral.csv",
                 "neural_cleanse_triggers.npz"):
        assert (run / name).is_file()
    nc = report["defenses"]["neural_cleanse"]
    assert len(nc["l1_norms"]) == 10
    assert len(report["defenses"]["fine_pruning"]["clean_acc"]) == 65
    strip_rows = (run / "strip.csv").read_text().splitlines()
    assert strip_rows[0] == "population,entropy" and len(strip_rows) == 1 + 40


def test_defense_only_mode(fake_mnist, tmp_path):
    run_experiment(_cfg(fake_mnist, tmp_path / "run"))
    ckpt = tmp_path / "run" / CHECKPOINT_FILE
    before = ckpt.read_bytes()
    cfg = _cfg(fake_mnist, tmp_path / "def")
    report = run_defense_only(cfg, ckpt, tmp_path / "run" / FIELD_FILE, ["strip", "spectral"])
    assert ckpt.read_bytes() == before
    assert report["kind"] == "defend" and "metrics" not in report
    assert set(report["defenses"]) == {"strip", "spectral"}
    assert load_report(tmp_path / "def")["defenses"]["spectral"]["auc"] == report["defenses"]["spectral"]["auc"]


def test_output_directory_lock(fake_mnist, tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    held = _lock(out)
    try:
        with pytest.raises(WarpBenchError, match="another experiment"):
            run_experiment(_cfg(fake_mnist, out))
    finally:
        held.release()
    run_experiment(_cfg(fake_mnist, out, **{"train.epochs": 0}))


def test_failed_run_leaves_incomplete_report(tmp_path, monkeypatch):
    monkeypatch.delenv("WARPBENCH_DATA_DIR", raising=False)
    cfg = _cfg(tmp_path / "missing", tmp_path / "run")
    with pytest.raises(WarpBenchError):
        run_experiment(cfg)
    assert load_report(tmp_path / "run")["complete"] is False


def test_load_report_missing(tmp_path):
    with pytest.raises(WarpBenchError):
        load_report(tmp_path)
