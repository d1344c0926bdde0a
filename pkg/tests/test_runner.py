import json
import os

import numpy as np
import pandas as pd
import pytest

from src import runner
from src.constants import METRICS_COLUMNS
from src.errors import ConfigError, PoisonedStateError, StrictParseError, TrainingAbortedError
from src.runner import MetricsRecord, RunConfig, apply_overrides, load_config, parse_config, run_experiment


def test_empty_config_takes_training_defaults(tmp_path):
    path = tmp_path / "empty.toml"
    path.write_text("[training]\n")
    config = load_config(str(path))
    assert (config.training.epochs, config.training.batch_size) == (100, 512)
    assert config.dataset.sample_count == 65_536
    assert config.model.dropout_rate == 0.1
    assert config.optimizer == RunConfig().optimizer


def test_misspelled_key_is_rejected(tmp_path):
    path = tmp_path / "typo.toml"
    path.write_text("[training]\nepochss = 3\n")
    with pytest.raises(StrictParseError):
        load_config(str(path))


@pytest.mark.parametrize(
    "doc",
    [{"trainer": {}}, {"model": {"vocab_out": 4}}, {"optimizer": {"preset": "adam", "betta": 0.5}}],
)
def test_unknown_sections_and_keys(doc):
    with pytest.raises(StrictParseError):
        parse_config(doc)


@pytest.mark.parametrize(
    "doc",
    [
        {"model": {"d": 10, "h": 4}},
        {"target": {"pattern": [0.7, 0.2]}},
        {"optimizer": {"lr": -1.0}},
        {"training": {"epochs": 0}},
        {"target": {"preset": "medium"}},
        {"target": {"vocab_size": 10, "length": 8}},
        {"probes": {"tail_epochs": 0}},
        {"probes": {"smooth_window": 2}},
        {"probes": {"smooth_window": 0}},
        {"probes": {"spike_lookback": 0}},
        {"probes": {"activation_bins": 0}},
        {"probes": {"pairing_window": -1}},
        {"probes": {"jump_threshold": 0.0}},
        {"probes": {"spike_rise_threshold": -0.3}},
    ],
)
def test_invalid_values_are_config_errors(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_lower_pattern_and_presets():
    config = parse_config({"target": {"pattern": [0.9, 0.1]}, "optimizer": {"preset": "rmsprop"}})
    assert config.target.pattern == (0.9, 0.1)
    assert config.optimizer.kind == "rmsprop" and config.optimizer.lr == 0.0001
    assert parse_config({"target": {"preset": "higher"}}).target.pattern == (0.6, 0.3, 0.1)


def test_config_round_trips_through_toml(tmp_path):
    config = parse_config(
        {
            "target": {"vocab_size": 4, "length": 3, "seed": 9},
            "model": {"family": "transformer", "d": 16, "L": 2, "h": 4, "routed": True},
            "optimizer": {"preset": "adamw_appendix"},
            "probes": {"census_every": 2},
        }
    )
    path = str(tmp_path / "config.toml")
    runner.save_config(config, path)
    assert load_config(path) == config


def test_overrides():
    config = apply_overrides(RunConfig(), epochs=7, output_root="out", smoke=True)
    assert config.model.d == 16 and config.model.d_h == 64
    assert config.training.epochs == 7
    assert config.output.run_dir == os.path.join("out", "default")


def test_emit_metrics(tmp_path):
    records = [MetricsRecord(e, 1.0 / e, 2.0, 0.1, 2.1, 0.5, 1.5, 0.0, 0.3, e % 2) for e in range(1, 101)]
    path = runner.emit_metrics(records, str(tmp_path / "metrics.csv"))
    lines = open(path).read().splitlines()
    assert len(lines) == 101
    assert lines[0].split(",") == METRICS_COLUMNS
    frame = pd.read_csv(path)
    assert set(frame["spike_flag"]) == {0, 1}
    assert frame["mean_train_loss"].iloc[2] == pytest.approx(1.0 / 3.0, rel=1e-8)
    with pytest.raises(ValueError):
        runner.emit_metrics([], str(tmp_path / "none.csv"))


def test_run_experiment_writes_artifacts(tiny_config):
    config = load_config(tiny_config())
    summary = run_experiment(config, progress=False)
    run_dir = config.output.run_dir
    for name in ("config.toml", "target.txt", "dataset.txt", "metrics.csv", "histograms.json", "spikes.json", "summary.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    assert os.path.exists(os.path.join(run_dir, "checkpoints", "final.zip"))
    assert os.path.exists(os.path.join(run_dir, "plots", "entropy_kl.svg"))
    assert load_config(os.path.join(run_dir, "config.toml")) == config

    frame = pd.read_csv(os.path.join(run_dir, "metrics.csv"))
    assert list(frame.columns) == METRICS_COLUMNS
    assert frame["epoch"].tolist() == [1, 2, 3]
    assert set(frame["spike_flag"]) <= {0, 1}
    identity = frame["cross_entropy_full"] - summary.empirical_entropy - frame["kl_vs_empirical_target"]
    assert np.all(np.abs(identity) < 1e-7)
    parts = frame["sparse_part_entropy"] + frame["nonsparse_part_entropy"]
    assert np.allclose(parts, frame["model_entropy"], atol=1e-7)

    with open(os.path.join(run_dir, "summary.json")) as f:
        doc = json.load(f)
    assert doc["epochs"] == 3 and doc["tail_entropy"] is not None


def test_identical_configs_give_identical_metrics(tiny_config, tmp_path):
    a = load_config(tiny_config("a"))
    b = load_config(tiny_config("b"))
    run_experiment(a, progress=False)
    run_experiment(b, progress=False)
    with open(os.path.join(a.output.run_dir, "metrics.csv"), "rb") as fa, open(
        os.path.join(b.output.run_dir, "metrics.csv"), "rb"
    ) as fb:
        assert fa.read() == fb.read()


def test_poisoned_step_aborts_with_partial_metrics(tiny_config, monkeypatch):
    calls = {"n": 0}
    real_step = runner.step

    def flaky_step(state, params, grads):
        calls["n"] += 1
        if calls["n"] > 4:
            raise PoisonedStateError("non-finite gradient for parameter embed")
        return real_step(state, params, grads)

    monkeypatch.setattr(runner, "step", flaky_step)
    config = load_config(tiny_config())
    with pytest.raises(TrainingAbortedError) as info:
        run_experiment(config, progress=False)
    assert len(info.value.records) == 1
    frame = pd.read_csv(os.path.join(config.output.run_dir, "metrics.csv"))
    assert len(frame) == 1


def test_census_every_carries_dead_proportion_forward(tiny_config):
    config = load_config(tiny_config(extra="\n[probes]\ncensus_every = 5\n"))
    run_experiment(config, progress=False)
    frame = pd.read_csv(os.path.join(config.output.run_dir, "metrics.csv"))
    # census on epoch 1 and on the final epoch only
    assert frame["dead_proportion"].iloc[0] == frame["dead_proportion"].iloc[1]


def test_report_regenerates_plots(tiny_config):
    config = load_config(tiny_config())
    run_experiment(config, progress=False)
    written = runner.report(config.output.run_dir)
    assert all(p.endswith(".svg") and os.path.exists(p) for p in written)
