import dataclasses
import json

import numpy as np
import pytest

from sensordrop import harness
from sensordrop.agent import FrozenEnv, RewardConfig
from sensordrop.config import ExperimentConfig, load_config
from sensordrop.env import all_masks

RCFG = RewardConfig()


@pytest.fixture
def env():
    """Scene i is solved iff its own 'good' sensor transmits."""
    rng = np.random.default_rng(0)
    n_scenes = 171
    good = rng.integers(6, size=n_scenes)
    outcomes = all_masks(6)[:, good].T.copy()
    return FrozenEnv(rng.random((n_scenes, 6, 16, 16)), outcomes)


def test_baseline_overhead_is_one(env):
    ev = harness.run_baseline(env, RCFG, 6)
    assert ev.record.comm_overhead == 1.0
    assert ev.record.accuracy == 1.0
    assert ev.masks.all()


def test_random_drop_full_rate_is_baseline(env):
    ev = harness.run_random_drop(env, 1.0, np.random.default_rng(0), RCFG, 6)
    base = harness.run_baseline(env, RCFG, 6)
    assert ev.masks.tobytes() == base.masks.tobytes()
    assert dataclasses.replace(ev.record, method="baseline") == base.record


def test_random_drop_zero_rate(env):
    ev = harness.run_random_drop(env, 0.0, np.random.default_rng(0), RCFG, 6)
    assert ev.record.accuracy == 0.0 and ev.record.comm_overhead == 0.0
    assert ev.record.mean_reward_raw == -RCFG.zeta


def test_random_drop_overhead_near_rho(env):
    for seed in range(10):
        ev = harness.run_random_drop(env, 0.75, np.random.default_rng(seed), RCFG, 6)
        assert 0.68 <= ev.record.comm_overhead <= 0.82


def test_contribution_mean_is_overhead(env):
    ev = harness.run_random_drop(env, 0.4, np.random.default_rng(3), RCFG, 6)
    contrib = harness.contribution(ev.masks)
    assert contrib.shape == (6,)
    assert abs(contrib.mean() - ev.record.comm_overhead) < 1e-9
    assert np.all((contrib >= 0) & (contrib <= 1))


def test_overhead_recomputable_from_masks(env):
    ev = harness.run_random_drop(env, 0.5, np.random.default_rng(1), RCFG, 6)
    assert ev.record.comm_overhead == pytest.approx(np.mean(ev.masks.sum(axis=1) / 6), abs=1e-12)


def test_random_draws_are_reproducible(env):
    a = harness.run_random_drop_draws(env, 0.75, 0, 3, RCFG, 6)
    b = harness.run_random_drop_draws(env, 0.75, 0, 3, RCFG, 6)
    assert [x.record for x in a] == [y.record for y in b]
    assert a[0].masks.tobytes() != a[1].masks.tobytes()


def fake_results(env):
    return {"baseline": harness.run_baseline(env, RCFG, 6),
            "sensordrop": harness.run_random_drop(env, 0.5, np.random.default_rng(0), RCFG, 6)}


def test_emit_report_is_deterministic_and_round_trips(tmp_path, env):
    cfg = ExperimentConfig(seed=4)
    results = fake_results(env)
    harness.write_csv(tmp_path / "comparison.csv", [results["baseline"].record.__dict__],
                      list(results["baseline"].record.__dict__))
    harness.emit_report(tmp_path, cfg, results)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    harness.emit_report(tmp_path, cfg, results)
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == first

    rows = harness.read_csv(tmp_path / "comparison.csv")
    assert len(rows) == 1
    assert (tmp_path / "comparison.csv").read_text().count("\n") == 2
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] == harness.REPORT_SCHEMA_VERSION
    assert load_config(tmp_path / "summary.json", apply_env=False) == cfg


def test_plot_script_references_only_present_csvs(tmp_path):
    script = harness.plot_script(["contribution.csv"])
    assert "contribution.csv" in script and "trajectory.csv" not in script
    compile(script, "plot_figures.py", "exec")


def test_emit_report_surfaces_path_on_io_error(tmp_path, env):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        harness.emit_report(blocker / "sub", ExperimentConfig(), fake_results(env))


def tiny_config(tmp_path, **changes):
    base = {"out_dir": str(tmp_path), "dataset.n_train": 40, "dataset.n_test": 16,
            "pretrain.epochs": 1, "rl.epochs": 2, "baseline.random_draws": 2}
    base.update(changes)
    return ExperimentConfig(seed=3).replace(**base)


def test_empty_k_sweep():
    assert harness.run_k_sweep(ExperimentConfig(), []) == []


def test_failing_k_is_isolated(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path, **{"rl.epochs": 1})
    prepared = harness.prepare(cfg)
    real = harness.train_agent

    def flaky(run_cfg, prep, train_config=None):
        if run_cfg.rl.K == 0.5:
            raise FloatingPointError("boom")
        return real(run_cfg, prep, train_config)

    monkeypatch.setattr(harness, "train_agent", flaky)
    rows = harness.run_k_sweep(cfg, [0.1, 0.5, 0.9], prepared)
    assert [r["status"] for r in rows] == ["ok", "failed: FloatingPointError", "ok"]
    assert np.isnan(rows[1]["accuracy"])


def test_tiny_pipeline_outputs(tmp_path):
    cfg = tiny_config(tmp_path)
    results = harness.run_sensordrop(cfg, k_values=[0.2])
    names = {p.name for p in tmp_path.iterdir()}
    for name in ("config.ini", "MANIFEST", "dataset.bin", "summary.json", "plot_figures.py",
                 "comparison.csv", "test_masks.csv", "contribution.csv", "agent_history.csv",
                 "trajectory.csv", "pretrain_history.csv", "k_sweep.csv"):
        assert name in names
    assert (tmp_path / "MANIFEST").read_text().splitlines()[-1] == "stage complete"
    script = (tmp_path / "plot_figures.py").read_text()
    for csv_name in harness.PLOT_PARTS:
        if csv_name in script:
            assert (tmp_path / csv_name).exists()
    assert results["baseline"].record.comm_overhead == 1.0
    assert results["baseline"].record.accuracy == results["pretrain_test_accuracy"]
    masks = harness.read_csv(tmp_path / "test_masks.csv")
    d = np.array([int(r["d_active"]) for r in masks])
    assert np.mean(d / 6) == pytest.approx(results["sensordrop"].record.comm_overhead, abs=1e-12)
    assert load_config(tmp_path / "config.ini", apply_env=False) == cfg
