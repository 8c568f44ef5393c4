import json

import pytest

from sensordrop import cli, harness


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.bin"
    assert cli.main(["dataset", "generate", "--seed", "2", "--out", str(data),
                     "--train", "24", "--test", "12"]) == 0
    assert cli.main(["env", "pretrain", "--data", str(data), "--seed", "2",
                     "--out", str(root / "env"), "--epochs", "1"]) == 0
    return root


def test_dataset_inspect(workspace, capsys):
    assert cli.main(["dataset", "inspect", str(workspace / "data.bin")]) == 0
    out = capsys.readouterr().out
    assert "24" in out and "12" in out


def test_pretrain_wrote_history(workspace):
    rows = harness.read_csv(workspace / "env" / "pretrain_history.csv")
    assert [r["epoch"] for r in rows] == ["1"]
    assert (workspace / "env" / "cloud.ckpt").exists()


def test_agent_train(workspace):
    out = workspace / "agent"
    assert cli.main(["agent", "train", "--data", str(workspace / "data.bin"),
                     "--env", str(workspace / "env"), "--epochs", "2", "--out", str(out)]) == 0
    assert len(harness.read_csv(out / "agent_history.csv")) == 2
    assert (out / "actor.ckpt").exists()


def test_eval_baseline_and_random(workspace, capsys):
    common = ["--data", str(workspace / "data.bin"), "--env", str(workspace / "env")]
    assert cli.main(["eval", "baseline", *common]) == 0
    assert json.loads(capsys.readouterr().out)["comm_overhead"] == 1.0
    assert cli.main(["eval", "random", "--rho", "0", *common]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 0.0


def test_eval_needs_inputs(workspace):
    assert cli.main(["eval", "baseline"]) == cli.EXIT_CONFIG


def test_empty_sweep_succeeds(tmp_path):
    assert cli.main(["sweep", "k", "--k", "", "--out", str(tmp_path)]) == 0
    assert harness.read_csv(tmp_path / "k_sweep.csv") == []


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[rl]\nwhat = 1\n")
    assert cli.main(["sweep", "k", "--k", "", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_io_error_exit_codes(tmp_path):
    assert cli.main(["dataset", "inspect", str(tmp_path / "missing.bin")]) == cli.EXIT_IO
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a dataset")
    assert cli.main(["dataset", "inspect", str(junk)]) == cli.EXIT_IO
    assert cli.main(["report", "--run", str(tmp_path)]) == cli.EXIT_IO


def test_divergence_exit_code(workspace, monkeypatch):
    from sensordrop import nn

    def explode(*a, **k):
        raise nn.DivergenceError("non-finite gradient", epoch=1)

    monkeypatch.setattr(harness, "train_agent", explode)
    assert cli.main(["agent", "train", "--data", str(workspace / "data.bin"),
                     "--env", str(workspace / "env")]) == cli.EXIT_DIVERGED


def test_sensordrop_and_report(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text("[dataset]\nn_train = 24\nn_test = 12\n[pretrain]\nepochs = 1\n"
                   "[rl]\nepochs = 1\n[baseline]\nrandom_draws = 2\n")
    run = tmp_path / "run"
    monkeypatch.delenv("SENSORDROP_OUT_DIR", raising=False)
    assert cli.main(["eval", "sensordrop", "--config", str(cfg), "--out", str(run)]) == 0
    assert "baseline" in capsys.readouterr().out
    (run / "plot_figures.py").unlink()
    assert cli.main(["report", "--run", str(run)]) == 0
    assert "sensordrop" in capsys.readouterr().out
    assert (run / "plot_figures.py").exists()
