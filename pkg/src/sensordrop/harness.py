"""End-to-end experiments: pretraining, agent training, baselines, K sweep, reports."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import nn
from .config import ExperimentConfig, save_config
from .data import build_split, save_split
from .env import Environment, pretrain

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

# independent random streams per stage, all derived from the run seed
STREAM_ENV_INIT = 1
STREAM_PRETRAIN = 2
STREAM_AGENT_INIT = 3
STREAM_AGENT_TRAIN = 4
STREAM_RANDOM_DROP = 5


def stage_rng(seed, stream, *extra):
    return np.random.default_rng([seed, stream, *extra])


@dataclass
class ExperimentRecord:
    method: str
    accuracy: float
    comm_overhead: float
    mean_reward_raw: float
    mean_reward_normalized: float


@dataclass
class Evaluation:
    record: ExperimentRecord
    masks: np.ndarray  # (B, N) bool
    correct: np.ndarray  # (B,) bool


def contribution(masks):
    """Per-sensor fraction of scenes in which that sensor transmitted."""
    masks = np.asarray(masks, dtype=bool)
    if len(masks) == 0:
        return np.zeros(masks.shape[1] if masks.ndim == 2 else 0)
    return masks.mean(axis=0)


def evaluate_masks(method, env, masks, reward_config):
    masks = np.asarray(masks, dtype=bool)
    n = masks.shape[1]
    correct = env.evaluate(np.arange(env.n_scenes), masks)
    d = masks.sum(axis=1)
    raw = agent_mod.rewards(reward_config, correct, d, n)
    mean_raw = float(raw.mean())
    record = ExperimentRecord(
        method=method,
        accuracy=float(correct.mean()),
        comm_overhead=float(d.mean() / n),
        mean_reward_raw=mean_raw,
        mean_reward_normalized=float(reward_config.normalize(mean_raw, n)),
    )
    return Evaluation(record, masks, correct)


def run_baseline(env, reward_config, n_sensors):
    masks = np.ones((env.n_scenes, n_sensors), dtype=bool)
    return evaluate_masks("baseline", env, masks, reward_config)


def run_random_drop(env, rho, rng, reward_config, n_sensors):
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    masks = rng.random((env.n_scenes, n_sensors)) < rho
    return evaluate_masks(f"randomdrop_rho={rho!r}", env, masks, reward_config)


def run_random_drop_draws(env, rho, seed, draws, reward_config, n_sensors):
    return [run_random_drop(env, rho, stage_rng(seed, STREAM_RANDOM_DROP, i),
                            reward_config, n_sensors) for i in range(draws)]


def evaluate_agent(method, agent, env, reward_config):
    return evaluate_masks(method, env, agent.greedy(env.states), reward_config)


# ------------------------------------------------------------------ pipeline


@dataclass
class Prepared:
    split: object
    environment: Environment
    pretrain_history: list
    train_env: agent_mod.FrozenEnv
    test_env: agent_mod.FrozenEnv


def save_environment(environment, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, net in enumerate(environment.sensors.nets):
        nn.save_network(net, directory / f"sensor_{i}.ckpt")
    nn.save_network(environment.cloud.net, directory / "cloud.ckpt")


def load_environment(directory, n_sensors, image_size, env_config):
    directory = Path(directory)
    environment = Environment(n_sensors, image_size, env_config)
    count = len(environment.sensors.nets)
    environment.sensors.nets = [nn.read_network(directory / f"sensor_{i}.ckpt")
                                for i in range(count)]
    environment.cloud.net = nn.read_network(directory / "cloud.ckpt")
    return environment


def build_environment(cfg, split):
    d = cfg.dataset
    environment = Environment(d.n_sensors, d.image_size, cfg.env.env_config(),
                              rng=stage_rng(cfg.seed, STREAM_ENV_INIT))
    history = pretrain(environment, split, cfg.pretrain.pretrain_config(),
                       rng=stage_rng(cfg.seed, STREAM_PRETRAIN),
                       log=lambda r: log.info("pretrain %s", r))
    return environment, history


def prepare(cfg, split=None, environment=None, pretrain_history=None):
    """Dataset, pretrained environment and frozen agent-facing views."""
    if split is None:
        split = build_split(cfg.seed, (cfg.dataset.n_train, cfg.dataset.n_test),
                            cfg.dataset.geometry())
    if environment is None:
        environment, pretrain_history = build_environment(cfg, split)
    train_env = agent_mod.FrozenEnv.from_environment(environment, *split.arrays("train"))
    test_env = agent_mod.FrozenEnv.from_environment(environment, *split.arrays("test"))
    return Prepared(split, environment, pretrain_history or [], train_env, test_env)


def train_agent(cfg, prepared, train_config=None):
    """Train a fresh agent; returns (agent, epoch history, test trajectory rows)."""
    train_config = cfg.rl.train_config() if train_config is None else train_config
    n = cfg.dataset.n_sensors
    state_size = prepared.train_env.states.shape[-1]
    agent = agent_mod.Agent(n, state_size, train_config, rng=stage_rng(cfg.seed, STREAM_AGENT_INIT))
    trajectory = []
    every = max(cfg.rl.eval_every, 1)

    def on_epoch(record, a):
        if record.epoch % every == 0:
            ev = evaluate_agent("sensordrop", a, prepared.test_env, train_config.reward)
            trajectory.append({"epoch": record.epoch, "test_accuracy": ev.record.accuracy,
                               "test_comm_overhead": ev.record.comm_overhead})
        log.debug("agent %s", record)

    if cfg.rl.freeze_env:
        env = prepared.train_env
    else:
        views, labels = prepared.split.arrays("train")
        env = agent_mod.LiveEnv(prepared.environment, views, labels, finetune=True)
    history = agent_mod.train(agent, env, train_config,
                              rng=stage_rng(cfg.seed, STREAM_AGENT_TRAIN), on_epoch=on_epoch)
    if not cfg.rl.freeze_env:
        # fine-tuning moved the environment: rebuild the frozen test view
        prepared.test_env = agent_mod.FrozenEnv.from_environment(
            prepared.environment, *prepared.split.arrays("test"))
    return agent, history, trajectory


class Manifest:
    """Records which pipeline stages have completed in a run directory."""

    def __init__(self, directory):
        self.path = Path(directory) / "MANIFEST"
        self.stages = []
        self._flush()

    def mark(self, stage):
        self.stages.append(stage)
        self._flush()

    def _flush(self):
        lines = ["sensordrop-run 1"] + [f"stage {s}" for s in self.stages]
        self.path.write_text("\n".join(lines) + "\n")


def run_sensordrop(cfg: ExperimentConfig, k_values=None):
    """Full pipeline into ``cfg.out_dir``; returns a dict of the main results.

    ``results["timings"]`` holds wall-clock seconds per stage; it is kept out
    of every written file so outputs stay byte-reproducible.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    manifest = Manifest(out)
    timings = {}
    clock = time.perf_counter()

    def lap(stage):
        nonlocal clock
        now = time.perf_counter()
        timings[stage] = now - clock
        clock = now
        manifest.mark(stage)

    split = build_split(cfg.seed, (cfg.dataset.n_train, cfg.dataset.n_test), cfg.dataset.geometry())
    save_split(split, out / "dataset.bin")
    lap("dataset")

    environment, pre_hist = build_environment(cfg, split)
    save_environment(environment, out / "checkpoints")
    write_csv(out / "pretrain_history.csv", pre_hist,
              ["epoch", "train_loss", "train_acc", "test_acc"])
    lap("pretrain")

    prepared = prepare(cfg, split, environment, pre_hist)
    agent, history, trajectory = train_agent(cfg, prepared)
    nn.save_network(agent.actor, out / "checkpoints" / "actor.ckpt")
    nn.save_network(agent.critic, out / "checkpoints" / "critic.ckpt")
    write_csv(out / "agent_history.csv", [dataclasses.asdict(r) for r in history],
              ["epoch", "mean_reward_raw", "mean_reward_normalized",
               "train_accuracy", "comm_overhead_fraction"])
    write_csv(out / "trajectory.csv", trajectory,
              ["epoch", "test_accuracy", "test_comm_overhead"])
    lap("agent")

    results = evaluate_all(cfg, prepared, agent)
    tables = write_evaluation(out, cfg, prepared, results)
    lap("eval")

    if k_values:
        sweep = run_k_sweep(cfg, k_values, prepared)
        write_csv(out / "k_sweep.csv", sweep, ["K", "accuracy", "comm_overhead", "status"])
        results["k_sweep"] = sweep
        lap("sweep")

    emit_report(out, cfg, results)
    manifest.mark("complete")
    results["tables"] = tables
    results["timings"] = timings
    return results


def evaluate_all(cfg, prepared, agent):
    rcfg = cfg.rl.reward_config()
    n = cfg.dataset.n_sensors
    baseline = run_baseline(prepared.test_env, rcfg, n)
    sensordrop = evaluate_agent("sensordrop", agent, prepared.test_env, rcfg)
    random_draws = run_random_drop_draws(prepared.test_env, cfg.baseline.rho, cfg.seed,
                                         cfg.baseline.random_draws, rcfg, n)
    matched_rho = sensordrop.record.comm_overhead
    matched = run_random_drop_draws(prepared.test_env, matched_rho, cfg.seed + 1,
                                    cfg.baseline.random_draws, rcfg, n)
    return {
        "baseline": baseline,
        "sensordrop": sensordrop,
        "random": random_draws,
        "random_matched": matched,
        "pretrain_test_accuracy": (prepared.pretrain_history[-1]["test_acc"]
                                   if prepared.pretrain_history else None),
    }


def mean_record(method, records):
    return ExperimentRecord(
        method=method,
        accuracy=float(np.mean([r.record.accuracy for r in records])),
        comm_overhead=float(np.mean([r.record.comm_overhead for r in records])),
        mean_reward_raw=float(np.mean([r.record.mean_reward_raw for r in records])),
        mean_reward_normalized=float(np.mean([r.record.mean_reward_normalized for r in records])),
    )


def write_evaluation(out, cfg, prepared, results):
    out = Path(out)
    sd = results["sensordrop"]
    table = [
        results["baseline"].record,
        mean_record(f"randomdrop_rho={cfg.baseline.rho!r}", results["random"]),
        mean_record(f"randomdrop_matched_rho={sd.record.comm_overhead!r}",
                     results["random_matched"]),
        sd.record,
    ]
    rows = [dataclasses.asdict(r) for r in table]
    write_csv(out / "comparison.csv", rows, list(rows[0]))
    n = cfg.dataset.n_sensors
    labels = np.array([s.label for s in prepared.split.test])
    mask_rows = []
    for i, (bits, ok) in enumerate(zip(sd.masks, sd.correct)):
        mask_rows.append({"scene": i, "label": int(labels[i]),
                          "mask": "".join("1" if b else "0" for b in bits),
                          "d_active": int(bits.sum()), "correct": int(ok)})
    write_csv(out / "test_masks.csv", mask_rows, ["scene", "label", "mask", "d_active", "correct"])
    contrib = contribution(sd.masks)
    write_csv(out / "contribution.csv",
              [{"sensor": i, "transmit_fraction": float(contrib[i])} for i in range(n)],
              ["sensor", "transmit_fraction"])
    return rows


# ------------------------------------------------------------------- K sweep


def run_k_sweep(cfg, k_values, prepared=None):
    """One harmonic-reward agent per K on a shared pretrained environment.

    Returns rows ``{K, accuracy, comm_overhead, status}``; a failing K is
    recorded with its error and the sweep moves on.
    """
    k_values = list(k_values)
    if not k_values:
        return []
    if prepared is None:
        prepared = prepare(cfg)
    rows = []
    for k in k_values:
        run_cfg = cfg.replace(**{"rl.reward": "harmonic", "rl.K": float(k)})
        try:
            agent, _, _ = train_agent(run_cfg, prepared)
            ev = evaluate_agent(f"sensordrop_K={k!r}", agent, prepared.test_env,
                                run_cfg.rl.reward_config())
            rows.append({"K": float(k), "accuracy": ev.record.accuracy,
                         "comm_overhead": ev.record.comm_overhead, "status": "ok"})
        except (ArithmeticError, ValueError) as err:
            log.warning("K=%s failed: %s", k, err)
            rows.append({"K": float(k), "accuracy": math.nan, "comm_overhead": math.nan,
                         "status": f"failed: {type(err).__name__}"})
    return rows


# -------------------------------------------------------------------- output


def write_csv(path, rows, fields):
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore",
                                    lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def summary_dict(cfg, results):
    def rec(ev):
        return dataclasses.asdict(ev.record)

    out = {"schema_version": REPORT_SCHEMA_VERSION, "config": cfg.to_dict()}
    if "baseline" in results:
        out["baseline"] = rec(results["baseline"])
    if "sensordrop" in results:
        out["sensordrop"] = rec(results["sensordrop"])
        out["contribution"] = [float(x) for x in contribution(results["sensordrop"].masks)]
    if "random" in results:
        out["randomdrop"] = dataclasses.asdict(mean_record("randomdrop", results["random"]))
    if "random_matched" in results:
        out["randomdrop_matched"] = dataclasses.asdict(
            mean_record("randomdrop_matched", results["random_matched"]))
    if results.get("pretrain_test_accuracy") is not None:
        out["pretrain_test_accuracy"] = results["pretrain_test_accuracy"]
    if "k_sweep" in results:
        out["k_sweep"] = results["k_sweep"]
    return out


PLOT_PARTS = {
    "agent_history.csv": '''
h = read("agent_history.csv")
fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
top.plot(h["epoch"], h["train_accuracy"], label="accuracy")
top.plot(h["epoch"], h["mean_reward_normalized"], label="reward (normalized)")
bottom.plot(h["epoch"], h["train_accuracy"], label="accuracy")
bottom.plot(h["epoch"], h["comm_overhead_fraction"], label="communication overhead")
bottom.set_xlabel("epoch")
top.legend(); bottom.legend()
fig.savefig(out / "convergence.png", dpi=150)
''',
    "contribution.csv": '''
c = read("contribution.csv")
fig, ax = plt.subplots()
ax.bar([int(s) + 1 for s in c["sensor"]], c["transmit_fraction"])
ax.set_xlabel("sensor"); ax.set_ylabel("fraction of test scenes transmitted")
fig.savefig(out / "contribution.png", dpi=150)
''',
    "trajectory.csv": '''
t = read("trajectory.csv")
fig, ax = plt.subplots()
sc = ax.scatter(t["test_comm_overhead"], t["test_accuracy"], c=t["epoch"], cmap="coolwarm")
fig.colorbar(sc, label="epoch")
ax.set_xlabel("communication overhead"); ax.set_ylabel("accuracy")
fig.savefig(out / "trajectory.png", dpi=150)
''',
    "k_sweep.csv": '''
k = read("k_sweep.csv")
fig, ax = plt.subplots()
ax.scatter(k["comm_overhead"], k["accuracy"])
for kk, x, y in zip(k["K"], k["comm_overhead"], k["accuracy"]):
    ax.annotate(f"K={kk:g}", (x, y))
ax.set_xlabel("communication overhead"); ax.set_ylabel("accuracy")
fig.savefig(out / "k_sweep.png", dpi=150)
''',
}

PLOT_HEADER = '''"""Plot the CSVs of this run directory. Usage: python plot_figures.py [RUN_DIR]"""
import csv
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent
CSV_FILES = {files!r}


def read(name):
    with open(out / name, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {{k: [] for k in rows[0]}} if rows else {{}}
    for row in rows:
        for k, v in row.items():
            try:
                cols[k].append(float(v))
            except ValueError:
                cols[k].append(v)
    return cols
'''


def plot_script(csv_files):
    files = [f for f in PLOT_PARTS if f in csv_files]
    return PLOT_HEADER.format(files=files) + "".join(PLOT_PARTS[f] for f in files)


def emit_report(out_dir, cfg, results):
    """summary.json plus a plot script covering whichever CSVs the run produced."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = summary_dict(cfg, results)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        present = sorted(p.name for p in out.glob("*.csv"))
        (out / "plot_figures.py").write_text(plot_script(present))
    except OSError as err:
        raise OSError(f"cannot write report into {out}: {err}") from err
    return summary


def format_table(summary):
    lines = ["method                         accuracy  overhead  reward(norm)"]
    for key in ("sensordrop", "baseline", "randomdrop", "randomdrop_matched"):
        if key in summary:
            r = summary[key]
            lines.append(f"{key:<30} {r['accuracy']:8.3f}  {r['comm_overhead']:8.3f}  "
                         f"{r['mean_reward_normalized']:8.3f}")
    for row in summary.get("k_sweep", []):
        lines.append(f"K={row['K']:<28g} {row['accuracy']:8.3f}  {row['comm_overhead']:8.3f}")
    return "\n".join(lines)
