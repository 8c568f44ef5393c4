"""Per-epoch greedy test accuracy/overhead for several K, reusing a finished run's environment.

    python scripts/k_trajectories.py --run runs/comparison [--k 0.1,0.5,0.9] [--epochs 400]

Writes k_trajectory_K=<k>.csv into the run directory and prints window means.
"""
import argparse
from pathlib import Path

import numpy as np

from sensordrop import harness
from sensordrop.config import load_config
from sensordrop.data import load_split


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--run", required=True)
    parser.add_argument("--k", default="0.1,0.5,0.9")
    parser.add_argument("--epochs", type=int, default=400)
    parser.add_argument("--window", type=int, default=50)
    args = parser.parse_args()

    run = Path(args.run)
    cfg = load_config(run / "config.ini", apply_env=False)
    split = load_split(run / "dataset.bin", expected_sensors=cfg.dataset.n_sensors)
    env = harness.load_environment(run / "checkpoints", cfg.dataset.n_sensors,
                                   cfg.dataset.image_size, cfg.env.env_config())
    prepared = harness.prepare(cfg, split, env)
    for k in (float(x) for x in args.k.split(",")):
        run_cfg = cfg.replace(**{"rl.reward": "harmonic", "rl.K": k, "rl.epochs": args.epochs,
                                 "rl.eval_every": 1})
        _, _, traj = harness.train_agent(run_cfg, prepared)
        harness.write_csv(run / f"k_trajectory_K={k!r}.csv", traj,
                          ["epoch", "test_accuracy", "test_comm_overhead"])
        acc = np.array([r["test_accuracy"] for r in traj])
        ov = np.array([r["test_comm_overhead"] for r in traj])
        print(f"K={k:g}")
        for lo in range(0, len(traj), args.window):
            hi = lo + args.window
            print(f"  epochs {lo + 1:4d}-{min(hi, len(traj)):4d}  accuracy {acc[lo:hi].mean():.3f} "
                  f"[{acc[lo:hi].min():.3f}, {acc[lo:hi].max():.3f}]  overhead {ov[lo:hi].mean():.3f}")


if __name__ == "__main__":
    main()
