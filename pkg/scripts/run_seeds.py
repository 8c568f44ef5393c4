"""SensorDrop against the baselines over several seeds (each seed is a full pipeline run).

    python scripts/run_seeds.py --seeds 0,1,2 [--out runs/seeds]
"""
import argparse
import csv
import logging
from pathlib import Path

from sensordrop import harness
from sensordrop.config import load_config


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", default="runs/seeds")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config)
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = base.replace(seed=seed, out_dir=str(Path(args.out) / f"seed{seed}"))
        res = harness.run_sensordrop(cfg)
        sd, bl = res["sensordrop"].record, res["baseline"].record
        matched = harness.mean_record("matched", res["random_matched"])
        rows.append({"seed": seed, "baseline_acc": bl.accuracy, "sensordrop_acc": sd.accuracy,
                     "sensordrop_overhead": sd.comm_overhead, "random_matched_acc": matched.accuracy})
        print(rows[-1])
    with open(Path(args.out) / "seeds.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
