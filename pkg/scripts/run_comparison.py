"""Full pipeline on the pinned seed: baseline, random drop, SensorDrop and a K sweep.

    python scripts/run_comparison.py [--config configs/default.ini] [--out runs/comparison] [--k 0.1,0.5,0.9]
"""
import argparse
import logging
import time

from sensordrop import harness
from sensordrop.config import load_config


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/comparison")
    parser.add_argument("--k", default="0.1,0.5,0.9", help="comma-separated K values, empty to skip")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config).replace(out_dir=args.out)
    ks = [float(k) for k in args.k.split(",") if k.strip()]
    start = time.time()
    results = harness.run_sensordrop(cfg, k_values=ks)
    print(harness.format_table(harness.summary_dict(cfg, results)))
    print(f"wall time {time.time() - start:.0f}s, outputs in {args.out}")


if __name__ == "__main__":
    main()
