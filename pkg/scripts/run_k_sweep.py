"""Accuracy/overhead trade-off over the harmonic reward's K on one pretrained environment.

    python scripts/run_k_sweep.py [--config configs/default.ini] [--out runs/k_sweep] [--k 0.1,0.3,0.5,0.7,0.9]
"""
import argparse
import logging
from pathlib import Path

from sensordrop import harness
from sensordrop.config import load_config, save_config


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/k_sweep")
    parser.add_argument("--k", default="0.1,0.3,0.5,0.7,0.9")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config).replace(out_dir=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    rows = harness.run_k_sweep(cfg, [float(k) for k in args.k.split(",")])
    harness.write_csv(out / "k_sweep.csv", rows, ["K", "accuracy", "comm_overhead", "status"])
    (out / "plot_figures.py").write_text(harness.plot_script(["k_sweep.csv"]))
    for row in rows:
        print(f"K={row['K']:<4g} accuracy={row['accuracy']:.3f} overhead={row['comm_overhead']:.3f} {row['status']}")


if __name__ == "__main__":
    main()
