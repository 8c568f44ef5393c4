"""Command line entry point: ``sensordrop <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness, nn
from .config import ConfigError, load_config
from .data import DatasetFormatError, build_split, describe, load_split, save_split

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _config(args):
    cfg = load_config(getattr(args, "config", None))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "epochs", None) is not None:
        changes["rl.epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def cmd_dataset_generate(args):
    cfg = _config(argparse.Namespace(config=args.config))
    split = build_split(args.seed, (args.train or cfg.dataset.n_train, args.test or cfg.dataset.n_test),
                        cfg.dataset.geometry())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_split(split, args.out)
    print(describe(split))


def cmd_dataset_inspect(args):
    print(describe(load_split(args.path)))


def cmd_env_pretrain(args):
    cfg = load_config(args.config)
    cfg = cfg.replace(seed=args.seed) if args.seed is not None else cfg
    if args.epochs is not None:
        cfg = cfg.replace(**{"pretrain.epochs": args.epochs})
    split = load_split(args.data, expected_sensors=cfg.dataset.n_sensors)
    environment, history = harness.build_environment(cfg, split)
    out = Path(args.out)
    harness.save_environment(environment, out)
    harness.write_csv(out / "pretrain_history.csv", history,
                      ["epoch", "train_loss", "train_acc", "test_acc"])
    print(f"test accuracy {history[-1]['test_acc']:.4f} after {len(history)} epochs"
          if history else "no pretraining epochs run")


def _prepared_from_disk(cfg, data, env_dir):
    split = load_split(data, expected_sensors=cfg.dataset.n_sensors)
    environment = harness.load_environment(env_dir, cfg.dataset.n_sensors,
                                           split.train[0].views.shape[-1], cfg.env.env_config())
    return harness.prepare(cfg, split, environment)


def cmd_agent_train(args):
    cfg = _config(args)
    prepared = _prepared_from_disk(cfg, args.data, args.env)
    agent, history, trajectory = harness.train_agent(cfg, prepared)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_network(agent.actor, out / "actor.ckpt")
    nn.save_network(agent.critic, out / "critic.ckpt")
    harness.write_csv(out / "agent_history.csv", [dataclasses.asdict(r) for r in history],
                      ["epoch", "mean_reward_raw", "mean_reward_normalized",
                       "train_accuracy", "comm_overhead_fraction"])
    harness.write_csv(out / "trajectory.csv", trajectory,
                      ["epoch", "test_accuracy", "test_comm_overhead"])
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train accuracy {last.train_accuracy:.3f}, "
              f"overhead {last.comm_overhead_fraction:.3f}")


def cmd_eval(args):
    cfg = _config(args)
    if args.which == "sensordrop":
        results = harness.run_sensordrop(cfg)
        print(harness.format_table(harness.summary_dict(cfg, results)))
        return
    if args.data is None or args.env is None:
        raise ConfigError(f"eval {args.which} needs --data and --env")
    prepared = _prepared_from_disk(cfg, args.data, args.env)
    rcfg = cfg.rl.reward_config()
    n = cfg.dataset.n_sensors
    if args.which == "baseline":
        rec = harness.run_baseline(prepared.test_env, rcfg, n).record
    else:
        rho = cfg.baseline.rho if args.rho is None else args.rho
        runs = harness.run_random_drop_draws(prepared.test_env, rho, cfg.seed,
                                             cfg.baseline.random_draws, rcfg, n)
        rec = harness.mean_record(f"randomdrop_rho={rho!r}", runs)
    print(json.dumps(dataclasses.asdict(rec), indent=2))


def cmd_sweep_k(args):
    cfg = _config(args)
    ks = [float(k) for k in args.k.split(",") if k.strip()] if args.k else []
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = harness.run_k_sweep(cfg, ks) if ks else []
    harness.write_csv(out / "k_sweep.csv", rows, ["K", "accuracy", "comm_overhead", "status"])
    for row in rows:
        print(f"K={row['K']:g}  accuracy={row['accuracy']:.3f}  overhead={row['comm_overhead']:.3f}  {row['status']}")


def cmd_report(args):
    run = Path(args.run)
    summary_path = run / "summary.json"
    summary = json.loads(summary_path.read_text())
    present = sorted(p.name for p in run.glob("*.csv"))
    (run / "plot_figures.py").write_text(harness.plot_script(present))
    print(harness.format_table(summary))


def build_parser():
    parser = argparse.ArgumentParser(prog="sensordrop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    verbs = parser.add_subparsers(dest="verb", required=True)

    ds = verbs.add_parser("dataset").add_subparsers(dest="action", required=True)
    p = ds.add_parser("generate")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_dataset_generate)
    p = ds.add_parser("inspect")
    p.add_argument("path")
    p.set_defaults(func=cmd_dataset_inspect)

    env = verbs.add_parser("env").add_subparsers(dest="action", required=True)
    p = env.add_parser("pretrain")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_env_pretrain)

    ag = verbs.add_parser("agent").add_subparsers(dest="action", required=True)
    p = ag.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--env", required=True, help="directory with pretrained checkpoints")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_agent_train)

    p = verbs.add_parser("eval")
    p.add_argument("which", choices=["baseline", "random", "sensordrop"])
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--env")
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_eval)

    sw = verbs.add_parser("sweep").add_subparsers(dest="action", required=True)
    p = sw.add_parser("k")
    p.add_argument("--config")
    p.add_argument("--k", default="0.1,0.3,0.5,0.7,0.9", help="comma-separated K values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep_k)

    p = verbs.add_parser("report")
    p.add_argument("--run", required=True, help="run directory holding summary.json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except nn.DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DatasetFormatError, nn.CheckpointError, json.JSONDecodeError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
