"""Command-line surface: gen-data, fit-q, relabel, pretrain, finetune,
eval, rank-eval, grad-check, run."""

from __future__ import annotations

import argparse
import json
import sys

from . import envs, experiment
from .cql import cql_fit, load_qtable, save_qtable, value_table
from .evaluation import (dataset_paths, evaluate_policy, model_actor_factory,
                         rank_metrics)
from .features import ActionIndexer, encoder_for_manifest
from .gradcheck import run_all
from .policy import load_checkpoint, save_checkpoint
from .relabel import relabel_dataset
from .trainer import TrainConfig, finetune_online, pretrain_offline
from .trajectory import load_dataset, save_dataset


def _graph_from(arg: str):
    return envs.default_graph() if arg == "default" else envs.load_graph(arg)


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--sigma-min", type=float, default=1e-2)
    p.add_argument("--sigma-max", type=float, default=5.0)


def _seed_of(args) -> int:
    return 0 if args.seed is None else args.seed


def _train_config(args, **extra) -> TrainConfig:
    fields = dict(
        context_length=getattr(args, "K", 2),
        seed=_seed_of(args),
        layers=args.layers, heads=args.heads, width=args.width,
        beta=args.beta, sigma_min=args.sigma_min, sigma_max=args.sigma_max,
    )
    fields.update(extra)
    return TrainConfig(**fields)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stitchrl",
                                     description="Offline RL lab for stitch-world item graphs")
    parser.add_argument("--seed", type=int, default=None, help="defaults to 0")
    parser.add_argument("--out-dir", default="runs")
    parser.add_argument("--config", default=None, help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset from logging policies")
    p.add_argument("--graph", default="default")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-q", help="fit a conservative tabular Q function")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--sweeps", type=int, default=5000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("relabel", help="relabel dataset RTG against a fitted Q table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--qtable", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("pretrain", help="offline pretraining")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--no-relabel", action="store_true")
    p.add_argument("--lambda-fixed", type=float, default=None)
    p.add_argument("--objective", choices=("nll", "l2"), default="nll")
    _add_arch_flags(p)

    p = sub.add_parser("finetune", help="online finetuning rounds")
    p.add_argument("--graph", default="default")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--g-online", type=float, default=2.0)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--buffer-capacity", type=int, default=64)
    p.add_argument("--top-n", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--no-relabel", action="store_true")
    p.add_argument("--freeze-qtable", action="store_true",
                   help="keep the offline Q table instead of refitting per round")
    p.add_argument("--protect-seeds", action="store_true",
                   help="never evict the top-N seed trajectories")
    p.add_argument("--lambda-fixed", type=float, default=None)
    p.add_argument("--metrics", default=None)
    _add_arch_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint with mean-mode actions")
    p.add_argument("--graph", default="default")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="offline dataset defining known paths")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--g-online", type=float, default=2.0)

    p = sub.add_parser("rank-eval", help="ranking metrics on a held-out log")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=10)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("run", help="full pipeline from a config file")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "gen-data":
        graph = _graph_from(args.graph)
        data, manifest = envs.generate_offline_dataset(
            graph, envs.default_logging_policies(), args.n, _seed_of(args))
        save_dataset(args.out, data, manifest)
        print(f"wrote {len(data)} trajectories to {args.out}")
        return 0

    if args.command == "fit-q":
        data, manifest = load_dataset(args.dataset)
        tcfg = TrainConfig(cql_alpha=args.alpha, cql_gamma=args.gamma,
                           cql_sweeps=args.sweeps, seed=_seed_of(args))
        table = cql_fit(data, tcfg.cql_config(), ActionIndexer(manifest).n_actions)
        save_qtable(args.out, table)
        print(f"fit Q table over {table.n_states} states, wrote {args.out}")
        return 0

    if args.command == "relabel":
        data, manifest = load_dataset(args.dataset)
        table = load_qtable(args.qtable)
        relabeled, report = relabel_dataset(data, value_table(table))
        save_dataset(args.out, relabeled, manifest)
        report.write(args.report)
        print(json.dumps(report.summary()))
        return 0

    if args.command == "pretrain":
        data, manifest = load_dataset(args.dataset)
        cfg = _train_config(args, pretrain_iters=args.iters, lr=args.lr,
                            relabel_enabled=not args.no_relabel,
                            lambda_fixed=args.lambda_fixed,
                            objective=args.objective)
        params, pcfg, dual, metrics = pretrain_offline(data, manifest, cfg)
        save_checkpoint(args.out, params, pcfg, dual, manifest.to_json())
        last = metrics[-1]
        print(f"pretrained {args.iters} iters: nll={last['nll']:.4f} "
              f"entropy={last['entropy']:.4f} lambda={last['lambda']:.4f}")
        return 0

    if args.command == "finetune":
        graph = _graph_from(args.graph)
        data, manifest = load_dataset(args.dataset)
        params, pcfg, dual, _ = load_checkpoint(args.ckpt)
        cfg = _train_config(
            args, rounds=args.rounds, iters_per_round=args.iters,
            batch_size=args.batch, g_online=args.g_online,
            buffer_capacity=args.buffer_capacity, top_n=args.top_n, lr=args.lr,
            relabel_enabled=not args.no_relabel,
            relabel_refresh="frozen" if args.freeze_qtable else "per_round",
            protect_seeds=args.protect_seeds, lambda_fixed=args.lambda_fixed)
        env = envs.ItemGraphEnv(graph)
        params, dual, rounds = finetune_online(env, data, manifest, params, pcfg, dual, cfg)
        save_checkpoint(args.out, params, pcfg, dual, manifest.to_json())
        if args.metrics:
            with open(args.metrics, "w") as fh:
                for rec in rounds:
                    fh.write(json.dumps(rec) + "\n")
        if rounds:
            print(f"finetuned {len(rounds)} rounds: last return={rounds[-1]['rollout_return']}")
        return 0

    if args.command == "eval":
        graph = _graph_from(args.graph)
        data, manifest = load_dataset(args.dataset)
        params, pcfg, dual, _ = load_checkpoint(args.ckpt)
        env = envs.ItemGraphEnv(graph)
        factory = model_actor_factory(params, pcfg, encoder_for_manifest(manifest),
                                      ActionIndexer(manifest), env, args.g_online)
        report = evaluate_policy(env, factory, args.episodes, dataset_paths(data))
        print(json.dumps(report.to_json()))
        return 0

    if args.command == "rank-eval":
        data, manifest = load_dataset(args.dataset)
        params, pcfg, dual, _ = load_checkpoint(args.ckpt)
        result = rank_metrics(params, pcfg, encoder_for_manifest(manifest),
                              ActionIndexer(manifest), data, args.k)
        print(json.dumps(result))
        return 0

    if args.command == "grad-check":
        lines = run_all(seeds=args.seeds)
        for line in lines:
            print(line)
        return 1 if any("FAIL" in line for line in lines) else 0

    if args.command == "run":
        file_values = experiment.load_config_file(args.config) if args.config else {}
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = experiment.resolve_config(file_values, overrides)
        paths = experiment.run_experiment(cfg, args.out_dir)
        for name in sorted(paths):
            print(f"{name}: {paths[name]}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
