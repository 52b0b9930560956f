"""End-to-end experiment runner: data, Q table, relabel, train, evaluate.

Configuration is plain key=value text; command-line flags override file
values, which override built-in defaults. Every run writes its resolved
configuration next to the artifacts so results stay reproducible.
"""

from __future__ import annotations

import json
import os

from . import envs
from .cql import cql_fit, save_qtable, value_table
from .evaluation import dataset_paths, evaluate_policy, model_actor_factory
from .features import ActionIndexer, encoder_for_manifest
from .policy import save_checkpoint
from .relabel import relabel_dataset
from .trainer import TrainConfig, finetune_online, pretrain_offline
from .trajectory import save_dataset


class ExperimentError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "n": 300,
    "seed": 0,
    "K": 2,
    "g_online": 2.0,
    "rounds": 50,
    "iters_per_round": 100,
    "batch_size": 16,
    "pretrain_iters": 2000,
    "buffer_capacity": 64,
    "top_n": 8,
    "lr": 2e-3,
    "alpha": 1.0,
    "gamma": 1.0,
    "episodes": 200,
    "layers": 2,
    "heads": 2,
    "width": 32,
    "action_dim": 8,
    "sigma_min": 1e-2,
    "sigma_max": 5.0,
    "relabel": 1,
    "relabel_refresh": "per_round",
    "lambda_fixed": "",
    "beta": "",
}

_REQUIRED_KEYS = ("graph",)


def load_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; values stay strings here."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ExperimentError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    merged = dict(DEFAULT_CONFIG)
    for src in (file_values or {}), (overrides or {}):
        for k, v in src.items():
            if v is not None:
                merged[k] = v
    for key in _REQUIRED_KEYS:
        if key not in merged:
            raise ExperimentError(f"missing config key: {key}")
    return _coerce(merged)


def _coerce(cfg: dict) -> dict:
    ints = ("n", "seed", "K", "rounds", "iters_per_round", "batch_size", "pretrain_iters",
            "buffer_capacity", "top_n", "episodes", "layers", "heads", "width",
            "action_dim", "relabel")
    floats = ("g_online", "lr", "alpha", "gamma", "sigma_min", "sigma_max")
    out = dict(cfg)
    for k in ints:
        out[k] = int(cfg[k])
    for k in floats:
        out[k] = float(cfg[k])
    for k in ("lambda_fixed", "beta"):
        v = cfg[k]
        out[k] = None if v in ("", None, "none") else float(v)
    return out


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        rounds=cfg["rounds"], iters_per_round=cfg["iters_per_round"],
        batch_size=cfg["batch_size"], context_length=cfg["K"],
        g_online=cfg["g_online"], buffer_capacity=cfg["buffer_capacity"],
        top_n=cfg["top_n"], pretrain_iters=cfg["pretrain_iters"], lr=cfg["lr"],
        beta=cfg["beta"], lambda_fixed=cfg["lambda_fixed"],
        relabel_enabled=bool(cfg["relabel"]), relabel_refresh=cfg["relabel_refresh"],
        cql_alpha=cfg["alpha"], cql_gamma=cfg["gamma"], seed=cfg["seed"],
        layers=cfg["layers"], heads=cfg["heads"], width=cfg["width"],
        action_dim=cfg["action_dim"], sigma_min=cfg["sigma_min"],
        sigma_max=cfg["sigma_max"],
    )


def _write_resolved(path, cfg: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(cfg):
            value = cfg[key]
            fh.write(f"{key}={'' if value is None else value}\n")


ARTIFACTS = (
    "dataset.jsonl",
    "qtable.txt",
    "dataset_relabeled.jsonl",
    "relabel_report.jsonl",
    "pretrained.ckpt.json",
    "finetuned.ckpt.json",
    "metrics.jsonl",
)


def run_experiment(cfg: dict, out_dir) -> dict:
    """Execute the full pipeline; returns a map of artifact names to paths.

    Stages run in order and any failure aborts with the stage name.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in ARTIFACTS}
    _write_resolved(os.path.join(out_dir, "config_resolved.txt"), cfg)

    graph = None
    dataset = manifest = None
    metrics_records = []

    def stage(name, fn):
        try:
            return fn()
        except Exception as e:
            raise ExperimentError(f"stage {name} failed: {e}") from e

    def gen_data():
        nonlocal graph, dataset, manifest
        graph = envs.default_graph() if cfg["graph"] == "default" else envs.load_graph(cfg["graph"])
        dataset, manifest = envs.generate_offline_dataset(
            graph, envs.default_logging_policies(), cfg["n"], cfg["seed"])
        save_dataset(paths["dataset.jsonl"], dataset, manifest)

    stage("gen-data", gen_data)
    tcfg = train_config_from(cfg)
    indexer = ActionIndexer(manifest)

    def fit_q():
        table = cql_fit(dataset, tcfg.cql_config(), indexer.n_actions)
        save_qtable(paths["qtable.txt"], table)
        return table

    table = stage("fit-q", fit_q)

    def relabel():
        relabeled, report = relabel_dataset(dataset, value_table(table))
        save_dataset(paths["dataset_relabeled.jsonl"], relabeled, manifest)
        report.write(paths["relabel_report.jsonl"])

    stage("relabel", relabel)

    def pretrain():
        params, pcfg, dual, pre_metrics = pretrain_offline(dataset, manifest, tcfg)
        save_checkpoint(paths["pretrained.ckpt.json"], params, pcfg, dual, manifest.to_json())
        for rec in pre_metrics[:: max(1, len(pre_metrics) // 20)] + pre_metrics[-1:]:
            metrics_records.append({"kind": "pretrain", **rec})
        return params, pcfg, dual

    params, pcfg, dual = stage("pretrain", pretrain)

    def finetune():
        env = envs.ItemGraphEnv(graph)
        new_params, new_dual, rounds = finetune_online(env, dataset, manifest, params, pcfg, dual, tcfg)
        save_checkpoint(paths["finetuned.ckpt.json"], new_params, pcfg, new_dual, manifest.to_json())
        for rec in rounds:
            metrics_records.append({"kind": "round", **rec})
        return new_params, new_dual

    params, dual = stage("finetune", finetune)

    def evaluate():
        env = envs.ItemGraphEnv(graph)
        encoder = encoder_for_manifest(manifest)
        factory = model_actor_factory(params, pcfg, encoder, indexer, env, cfg["g_online"])
        report = evaluate_policy(env, factory, cfg["episodes"], dataset_paths(dataset))
        metrics_records.append({"kind": "eval", **report.to_json()})
        return report

    stage("evaluate", evaluate)

    with open(paths["metrics.jsonl"], "w") as fh:
        for rec in metrics_records:
            fh.write(json.dumps(rec) + "\n")
    return paths
