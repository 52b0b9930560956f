"""Offline pretraining and online finetuning loops.

The finetune loop follows a rollout / insert / update cadence per round:
collect one exploration episode conditioned on the online RTG goal, push
it into a FIFO replay buffer seeded with the best offline trajectories,
optionally refit the conservative Q table on the buffer, then run I
gradient updates on relabeled, length-K windows drawn with
length-proportional trajectory sampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cql import CQLConfig, cql_fit, value_table
from .envs import ItemGraphEnv
from .features import ActionIndexer, encoder_for_manifest
from .optim import Adam
from .policy import (DualVariable, PolicyBatch, PolicyConfig, default_entropy_floor,
                     decode_action, forward_policy, init_policy, lagrangian_step,
                     sample_action)
from .relabel import relabel_rtg
from .trajectory import (DatasetManifest, Trajectory, make_trajectory,
                         sample_subsequence, trajectory_sampling_probs)


@dataclass
class TrainConfig:
    rounds: int = 50
    iters_per_round: int = 100
    batch_size: int = 16
    context_length: int = 2
    g_online: float = 2.0
    buffer_capacity: int = 64
    top_n: int = 8
    pretrain_iters: int = 2000
    lr: float = 2e-3
    dual_lr: float = 1e-2
    beta: float | None = None          # None -> half unit-Gaussian entropy
    lambda_fixed: float | None = None  # set 0.0 to disable the entropy term
    relabel_enabled: bool = True
    relabel_refresh: str = "per_round"  # or "frozen": keep the offline Q table
    protect_seeds: bool = False
    cql_alpha: float = 1.0
    cql_gamma: float = 1.0
    cql_lr: float = 0.1
    cql_sweeps: int = 5000
    step_cap: int = 50
    seed: int = 0
    layers: int = 2
    heads: int = 2
    width: int = 32
    action_dim: int = 8
    sigma_min: float = 1e-2
    sigma_max: float = 5.0
    item_embed_scale: float = 0.4
    objective: str = "nll"

    def __post_init__(self):
        for name in ("iters_per_round", "batch_size", "context_length",
                     "buffer_capacity", "top_n", "pretrain_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.relabel_refresh not in ("per_round", "frozen"):
            raise ValueError(f"unknown relabel_refresh {self.relabel_refresh!r}")

    def cql_config(self, seed_offset: int = 0) -> CQLConfig:
        return CQLConfig(alpha=self.cql_alpha, gamma=self.cql_gamma,
                         lr=self.cql_lr, sweeps=self.cql_sweeps,
                         seed=self.seed + seed_offset)

    def policy_config(self, state_dim: int, n_items: int) -> PolicyConfig:
        return PolicyConfig(
            context_length=self.context_length, state_dim=state_dim,
            action_dim=self.action_dim, n_items=n_items, width=self.width,
            layers=self.layers, heads=self.heads,
            max_timesteps=self.step_cap + 2,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max,
            item_embed_scale=self.item_embed_scale, objective=self.objective,
        )

    def entropy_floor(self) -> float:
        return self.beta if self.beta is not None else default_entropy_floor(self.action_dim)


class ReplayBuffer:
    """Bounded trajectory store; insertion beyond capacity evicts the oldest.

    With protect_seeds, entries present at construction survive eviction
    and the oldest unprotected entry goes instead.
    """

    def __init__(self, capacity: int, seeds=(), protect_seeds: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[Trajectory] = list(seeds)[:capacity]
        self._protected = set(id(t) for t in self.items) if protect_seeds else set()

    def __len__(self) -> int:
        return len(self.items)

    def insert(self, traj: Trajectory) -> None:
        self.items.append(traj)
        while len(self.items) > self.capacity:
            for i, t in enumerate(self.items):
                if id(t) not in self._protected:
                    del self.items[i]
                    break
            else:
                del self.items[0]


def init_buffer(dataset, top_n: int, capacity: int | None = None,
                protect_seeds: bool = False) -> ReplayBuffer:
    """Seed the buffer with the top-N trajectories by total return,
    ties broken by dataset order."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if len(dataset) < top_n:
        warnings.warn(f"dataset has {len(dataset)} < top_n={top_n} trajectories; taking all")
        top_n = len(dataset)
    order = sorted(range(len(dataset)), key=lambda i: (-dataset[i].total_return, i))
    chosen = sorted(order[:top_n])
    seeds = [dataset[i] for i in chosen]
    return ReplayBuffer(capacity or max(top_n, 1), seeds, protect_seeds)


def sample_buffer_indices(buffer_items, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    probs = trajectory_sampling_probs(buffer_items)
    return rng.choice(len(buffer_items), size=batch_size, p=probs)


# ---------------------------------------------------------------------------
# batch assembly

def windows_to_batch(pairs, encoder, indexer: ActionIndexer, k: int) -> PolicyBatch:
    """pairs: (trajectory, ContextWindow) tuples, all with the same K."""
    b = len(pairs)
    rtg = np.zeros((b, k))
    feats = np.zeros((b, k, encoder.dim))
    ids = np.zeros((b, k), dtype=np.int64)
    steps = np.full((b, k), -1, dtype=np.int64)
    mask = np.zeros((b, k), dtype=bool)
    for i, (traj, win) in enumerate(pairs):
        rtg[i] = win.rtg
        steps[i] = win.timesteps
        mask[i] = win.mask
        seq = encoder.encode_sequence(traj.states)
        for j in range(k):
            if win.mask[j]:
                feats[i, j] = seq[win.timesteps[j]]
                ids[i, j] = indexer.to_index(win.actions[j])
    return PolicyBatch(rtg=rtg, state_feats=feats, action_ids=ids,
                       timesteps=steps, mask=mask)


# ---------------------------------------------------------------------------
# acting in the environment

class PolicyActor:
    """Steps a trained policy through an item-graph episode, maintaining the
    RTG conditioning sequence (decremented by observed reward, floored at 0)."""

    def __init__(self, params, pcfg: PolicyConfig, encoder, indexer: ActionIndexer,
                 env: ItemGraphEnv, g_init: float, mode: str = "mean",
                 rng: np.random.Generator | None = None):
        self.params = params
        self.pcfg = pcfg
        self.encoder = encoder
        self.indexer = indexer
        self.env = env
        self.mode = mode
        self.rng = rng
        self.g = g_init
        self._g_hist: list[float] = []
        self._feat_hist: list[np.ndarray] = []
        self._aid_hist: list[int] = []

    def act(self, env_state) -> str:
        prev = env_state.history[-2] if len(env_state.history) > 1 else None
        self._g_hist.append(self.g)
        self._feat_hist.append(self.encoder.encode_step(env_state.current, prev))
        self._aid_hist.append(0)  # placeholder; causally hidden from this prediction

        k = self.pcfg.context_length
        t = len(self._g_hist) - 1
        lo = max(0, t - k + 1)
        n_real = t - lo + 1
        rtg = np.zeros((1, k))
        feats = np.zeros((1, k, self.encoder.dim))
        ids = np.zeros((1, k), dtype=np.int64)
        steps = np.full((1, k), -1, dtype=np.int64)
        mask = np.zeros((1, k), dtype=bool)
        for j in range(n_real):
            col = k - n_real + j
            rtg[0, col] = self._g_hist[lo + j]
            feats[0, col] = self._feat_hist[lo + j]
            ids[0, col] = self._aid_hist[lo + j]
            steps[0, col] = lo + j
            mask[0, col] = True
        batch = PolicyBatch(rtg=rtg, state_feats=feats, action_ids=ids,
                            timesteps=steps, mask=mask)
        mu, logvar = forward_policy(self.params, self.pcfg, batch)
        vec = sample_action(mu.data[0, -1], logvar.data[0, -1], self.mode, self.rng)
        legal = self.env.legal_actions(env_state)
        legal_idx = [self.indexer.to_index(a) for a in legal]
        choice = decode_action(vec, self.params["item_embed"].data, legal_idx)
        action = self.indexer.from_index(choice)
        self._aid_hist[-1] = self.indexer.to_index(action)
        return action

    def observe(self, reward: float) -> None:
        self.g = max(0.0, self.g - reward)


def rollout_episode(env: ItemGraphEnv, params, pcfg: PolicyConfig, encoder,
                    indexer: ActionIndexer, g_online: float, mode: str,
                    rng: np.random.Generator | None, step_cap: int = 50) -> Trajectory:
    actor = PolicyActor(params, pcfg, encoder, indexer, env, g_online, mode, rng)
    state = env.reset()
    states, actions, rewards = [], [], []
    done = False
    for _ in range(step_cap):
        action = actor.act(state)
        states.append(state.current)
        actions.append(action)
        state, reward, done = env.step(state, action)
        rewards.append(reward)
        actor.observe(reward)
        if done:
            break
    if not done:
        warnings.warn(f"episode truncated at step cap {step_cap}")
    return make_trajectory(states, actions, rewards)


# ---------------------------------------------------------------------------
# training loops

def _fit_value_map(trajectories, cfg: TrainConfig, n_actions: int, seed_offset: int = 0) -> dict:
    table = cql_fit(trajectories, cfg.cql_config(seed_offset), n_actions)
    return value_table(table)


def _train_iteration(buffer_items, relabeled_cache, vhat, cfg: TrainConfig,
                     params, pcfg, encoder, indexer, dual, beta,
                     opt_policy, opt_dual, rng):
    idx = sample_buffer_indices(buffer_items, cfg.batch_size, rng)
    pairs = []
    for i in idx:
        traj = buffer_items[int(i)]
        if cfg.relabel_enabled:
            cached = relabeled_cache.get(id(traj))
            if cached is None:
                cached = traj.with_relabel(relabel_rtg(traj, vhat))
                relabeled_cache[id(traj)] = cached
            traj = cached
        win = sample_subsequence(traj, cfg.context_length, rng)
        pairs.append((traj, win))
    batch = windows_to_batch(pairs, encoder, indexer, cfg.context_length)
    return lagrangian_step(params, pcfg, batch, dual, beta, opt_policy, opt_dual,
                           lambda_fixed=cfg.lambda_fixed)


def pretrain_offline(dataset, manifest: DatasetManifest, cfg: TrainConfig):
    """Relabel-then-sample-then-update against the static offline dataset."""
    if not dataset:
        raise ValueError("cannot pretrain on an empty dataset")
    encoder = encoder_for_manifest(manifest)
    indexer = ActionIndexer(manifest)
    pcfg = cfg.policy_config(encoder.dim, indexer.n_actions)
    rng = np.random.default_rng(cfg.seed)
    params = init_policy(pcfg, rng)
    dual = DualVariable.create(1.0)
    opt_policy = Adam(params, lr=cfg.lr)
    opt_dual = Adam({"omega": dual.omega}, lr=cfg.dual_lr)
    beta = cfg.entropy_floor()

    vhat: dict = {}
    if cfg.relabel_enabled:
        vhat = _fit_value_map(dataset, cfg, indexer.n_actions)
    cache: dict = {}
    metrics = []
    for it in range(cfg.pretrain_iters):
        m = _train_iteration(dataset, cache, vhat, cfg, params, pcfg, encoder,
                             indexer, dual, beta, opt_policy, opt_dual, rng)
        metrics.append({"iter": it, "nll": m.nll, "entropy": m.entropy, "lambda": m.lam})
    return params, pcfg, dual, metrics


def finetune_online(env: ItemGraphEnv, dataset, manifest: DatasetManifest,
                    params, pcfg: PolicyConfig, dual: DualVariable, cfg: TrainConfig):
    """Rounds of explore / buffer / update; returns per-round metric records."""
    encoder = encoder_for_manifest(manifest)
    indexer = ActionIndexer(manifest)
    rng = np.random.default_rng(cfg.seed + 1)
    opt_policy = Adam(params, lr=cfg.lr)
    opt_dual = Adam({"omega": dual.omega}, lr=cfg.dual_lr)
    beta = cfg.entropy_floor()

    buffer = init_buffer(dataset, cfg.top_n, cfg.buffer_capacity, cfg.protect_seeds)
    vhat: dict = {}
    if cfg.relabel_enabled and cfg.relabel_refresh == "frozen":
        vhat = _fit_value_map(dataset, cfg, indexer.n_actions)

    round_metrics = []
    for rnd in range(cfg.rounds):
        traj = rollout_episode(env, params, pcfg, encoder, indexer,
                               cfg.g_online, "stochastic", rng, cfg.step_cap)
        buffer.insert(traj)
        if cfg.relabel_enabled and cfg.relabel_refresh == "per_round":
            vhat = _fit_value_map(buffer.items, cfg, indexer.n_actions, seed_offset=rnd + 1)
        cache: dict = {}
        nlls, ents = [], []
        lam = dual.value if cfg.lambda_fixed is None else cfg.lambda_fixed
        for _ in range(cfg.iters_per_round):
            m = _train_iteration(buffer.items, cache, vhat, cfg, params, pcfg,
                                 encoder, indexer, dual, beta, opt_policy, opt_dual, rng)
            nlls.append(m.nll)
            ents.append(m.entropy)
            lam = m.lam
        round_metrics.append({
            "round": rnd,
            "rollout_return": traj.total_return,
            "rollout_length": len(traj),
            "nll": float(np.mean(nlls)),
            "entropy": float(np.mean(ents)),
            "lambda": lam,
            "buffer_size": len(buffer),
        })
    return params, dual, round_metrics
