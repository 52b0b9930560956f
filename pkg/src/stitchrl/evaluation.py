"""Policy evaluation: episodic returns, stitch rate, ranking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import ItemGraphEnv, trajectory_path
from .features import ActionIndexer
from .policy import LN_2PI, PolicyConfig, forward_policy
from .trainer import PolicyActor, windows_to_batch
from .trajectory import ContextWindow, regenerate_window_rtg


@dataclass
class EpisodeTrace:
    path: tuple[str, ...]
    total_return: float
    stitched: bool


@dataclass
class EvalReport:
    episodes: int
    mean_return: float
    std_return: float
    stitch_rate: float
    traces: list[EpisodeTrace] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "episodes": self.episodes,
            "mean_return": self.mean_return,
            "std_return": self.std_return,
            "stitch_rate": self.stitch_rate,
        }


class ScriptedActor:
    """Follows a fixed item path; useful as an evaluation oracle."""

    def __init__(self, path):
        self.path = tuple(path)
        self._step = 0

    def act(self, env_state) -> str:
        self._step += 1
        return self.path[self._step]

    def observe(self, reward: float) -> None:
        pass


def evaluate_policy(env: ItemGraphEnv, actor_factory, episodes: int,
                    known_paths=(), step_cap: int = 50) -> EvalReport:
    """Run episodes with fresh actors; an episode is 'stitched' when it ends
    at a positive-reward terminal via a full item path absent from the
    offline dataset's paths."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    known = set(tuple(p) for p in known_paths)
    traces = []
    for _ in range(episodes):
        actor = actor_factory()
        state = env.reset()
        total = 0.0
        done = False
        for _ in range(step_cap):
            action = actor.act(state)
            state, reward, done = env.step(state, action)
            total += reward
            actor.observe(reward)
            if done:
                break
        path = state.history
        stitched = done and total > 0 and path not in known
        traces.append(EpisodeTrace(path, total, stitched))
    returns = np.array([t.total_return for t in traces])
    return EvalReport(
        episodes=episodes,
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        stitch_rate=float(np.mean([t.stitched for t in traces])),
        traces=traces,
    )


def model_actor_factory(params, pcfg: PolicyConfig, encoder, indexer: ActionIndexer,
                        env: ItemGraphEnv, g_online: float, mode: str = "mean",
                        rng: np.random.Generator | None = None):
    def factory():
        return PolicyActor(params, pcfg, encoder, indexer, env, g_online, mode, rng)
    return factory


def dataset_paths(trajectories):
    return {trajectory_path(t) for t in trajectories}


# ---------------------------------------------------------------------------
# ranking metrics

def gaussian_log_density(vec: np.ndarray, mu: np.ndarray, logvar: np.ndarray) -> float:
    diff = vec - mu
    return float(-0.5 * np.sum(LN_2PI + logvar + diff * diff * np.exp(-logvar)))


def topk_metrics(ranked_indices, relevant: set, k: int) -> tuple[float, float, float]:
    """recall@k, precision@k, nDCG@k with binary relevance."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = list(ranked_indices)[:k]
    hits = [i for i in top if i in relevant]
    recall = len(hits) / len(relevant) if relevant else 0.0
    precision = len(hits) / k
    dcg = sum(1.0 / math.log2(rank + 2) for rank, idx in enumerate(top) if idx in relevant)
    ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(k, len(relevant))))
    ndcg = dcg / ideal if ideal > 0 else 0.0
    return recall, precision, ndcg


def build_rank_cases(trajectories, k_ctx: int):
    """One case per reward-1 interaction: the window ending at that step,
    with the clicked item as the relevant target. The target action sits in
    the window but is causally hidden from its own prediction."""
    cases = []
    for traj in trajectories:
        for t in range(len(traj)):
            if traj.rewards[t] <= 0:
                continue
            start = t - k_ctx + 1
            n_pad = max(0, -start)
            lo = max(0, start)
            real_rtg = regenerate_window_rtg(traj.rewards[lo:t], float(traj.rtg[t]))
            rtg = np.zeros(k_ctx)
            rtg[n_pad:] = real_rtg
            states = [None] * n_pad + list(traj.states[lo:t + 1])
            actions = [None] * n_pad + list(traj.actions[lo:t + 1])
            timesteps = np.full(k_ctx, -1, dtype=np.int64)
            timesteps[n_pad:] = np.arange(lo, t + 1)
            mask = np.zeros(k_ctx, dtype=bool)
            mask[n_pad:] = True
            win = ContextWindow(rtg, states, actions, timesteps, mask, t)
            cases.append((traj, win, traj.actions[t]))
    return cases


def rank_metrics(params, pcfg: PolicyConfig, encoder, indexer: ActionIndexer,
                 heldout_trajectories, k: int):
    """Rank every vocabulary item by Gaussian log-density of its embedding
    under the predicted distribution; average the top-k metrics over all
    reward-1 interactions in the held-out log."""
    cases = build_rank_cases(heldout_trajectories, pcfg.context_length)
    if not cases:
        raise ValueError("held-out set has no reward-1 interactions to rank")
    table = params["item_embed"].data
    recalls, precisions, ndcgs = [], [], []
    for traj, win, target in cases:
        batch = windows_to_batch([(traj, win)], encoder, indexer, pcfg.context_length)
        mu, logvar = forward_policy(params, pcfg, batch)
        m, lv = mu.data[0, -1], logvar.data[0, -1]
        scores = [gaussian_log_density(table[i], m, lv) for i in range(indexer.n_actions)]
        ranked = sorted(range(indexer.n_actions), key=lambda i: -scores[i])
        r, p, n = topk_metrics(ranked, {indexer.to_index(target)}, k)
        recalls.append(r)
        precisions.append(p)
        ndcgs.append(n)
    return {
        "cases": len(cases),
        "recall": float(np.mean(recalls)),
        "precision": float(np.mean(precisions)),
        "ndcg": float(np.mean(ndcgs)),
    }
