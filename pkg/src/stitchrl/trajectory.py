"""Trajectory data model, return-to-go math, dataset files, rating ingestion.

A trajectory is immutable once built. States may be discrete ids (item
graphs), fixed-length id windows (rating logs), or plain float vectors;
actions likewise. Rewards and RTG are always float64 arrays of length T.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    pass


_FILE_FORMAT = 1


def reward_to_go(rewards) -> np.ndarray:
    """Suffix sums: out[t] = sum of rewards[t:]."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0)
    return np.cumsum(r[::-1])[::-1].copy()


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple
    rewards: np.ndarray
    rtg: np.ndarray
    rtg_relabel: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        object.__setattr__(self, "rtg", np.asarray(self.rtg, dtype=np.float64))
        if self.rtg_relabel is not None:
            object.__setattr__(self, "rtg_relabel", np.asarray(self.rtg_relabel, dtype=np.float64))
        t = len(self.states)
        if t < 1:
            raise DatasetError("trajectory must have length >= 1")
        for name, seq in (("actions", self.actions), ("rewards", self.rewards), ("rtg", self.rtg)):
            if len(seq) != t:
                raise DatasetError(f"{name} length {len(seq)} != states length {t}")
        if self.rtg_relabel is not None and len(self.rtg_relabel) != t:
            raise DatasetError(f"rtg_relabel length {len(self.rtg_relabel)} != states length {t}")
        for arr in (self.rewards, self.rtg):
            if not np.isfinite(arr).all():
                raise DatasetError("non-finite reward/rtg value")
        self.rewards.setflags(write=False)
        self.rtg.setflags(write=False)
        if self.rtg_relabel is not None:
            self.rtg_relabel.setflags(write=False)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())

    def with_relabel(self, rtg_relabel) -> "Trajectory":
        return dataclasses.replace(self, rtg_relabel=np.asarray(rtg_relabel, dtype=np.float64))


def make_trajectory(states, actions, rewards) -> Trajectory:
    rewards = np.asarray(rewards, dtype=np.float64)
    return Trajectory(tuple(states), tuple(actions), rewards, reward_to_go(rewards))


@dataclass
class ContextWindow:
    """Length-K slice of (RTG, state, action) triples ending at `end`.

    Left-padded when the window starts before t=0: padded entries carry
    timestep -1, state/action None and RTG 0, and are False in the mask.
    RTG entries are regenerated backward from the trajectory's value at
    `end` so that rtg[j] - rtg[j+1] == reward[j] exactly inside the window.
    """
    rtg: np.ndarray
    states: list
    actions: list
    timesteps: np.ndarray
    mask: np.ndarray
    end: int

    def __post_init__(self):
        k = len(self.rtg)
        if not (len(self.states) == len(self.actions) == len(self.timesteps) == len(self.mask) == k):
            raise DatasetError("context window field lengths differ")


def regenerate_window_rtg(window_rewards, anchor: float) -> np.ndarray:
    """Backward reward recursion from a fixed final value.

    Returns K values where K = len(window_rewards) + 1; the last equals
    `anchor` and each earlier entry is reward + successor value.
    """
    rew = np.asarray(window_rewards, dtype=np.float64)
    out = np.empty(len(rew) + 1)
    out[-1] = anchor
    for j in range(len(rew) - 1, -1, -1):
        out[j] = rew[j] + out[j + 1]
    return out


def sample_subsequence(traj: Trajectory, k: int, rng: np.random.Generator,
                       use_relabel: bool = True) -> ContextWindow:
    """Uniformly sample a length-K window ending at a random timestep."""
    if k < 1:
        raise ValueError(f"context length must be >= 1, got {k}")
    t = len(traj)
    end = int(rng.integers(0, t))
    start = end - k + 1
    n_pad = max(0, -start)
    lo = max(0, start)

    src = traj.rtg_relabel if (use_relabel and traj.rtg_relabel is not None) else traj.rtg
    real_rtg = regenerate_window_rtg(traj.rewards[lo:end], float(src[end]))

    rtg = np.zeros(k)
    rtg[n_pad:] = real_rtg
    states = [None] * n_pad + list(traj.states[lo:end + 1])
    actions = [None] * n_pad + list(traj.actions[lo:end + 1])
    timesteps = np.full(k, -1, dtype=np.int64)
    timesteps[n_pad:] = np.arange(lo, end + 1)
    mask = np.zeros(k, dtype=bool)
    mask[n_pad:] = True
    return ContextWindow(rtg, states, actions, timesteps, mask, end)


def trajectory_sampling_probs(buffer) -> np.ndarray:
    """Length-proportional selection probabilities: p_i = |tau_i| / sum |tau_j|."""
    if len(buffer) == 0:
        raise ValueError("empty trajectory buffer")
    lengths = np.array([len(t) for t in buffer], dtype=np.float64)
    return lengths / lengths.sum()


# ---------------------------------------------------------------------------
# rating-log ingestion

def ingest_ratings(log, max_rating: float, window: int = 5):
    """Turn a (user, item, rating, timestamp) interaction log into trajectories.

    Reward is 1.0 when the rating strictly exceeds 75% of the maximum
    rating, else 0.0. The state before each interaction is the window of
    the user's last `window` clicked (reward-1) items, left-zero-padded,
    as indices into the item vocabulary (0 is the pad id).
    """
    if max_rating <= 0:
        raise ValueError("max_rating must be positive")
    threshold = 0.75 * max_rating
    items = sorted({item for _, item, _, _ in log}, key=str)
    item_id = {item: i + 1 for i, item in enumerate(items)}

    by_user: dict = {}
    for idx, (user, item, rating, ts) in enumerate(log):
        if not (0 <= rating <= max_rating):
            raise ValueError(f"rating {rating} outside [0, {max_rating}] at record {idx}")
        by_user.setdefault(user, []).append((ts, idx, item, rating))

    trajectories = []
    for user in sorted(by_user, key=str):
        events = sorted(by_user[user], key=lambda e: (e[0], e[1]))
        states, actions, rewards = [], [], []
        clicked: list[int] = []
        for _, _, item, rating in events:
            padded = [0] * max(0, window - len(clicked)) + clicked[-window:]
            states.append(tuple(padded))
            actions.append(item_id[item])
            reward = 1.0 if rating > threshold else 0.0
            rewards.append(reward)
            if reward > 0:
                clicked.append(item_id[item])
        trajectories.append(make_trajectory(states, actions, rewards))

    manifest = DatasetManifest(
        trajectories=len(trajectories),
        kind="rating_log",
        items=[str(i) for i in items],
        action_space={"type": "discrete", "n": len(items)},
        state_space={"type": "click_window", "window": window, "n_items": len(items)},
        reward_range=[0.0, 1.0],
        provenance=f"ingested rating log, {len(log)} interactions, max_rating={max_rating}",
    )
    return trajectories, manifest


# ---------------------------------------------------------------------------
# dataset files

@dataclass
class DatasetManifest:
    trajectories: int
    kind: str
    items: list
    action_space: dict
    state_space: dict
    reward_range: list
    provenance: str
    extra: dict = dataclasses.field(default_factory=dict)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["format"] = _FILE_FORMAT
        return d

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        if d.get("format") != _FILE_FORMAT:
            raise DatasetError(f"unsupported dataset format: {d.get('format')!r}")
        return DatasetManifest(
            trajectories=d["trajectories"], kind=d["kind"], items=d["items"],
            action_space=d["action_space"], state_space=d["state_space"],
            reward_range=d["reward_range"], provenance=d["provenance"],
            extra=d.get("extra", {}),
        )


def manifest_path(path: str) -> str:
    return str(path) + ".manifest.json"


def _state_to_json(s):
    if isinstance(s, tuple):
        return list(s)
    return s


def _state_from_json(s):
    if isinstance(s, list):
        return tuple(s)
    return s


def save_dataset(path, trajectories, manifest: DatasetManifest) -> None:
    """One JSON record per line per trajectory, plus a manifest alongside."""
    manifest = dataclasses.replace(manifest, trajectories=len(trajectories))
    with open(path, "w") as fh:
        for traj in trajectories:
            rec = {
                "states": [_state_to_json(s) for s in traj.states],
                "actions": [_state_to_json(a) for a in traj.actions],
                "rewards": traj.rewards.tolist(),
                "rtg": traj.rtg.tolist(),
            }
            if traj.rtg_relabel is not None:
                rec["rtg_relabel"] = traj.rtg_relabel.tolist()
            fh.write(json.dumps(rec) + "\n")
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
        fh.write("\n")


def load_dataset(path):
    try:
        with open(manifest_path(path)) as fh:
            manifest = DatasetManifest.from_json(json.load(fh))
    except FileNotFoundError:
        raise DatasetError(f"missing manifest for dataset {path}")
    trajectories = []
    with open(path) as fh:
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                traj = Trajectory(
                    states=tuple(_state_from_json(s) for s in rec["states"]),
                    actions=tuple(_state_from_json(a) for a in rec["actions"]),
                    rewards=np.array(rec["rewards"], dtype=np.float64),
                    rtg=np.array(rec["rtg"], dtype=np.float64),
                    rtg_relabel=(np.array(rec["rtg_relabel"], dtype=np.float64)
                                 if "rtg_relabel" in rec else None),
                )
            except (KeyError, json.JSONDecodeError, DatasetError) as e:
                raise DatasetError(f"trajectory {idx}: {e}") from e
            trajectories.append(traj)
    if manifest.trajectories != len(trajectories):
        raise DatasetError(
            f"manifest says {manifest.trajectories} trajectories, file has {len(trajectories)}")
    return trajectories, manifest
