"""Tabular conservative Q-learning over dataset transitions.

Fits a table keyed by in-support (state, action) pairs with max-backup
targets. The conservatism weight alpha subtracts a uniform-distribution
penalty from every stored entry of a visited state's row, which pushes the
fitted values below the plain fitted-Q solution; with alpha=0 the update
is exactly tabular value iteration on the transitions the data contains.

Note on the penalty: the symmetric form (mean-Q minus data-Q) would push
frequent in-data actions *above* their Bellman values, destroying the
lower-bound property this module exists to provide, so only the mean-Q
side contributes to the applied gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CQLConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    lr: float = 0.1
    sweeps: int = 5000
    mu: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.mu != "uniform":
            raise ValueError("only the uniform penalty distribution is supported")


@dataclass
class QTable:
    values: dict = field(default_factory=dict)   # (state, action) -> float
    n_states: int = 0
    n_actions: int = 0
    actions_at: dict = field(default_factory=dict)  # state -> sorted in-data actions

    def get(self, state, action) -> float:
        return self.values.get((state, action), 0.0)

    def known(self, state) -> bool:
        return state in self.actions_at

    def row_max(self, state) -> float:
        actions = self.actions_at.get(state)
        if not actions:
            return 0.0
        return max(self.values[(state, a)] for a in actions)


def transitions_from(trajectories):
    """Deduplicated (state, action, reward, next_state, done) tuples.

    The final step of a trajectory is terminal: its successor state is
    absorbing with value zero.
    """
    seen = set()
    out = []
    for traj in trajectories:
        t_len = len(traj)
        for t in range(t_len):
            done = t == t_len - 1
            nxt = None if done else traj.states[t + 1]
            rec = (traj.states[t], traj.actions[t], float(traj.rewards[t]), nxt, done)
            if rec not in seen:
                seen.add(rec)
                out.append(rec)
    out.sort(key=lambda r: (repr(r[0]), repr(r[1]), r[2], repr(r[3])))
    return out


def cql_fit(trajectories, cfg: CQLConfig, n_actions: int) -> QTable:
    """Iterative stochastic sweeps over the dataset's unique transitions."""
    if not trajectories:
        raise ValueError("cannot fit a Q table on an empty dataset")
    trans = transitions_from(trajectories)
    values: dict = {}
    actions_at: dict = {}
    for s, a, _, _, _ in trans:
        values.setdefault((s, a), 0.0)
        actions_at.setdefault(s, set()).add(a)
    actions_at = {s: sorted(acts, key=repr) for s, acts in actions_at.items()}

    rng = np.random.default_rng(cfg.seed)
    penalty = cfg.lr * cfg.alpha / n_actions
    order = np.arange(len(trans))
    for _ in range(cfg.sweeps):
        rng.shuffle(order)
        for i in order:
            s, a, r, nxt, done = trans[i]
            if done or nxt not in actions_at:
                target = r
            else:
                target = r + cfg.gamma * max(values[(nxt, b)] for b in actions_at[nxt])
            values[(s, a)] += cfg.lr * (target - values[(s, a)])
            if penalty:
                for b in actions_at[s]:
                    values[(s, b)] -= penalty

    table = QTable(values=values, n_states=len(actions_at), n_actions=n_actions,
                   actions_at=actions_at)
    for v in table.values.values():
        if not np.isfinite(v):
            raise ArithmeticError("non-finite Q value after fitting")
    return table


def state_value(table: QTable, policy: dict, state) -> tuple[float, bool]:
    """Expected Q under an action distribution; (0.0, False) off the table."""
    if not table.known(state):
        return 0.0, False
    dist = policy[state]
    total = sum(dist.values())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"policy row for state {state!r} sums to {total}, not 1")
    value = sum(prob * table.get(state, action) for action, prob in dist.items())
    return value, True


def greedy_indata_policy(table: QTable) -> dict:
    """Point mass on the best in-data action per state (ties: first in sort order)."""
    policy = {}
    for state, actions in table.actions_at.items():
        best = actions[0]
        for a in actions[1:]:
            if table.values[(state, a)] > table.values[(state, best)]:
                best = a
        policy[state] = {best: 1.0}
    return policy


def value_table(table: QTable, policy: dict | None = None) -> dict:
    """State-value map used by RTG relabeling; terminals and unknown states
    are simply absent (callers default them to zero)."""
    if policy is None:
        policy = greedy_indata_policy(table)
    out = {}
    for state in table.actions_at:
        v, _ = state_value(table, policy, state)
        out[state] = v
    return out


# ---------------------------------------------------------------------------
# serialization: one JSON record per line, header first

def save_qtable(path, table: QTable) -> None:
    import json
    with open(path, "w") as fh:
        fh.write(json.dumps({"n_states": table.n_states, "n_actions": table.n_actions}) + "\n")
        for (s, a), q in sorted(table.values.items(), key=lambda kv: (repr(kv[0][0]), repr(kv[0][1]))):
            fh.write(json.dumps({"state": _key_json(s), "action": _key_json(a), "q": q}) + "\n")


def load_qtable(path) -> QTable:
    import json
    values = {}
    actions_at: dict = {}
    with open(path) as fh:
        header = json.loads(fh.readline())
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            s = _key_from_json(rec["state"])
            a = _key_from_json(rec["action"])
            values[(s, a)] = float(rec["q"])
            actions_at.setdefault(s, []).append(a)
    actions_at = {s: sorted(acts, key=repr) for s, acts in actions_at.items()}
    return QTable(values=values, n_states=header["n_states"],
                  n_actions=header["n_actions"], actions_at=actions_at)


def _key_json(k):
    return list(k) if isinstance(k, tuple) else k


def _key_from_json(k):
    return tuple(k) if isinstance(k, list) else k
