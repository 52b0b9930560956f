"""Item-graph MDP: a DAG of items where episodes walk start to a terminal.

Reward is zero everywhere except on arrival at a terminal item, which pays
that terminal's declared reward. The default world has one rewarded
terminal reachable both by a logged path and by an unlogged shortcut, so
it exercises trajectory stitching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import DatasetManifest, Trajectory, make_trajectory


class GraphError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class ItemGraph:
    items: tuple[str, ...]
    edges: dict[str, tuple[str, ...]]
    start: str
    terminal_rewards: dict[str, float]

    def successors(self, item: str) -> tuple[str, ...]:
        return self.edges.get(item, ())

    def is_terminal(self, item: str) -> bool:
        return item in self.terminal_rewards


def build_graph(edges: dict[str, tuple[str, ...]], start: str,
                terminal_rewards: dict[str, float]) -> ItemGraph:
    items = sorted(set(edges) | {s for succ in edges.values() for s in succ} | {start}
                   | set(terminal_rewards))
    graph = ItemGraph(tuple(items), {k: tuple(v) for k, v in edges.items()},
                      start, dict(terminal_rewards))
    validate_graph(graph)
    return graph


def validate_graph(graph: ItemGraph) -> None:
    for item in graph.items:
        succ = graph.successors(item)
        if graph.is_terminal(item):
            if succ:
                raise GraphError(f"terminal item {item} has successors {succ}")
        elif not succ:
            raise GraphError(f"non-terminal item {item} has no successors (missing terminal line?)")
    # acyclicity by depth-first search with a path stack
    state: dict[str, int] = {}

    def visit(item: str):
        state[item] = 1
        for nxt in graph.successors(item):
            mark = state.get(nxt, 0)
            if mark == 1:
                raise GraphError(f"cycle through item {nxt}")
            if mark == 0:
                visit(nxt)
        state[item] = 2

    visit(graph.start)
    best = max((r for path, r in _terminal_returns(graph)), default=None)
    if best is None or best <= 0:
        raise GraphError("start item cannot reach any positive-reward terminal")


def _terminal_returns(graph: ItemGraph):
    for path in enumerate_paths(graph):
        yield path, graph.terminal_rewards[path[-1]]


def enumerate_paths(graph: ItemGraph) -> list[tuple[str, ...]]:
    """All start-to-terminal item paths (the graphs used here are tiny DAGs)."""
    out: list[tuple[str, ...]] = []

    def walk(item: str, prefix: tuple[str, ...]):
        if graph.is_terminal(item):
            out.append(prefix)
            return
        for nxt in graph.successors(item):
            walk(nxt, prefix + (nxt,))

    walk(graph.start, (graph.start,))
    return out


def default_graph() -> ItemGraph:
    """Eight-item stitch world: the rewarded terminal i7 is reachable from
    both i6 (covered by a logged path) and i4 (the stitch linkage)."""
    edges = {
        "i1": ("i2",),
        "i2": ("i3", "i6"),
        "i3": ("i4", "i5"),
        "i4": ("i7", "i8"),
        "i6": ("i7",),
    }
    return build_graph(edges, "i1", {"i5": 0.0, "i7": 1.0, "i8": 0.0})


# The sub-optimal behavior that produced the offline log: two zero-return
# walks and one rewarded walk. The shortcut (i1,i2,i3,i4,i7) is never logged.
DEFAULT_LOGGED_PATHS = (
    ("i1", "i2", "i3", "i4", "i8"),
    ("i1", "i2", "i6", "i7"),
    ("i1", "i2", "i3", "i5"),
)


# ---------------------------------------------------------------------------
# graph files

def parse_graph(text: str) -> ItemGraph:
    """Declarative format: 'start X', 'edge A B', 'terminal X reward' lines."""
    edges: dict[str, list[str]] = {}
    terminals: dict[str, float] = {}
    start = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "start" and len(parts) == 2:
            start = parts[1]
        elif parts[0] == "edge" and len(parts) == 3:
            edges.setdefault(parts[1], []).append(parts[2])
        elif parts[0] == "terminal" and len(parts) == 3:
            terminals[parts[1]] = float(parts[2])
        else:
            raise GraphError(f"line {lineno}: cannot parse {raw!r}")
    if start is None:
        raise GraphError("graph file has no 'start' line")
    return build_graph({k: tuple(v) for k, v in edges.items()}, start, terminals)


def load_graph(path) -> ItemGraph:
    with open(path) as fh:
        return parse_graph(fh.read())


def write_graph(path, graph: ItemGraph) -> None:
    with open(path, "w") as fh:
        fh.write(f"start {graph.start}\n")
        for item in graph.items:
            for nxt in graph.successors(item):
                fh.write(f"edge {item} {nxt}\n")
        for item in sorted(graph.terminal_rewards):
            fh.write(f"terminal {item} {graph.terminal_rewards[item]}\n")


# ---------------------------------------------------------------------------
# environment

@dataclass(frozen=True)
class EnvState:
    current: str
    steps: int
    history: tuple[str, ...]


class ItemGraphEnv:
    def __init__(self, graph: ItemGraph):
        self.graph = graph

    def reset(self) -> EnvState:
        return EnvState(self.graph.start, 0, (self.graph.start,))

    def legal_actions(self, state: EnvState) -> tuple[str, ...]:
        return self.graph.successors(state.current)

    def step(self, state: EnvState, action: str) -> tuple[EnvState, float, bool]:
        if action not in self.graph.successors(state.current):
            raise InvalidActionError(f"{action!r} is not a successor of {state.current!r}")
        nxt = EnvState(action, state.steps + 1, state.history + (action,))
        done = self.graph.is_terminal(action)
        reward = self.graph.terminal_rewards[action] if done else 0.0
        return nxt, reward, done


# ---------------------------------------------------------------------------
# logging policies and offline data

@dataclass(frozen=True)
class LoggingPolicy:
    """Scripted walk along a fixed path, or epsilon-uniform over successors."""
    kind: str
    path: tuple[str, ...] = ()
    eps: float = 1.0

    def action(self, state: EnvState, rng: np.random.Generator,
               graph: ItemGraph) -> str:
        succ = graph.successors(state.current)
        if self.kind == "scripted":
            if state.steps + 1 >= len(self.path):
                raise InvalidActionError(f"scripted path {self.path} exhausted at {state.current}")
            return self.path[state.steps + 1]
        if self.kind == "eps_random":
            return succ[int(rng.integers(0, len(succ)))]
        raise ValueError(f"unknown policy kind {self.kind!r}")


def scripted_policy(path) -> LoggingPolicy:
    return LoggingPolicy(kind="scripted", path=tuple(path))


def uniform_random_policy() -> LoggingPolicy:
    return LoggingPolicy(kind="eps_random")


def default_logging_policies() -> list[LoggingPolicy]:
    return [scripted_policy(p) for p in DEFAULT_LOGGED_PATHS]


def run_policy_episode(env: ItemGraphEnv, policy: LoggingPolicy,
                       rng: np.random.Generator, step_cap: int = 50) -> Trajectory:
    state = env.reset()
    states, actions, rewards = [], [], []
    for _ in range(step_cap):
        action = policy.action(state, rng, env.graph)
        states.append(state.current)
        actions.append(action)
        state, reward, done = env.step(state, action)
        rewards.append(reward)
        if done:
            return make_trajectory(states, actions, rewards)
    raise GraphError(f"episode exceeded step cap {step_cap}")


def generate_offline_dataset(graph: ItemGraph, policies, n: int, seed: int):
    """n complete episodes, cycling through the given logging policies."""
    if n < 1:
        raise ValueError(f"need at least one trajectory, got n={n}")
    if not policies:
        raise ValueError("need at least one logging policy")
    env = ItemGraphEnv(graph)
    rng = np.random.default_rng(seed)
    trajectories = [run_policy_episode(env, policies[i % len(policies)], rng)
                    for i in range(n)]
    rewards = [r for t in trajectories for r in t.rewards]
    manifest = DatasetManifest(
        trajectories=n,
        kind="item_graph",
        items=list(graph.items),
        action_space={"type": "discrete", "n": len(graph.items)},
        state_space={"type": "item_pair", "d": 2 * len(graph.items)},
        reward_range=[float(min(rewards)), float(max(rewards))],
        provenance=f"generated from {len(policies)} logging policies, seed={seed}",
        extra={"start": graph.start},
    )
    return trajectories, manifest


def trajectory_path(traj: Trajectory) -> tuple[str, ...]:
    """Full item path of a graph trajectory, terminal included."""
    return tuple(traj.states) + (traj.actions[-1],)
