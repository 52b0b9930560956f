"""Value-guided return-to-go relabeling.

Backward over a trajectory, the propagated RTG at each step is the reward
plus the larger of the successor's propagated RTG and the successor
state's estimated value:

    R[t] = r[t] + max(R[t+1], V(s[t+1]))

with R and V both zero past the end of the trajectory. Rewards are never
touched; the relabeled sequence is stored next to the original. When a
trajectory shares a state with a better-valued branch seen elsewhere, its
prefix inherits that branch's value, which is what lets a return-conditioned
model stitch good segments out of bad episodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .trajectory import Trajectory, regenerate_window_rtg

__all__ = ["relabel_rtg", "relabel_dataset", "RelabelReport", "regenerate_window_rtg"]


def _value_fn(vhat):
    if callable(vhat):
        return vhat
    table = vhat or {}
    return lambda s: table.get(s, 0.0)


def relabel_rtg(traj: Trajectory, vhat) -> np.ndarray:
    """Relabeled RTG sequence for one trajectory; the input is not modified.

    vhat may be a mapping (missing states default to 0) or a callable.
    """
    value = _value_fn(vhat)
    t_len = len(traj)
    out = np.empty(t_len)
    carry = 0.0  # R[t+1], zero past the end; V past the end is zero too
    for t in range(t_len - 1, -1, -1):
        v_next = value(traj.states[t + 1]) if t + 1 < t_len else 0.0
        if not math.isfinite(v_next):
            raise ArithmeticError(f"non-finite state value at step {t + 1}")
        out[t] = traj.rewards[t] + max(carry, v_next)
        carry = out[t]
    return out


@dataclass
class RelabelReport:
    """Audit of what relabeling changed, one entry per trajectory."""
    lifted_positions: list[int] = field(default_factory=list)
    max_uplift: list[float] = field(default_factory=list)
    original: list[np.ndarray] = field(default_factory=list)
    relabeled: list[np.ndarray] = field(default_factory=list)

    def add(self, traj: Trajectory, new_rtg: np.ndarray, value) -> None:
        t_len = len(traj)
        lifted = 0
        carry = 0.0
        for t in range(t_len - 1, -1, -1):
            v_next = value(traj.states[t + 1]) if t + 1 < t_len else 0.0
            if v_next > carry:
                lifted += 1
            carry = new_rtg[t]
        uplift = new_rtg - traj.rtg
        self.lifted_positions.append(lifted)
        self.max_uplift.append(float(uplift.max()) if t_len else 0.0)
        self.original.append(traj.rtg)
        self.relabeled.append(new_rtg)

    def summary(self) -> dict:
        return {
            "trajectories": len(self.relabeled),
            "lifted_positions": int(sum(self.lifted_positions)),
            "max_uplift": float(max(self.max_uplift, default=0.0)),
        }

    def write(self, path) -> None:
        import json
        with open(path, "w") as fh:
            fh.write(json.dumps(self.summary()) + "\n")
            for i in range(len(self.relabeled)):
                fh.write(json.dumps({
                    "trajectory": i,
                    "lifted_positions": self.lifted_positions[i],
                    "max_uplift": self.max_uplift[i],
                    "rtg": self.original[i].tolist(),
                    "rtg_relabel": self.relabeled[i].tolist(),
                }) + "\n")


def relabel_dataset(trajectories, vhat, policy=None) -> tuple[list[Trajectory], RelabelReport]:
    """Relabel every trajectory; vhat is a state-value map, a callable, or a
    fitted Q table (optionally with an explicit evaluation policy)."""
    from .cql import QTable, value_table
    if isinstance(vhat, QTable):
        vhat = value_table(vhat, policy)
    value = _value_fn(vhat)
    report = RelabelReport()
    out = []
    for traj in trajectories:
        new_rtg = relabel_rtg(traj, value)
        report.add(traj, new_rtg, value)
        out.append(traj.with_relabel(new_rtg))
    return out, report
