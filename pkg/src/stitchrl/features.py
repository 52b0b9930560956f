"""State featurizers and action indexing shared by trainer and evaluation.

Raw trajectory states stay in their compact form (item ids, click windows);
these encoders turn them into the fixed-width float vectors the policy
consumes, resolved from the dataset manifest.
"""

from __future__ import annotations

import numpy as np

from .trajectory import DatasetManifest


class GraphStateEncoder:
    """One-hot of the current item concatenated with one-hot of the previous."""

    def __init__(self, items):
        self.items = tuple(items)
        self.index = {item: i for i, item in enumerate(self.items)}
        self.dim = 2 * len(self.items)

    def encode_sequence(self, states) -> np.ndarray:
        out = np.zeros((len(states), self.dim))
        prev = None
        for t, cur in enumerate(states):
            out[t, self.index[cur]] = 1.0
            if prev is not None:
                out[t, len(self.items) + self.index[prev]] = 1.0
            prev = cur
        return out

    def encode_step(self, current, previous=None) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.index[current]] = 1.0
        if previous is not None:
            out[len(self.items) + self.index[previous]] = 1.0
        return out


class ClickWindowEncoder:
    """Normalized multi-hot over the vocabulary for last-W click windows."""

    def __init__(self, n_items: int, window: int):
        self.n_items = n_items
        self.window = window
        self.dim = n_items

    def encode_sequence(self, states) -> np.ndarray:
        out = np.zeros((len(states), self.dim))
        for t, win in enumerate(states):
            for item_id in win:
                if item_id > 0:
                    out[t, item_id - 1] += 1.0 / self.window
        return out


def encoder_for_manifest(manifest: DatasetManifest):
    if manifest.kind == "item_graph":
        return GraphStateEncoder(manifest.items)
    if manifest.kind == "rating_log":
        return ClickWindowEncoder(len(manifest.items), manifest.state_space["window"])
    raise ValueError(f"no state encoder for dataset kind {manifest.kind!r}")


class ActionIndexer:
    """Maps dataset actions to embedding-table rows and back."""

    def __init__(self, manifest: DatasetManifest):
        self.kind = manifest.kind
        self.items = tuple(manifest.items)
        if self.kind == "item_graph":
            self._index = {item: i for i, item in enumerate(self.items)}
        elif self.kind == "rating_log":
            self._index = {i + 1: i for i in range(len(self.items))}
        else:
            raise ValueError(f"no action indexer for dataset kind {self.kind!r}")

    @property
    def n_actions(self) -> int:
        return len(self.items)

    def to_index(self, action) -> int:
        return self._index[action]

    def from_index(self, idx: int):
        if self.kind == "item_graph":
            return self.items[idx]
        return idx + 1
