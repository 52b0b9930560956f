import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stitchrl import envs


@pytest.fixture(scope="session")
def default_graph():
    return envs.default_graph()


@pytest.fixture(scope="session")
def stitch_dataset(default_graph):
    """The canonical offline log: 300 episodes over the three scripted paths."""
    return envs.generate_offline_dataset(
        default_graph, envs.default_logging_policies(), 300, seed=0)
