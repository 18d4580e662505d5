import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vlmt.gradcheck import tiny_model_config, tiny_world_config
from vlmt.model import Model
from vlmt.world import generate_episode


@pytest.fixture(scope="session")
def tiny_world():
    return tiny_world_config(seed=5)


@pytest.fixture(scope="session")
def tiny_episodes(tiny_world):
    return [generate_episode(i, tiny_world) for i in range(40)]


def make_tiny_model(mode: str, seed: int = 1, dtype=np.float32, **overrides) -> Model:
    model = Model(tiny_model_config(mode, **overrides), dtype=dtype)
    model.init_params(seed)
    return model


@pytest.fixture(scope="session")
def tiny_baseline():
    return make_tiny_model("baseline")


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_world, tiny_episodes):
    from vlmt.dataset import write_dataset

    path = tmp_path_factory.mktemp("data") / "tiny"
    write_dataset(tiny_episodes, str(path), tiny_world)
    return str(path)
