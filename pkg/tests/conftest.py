import json

import pytest
import torch

from pearl_lab.autodiff import use_precision
from pearl_lab.config import config_from_dict

TINY = {
    "task": {"d": 3, "k_max": 4},
    "learner": {"layers": 1, "heads": 2, "hidden": 16},
    "pnet": {"hidden": 16, "heads": 2, "layers": 1},
    "train": {"batch_size": 8, "total_steps": 10, "checkpoint_every": 5},
    "attack": {"samples": 4, "shots": [2, 3]},
}


@pytest.fixture
def float64():
    with use_precision("float64"):
        yield


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def tiny_dict(tmp_path):
    return json.loads(json.dumps({**TINY, "output_dir": str(tmp_path / "run")}))


@pytest.fixture
def tiny_config(tiny_dict):
    return config_from_dict(tiny_dict)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path
