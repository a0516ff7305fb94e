import json

import numpy as np
import pytest

from mvad.conf import RunConfig
from mvad.model import MvadModel
from mvad.synthdata import DatasetSpec, generate, load

TINY_CONFIG = {
    "seed": 11,
    "image_size": 32,
    "views": 3,
    "teacher_channels": [4, 8, 16],
    "window_sizes": [2, 2, 2],
    "top_k": [2, 2, 2],
    "blocks": [1, 1, 1],
    "bottleneck_channels": 16,
    "epochs": 1,
    "batch_samples": 2,
    "lr": 0.001,
}


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("MVAS_SEED", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return RunConfig().replace(**TINY_CONFIG)


@pytest.fixture
def tiny_spec():
    return DatasetSpec(seed=3, p_train=4, p_test_normal=3, p_test_anom=3, views=3, resolution=32)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = DatasetSpec(seed=3, p_train=4, p_test_normal=3, p_test_anom=3, views=3, resolution=32)
    generate(spec, root)
    return root


@pytest.fixture(scope="session")
def normal_only_dir(tmp_path_factory):
    """A dataset whose test split has no anomalies at all."""
    root = tmp_path_factory.mktemp("normal_only")
    spec = DatasetSpec(seed=5, p_train=2, p_test_normal=3, p_test_anom=0, views=3, resolution=32)
    generate(spec, root)
    return root


@pytest.fixture
def train_set(dataset_dir):
    return load(dataset_dir, "train")


@pytest.fixture
def test_set(dataset_dir):
    return load(dataset_dir, "test")


@pytest.fixture
def tiny_model(tiny_config):
    return MvadModel.init(tiny_config)


@pytest.fixture
def config_file(tmp_path, dataset_dir):
    """The tiny config as a JSON file pointing at the shared dataset."""
    path = tmp_path / "tiny.json"
    data = dict(TINY_CONFIG, dataset=str(dataset_dir), output_dir=str(tmp_path / "runs"))
    path.write_text(json.dumps(data))
    return path
