"""
Shared fixtures: a tiny generated dataset and small training configs
"""
import numpy as np
import pytest

from backend.analysis.basic_statistics import ImageBuffer
from backend.data.loader import ManifestLoader
from data_gen.dataset import DatasetConfig, generate_dataset
from detector.models import EvalConfig, TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset_config():
    return DatasetConfig(
        n_images=4,
        width=64,
        height=64,
        mean_objects=8,
        min_separation=8.0,
        texture_scale=16.0,
        seed=3,
    )


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory, tiny_dataset_config):
    """Four 64x64 images, one per tier"""
    out_dir = tmp_path_factory.mktemp("tiny_data")
    return generate_dataset(tiny_dataset_config, out_dir)


@pytest.fixture()
def tiny_loader(tiny_manifest):
    return ManifestLoader(tiny_manifest)


@pytest.fixture()
def tiny_records(tiny_loader):
    return tiny_loader.read_records()


@pytest.fixture()
def tiny_train_config():
    return TrainConfig(epochs=1, batch_size=2, embedding_dim=4, seed=5)


@pytest.fixture()
def tiny_eval_config():
    return EvalConfig(k=2, ap_floor=0.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def two_by_two():
    """[0, 0.5; 0.5, 1]"""
    return ImageBuffer.from_array(np.array([[0.0, 0.5], [0.5, 1.0]]))
