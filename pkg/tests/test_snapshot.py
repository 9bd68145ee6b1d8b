"""
Tests for snapshot save/load
"""
import json

import numpy as np
import pytest

from backend.errors import DatasetIOError, StateError
from detector.models import TrainConfig
from detector.snapshot import SNAPSHOT_VERSION, Snapshot, load_snapshot, save_snapshot
from detector.trainer import train


@pytest.fixture()
def trained(tiny_records, tiny_loader):
    config = TrainConfig(epochs=1, batch_size=2, embedding_dim=4, seed=2, use_aa=True, use_es=True, use_cr=True)
    return train(tiny_records, config, tiny_loader).snapshot(config)


class TestSnapshot:
    """Versioned JSON bundle"""

    def test_round_trip(self, tmp_path, trained):
        restored = load_snapshot(save_snapshot(tmp_path / "snap.json", trained))
        for name, value in trained.params.blocks().items():
            assert np.array_equal(value, restored.params.blocks()[name])
        assert restored.config == trained.config
        assert restored.epochs_completed == 1
        assert restored.states.aug.initialized
        assert set(restored.states.stabilizer.cluster_means) == set(trained.states.stabilizer.cluster_means)
        assert np.array_equal(restored.states.context.ref, trained.states.context.ref)

    def test_fields(self, tmp_path, trained):
        payload = json.loads(save_snapshot(tmp_path / "snap.json", trained).read_text())
        assert payload["version"] == SNAPSHOT_VERSION
        assert payload["config_hash"] == trained.config_hash

    def test_version_mismatch(self, trained):
        payload = trained.to_dict()
        payload["version"] = SNAPSHOT_VERSION + 1
        with pytest.raises(StateError):
            Snapshot.from_dict(payload)

    def test_hash_mismatch(self, trained):
        payload = trained.to_dict()
        payload["config"]["epochs"] = 99
        with pytest.raises(StateError, match="hash"):
            Snapshot.from_dict(payload)

    def test_unsafe_config_survives(self, trained):
        snapshot = Snapshot(trained.params, trained.states, TrainConfig.unchecked(delta=150.0, embedding_dim=4))
        assert Snapshot.from_dict(snapshot.to_dict()).config.delta == 150.0

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(DatasetIOError):
            load_snapshot(tmp_path / "none.json")
        corrupt = tmp_path / "corrupt.json"
        corrupt.write_text("{")
        with pytest.raises(DatasetIOError):
            load_snapshot(corrupt)
