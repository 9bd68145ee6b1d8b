"""
Tests for the training loop: determinism, descent, loss accounting and resume
"""
import json

import numpy as np
import pytest

from backend.errors import ArgumentError, TrainingError
from detector.contracts import LossBreakdown
from detector.models import TrainConfig
from detector.objective import DetectorStates, advance_states, prepare_batch, total_loss
from detector.snapshot import load_snapshot, save_snapshot
from detector.trainer import check_finite, epoch_order, initial_params, train, train_step


def assert_same_params(a, b):
    for name, value in a.blocks().items():
        assert np.array_equal(value, b.blocks()[name]), name


class TestTrain:
    """train() over the tiny generated dataset"""

    def test_bitwise_deterministic(self, tiny_records, tiny_loader):
        config = TrainConfig(epochs=2, batch_size=2, embedding_dim=4, seed=5, use_aa=True, use_es=True, use_cr=True)
        first = train(tiny_records, config, tiny_loader)
        second = train(tiny_records, config, tiny_loader)
        assert_same_params(first.params, second.params)
        assert first.log.to_jsonl().count("\n") == 2

    def test_second_epoch_does_not_increase_loss(self, tiny_records, tiny_loader):
        config = TrainConfig(epochs=2, batch_size=1, learning_rate=0.1, embedding_dim=4, seed=1)
        result = train(tiny_records[:1], config, tiny_loader)
        first, second = (record.losses["total"] for record in result.log.epochs)
        assert second <= first

    def test_es_adds_weighted_terms_at_first_iteration(self, tiny_records, tiny_loader, tiny_train_config):
        with_es = tiny_train_config.model_copy(update={"use_es": True})
        base_step = train(tiny_records, tiny_train_config, tiny_loader).log.iterations[0]
        es_step = train(tiny_records, with_es, tiny_loader).log.iterations[0]
        added = with_es.lambda1 * es_step["cluster"] + with_es.lambda2 * es_step["stack"]
        assert es_step["total"] == pytest.approx(base_step["total"] + added, abs=1e-12)
        assert es_step["obj"] == base_step["obj"]

    def test_toggles_do_not_shift_initialisation(self, tiny_train_config):
        with_all = tiny_train_config.model_copy(update={"use_aa": True, "use_es": True, "use_cr": True})
        assert_same_params(initial_params(tiny_train_config), initial_params(with_all))

    def test_epoch_orders_differ(self, tiny_train_config):
        orders = {tuple(epoch_order(20, tiny_train_config, e)) for e in range(3)}
        assert len(orders) == 3
        assert sorted(epoch_order(20, tiny_train_config, 0)) == list(range(20))

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_records, tiny_loader):
        full = TrainConfig(epochs=2, batch_size=2, embedding_dim=4, seed=8, use_aa=True, use_es=True, use_cr=True)
        half = full.model_copy(update={"epochs": 1})
        uninterrupted = train(tiny_records, full, tiny_loader)

        partial = train(tiny_records, half, tiny_loader)
        path = save_snapshot(tmp_path / "snapshot.json", partial.snapshot(half))
        resumed = train(tiny_records, half, tiny_loader, resume=load_snapshot(path))

        assert resumed.epochs_completed == 2
        assert resumed.log.epochs[0].epoch == 1
        assert_same_params(uninterrupted.params, resumed.params)

    def test_log_records_validation(self, tmp_path, tiny_records, tiny_loader, tiny_train_config, tiny_eval_config):
        result = train(tiny_records[:2], tiny_train_config, tiny_loader, val_records=tiny_records[2:],
                       eval_config=tiny_eval_config)
        lines = result.log.write(tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert set(record["losses"]) == {"cls", "bbox", "obj", "cluster", "stack", "context", "total"}
        assert set(record["validation"]) == {"map", "precision", "recall", "f1"}
        assert all(0.0 <= v <= 1.0 for v in record["validation"].values())
        assert record["wall_time_s"] >= 0.0

    def test_empty_records(self, tiny_loader, tiny_train_config):
        with pytest.raises(ArgumentError):
            train([], tiny_train_config, tiny_loader)


class TestFiniteGuard:
    """Non-finite losses or parameters stop training"""

    def test_nan_loss_raises(self, tiny_train_config):
        params = initial_params(tiny_train_config)
        with pytest.raises(TrainingError, match="Non-finite loss at step 3"):
            check_finite(LossBreakdown(obj=float("nan"), total=float("nan")), params, 3)

    def test_infinite_parameter_raises(self, tiny_train_config):
        params = initial_params(tiny_train_config)
        params.off_b[0] = np.inf
        with pytest.raises(TrainingError, match="off_b"):
            check_finite(LossBreakdown(total=1.0), params, 0)

    def test_finite_passes(self, tiny_train_config):
        check_finite(LossBreakdown(total=1.0), initial_params(tiny_train_config), 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflowing_step_size_stops_training(self, tiny_records, tiny_loader):
        config = TrainConfig(epochs=3, batch_size=1, embedding_dim=4, learning_rate=1e200, max_grad_norm=None)
        with pytest.raises(TrainingError, match="Non-finite"):
            train(tiny_records, config, tiny_loader)


class TestClipping:
    """Global-norm clipping bounds every update"""

    def test_update_bounded_by_step_size_times_cap(self, tiny_records, tiny_loader):
        config = TrainConfig(embedding_dim=4, learning_rate=1.0, max_grad_norm=1e-3, use_es=True, use_cr=True)
        params = initial_params(config)
        images = [tiny_loader.load_image(record) for record in tiny_records[:2]]
        annotations = [record.annotations for record in tiny_records[:2]]
        updated, _, _ = train_step(images, annotations, params, DetectorStates.fresh(config), config, 0)
        moved = np.sqrt(sum(np.sum((updated.blocks()[k] - v) ** 2) for k, v in params.blocks().items()))
        assert 0.0 < moved <= 1e-3 * (1.0 + 1e-9)

    def test_disabled_clipping_takes_full_step(self, tiny_records, tiny_loader):
        config = TrainConfig(embedding_dim=4, learning_rate=0.1, max_grad_norm=None)
        params = initial_params(config)
        images = [tiny_loader.load_image(tiny_records[0])]
        annotations = [tiny_records[0].annotations]
        states = DetectorStates.fresh(config)
        updated, _, _ = train_step(images, annotations, params, states, config, 0)
        batch = prepare_batch(images, annotations, params, states, config)
        _, grads = total_loss(batch, params, advance_states(batch, params, states, config), config)
        for name, value in params.blocks().items():
            np.testing.assert_allclose(updated.blocks()[name], value - 0.1 * grads[name])
