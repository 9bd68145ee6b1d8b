"""
Tests for scoring, local-maximum suppression and detection output
"""
import numpy as np
import pytest

from backend.analysis.basic_statistics import ImageBuffer
from backend.embedding.context import ContextState
from detector.models import ModelParams, TrainConfig
from detector.predictor import cell_logits, predict, score_map, scoring_context, suppress_non_maxima

CONFIG = TrainConfig(embedding_dim=1)


def dot_detector(off_b=(0.0, 0.0)) -> ModelParams:
    """One-dim embedding = center-minus-surround; dark centers score high"""
    proj_w = np.zeros((9, 1))
    proj_w[4, 0] = 1.0
    return ModelParams(
        proj_w=proj_w,
        proj_b=np.zeros(1),
        obj_w=np.array([-10.0]),
        obj_b=np.array([-1.0]),
        merged_w=np.zeros(1 + CONFIG.context_dim),
        merged_b=np.zeros(1),
        off_w=np.zeros((1, 2)),
        off_b=np.array(off_b),
    )


def scene(*dots):
    """64x64 at 0.6 with dark 4x4 centers in the given (row, col, value) patches"""
    data = np.full((64, 64), 0.6)
    for row, col, value in dots:
        data[8 * row + 2 : 8 * row + 6, 8 * col + 2 : 8 * col + 6] = value
    return ImageBuffer.from_array(data)


class TestSuppressNonMaxima:
    """Window peaks with raster-order tie breaking"""

    def test_adjacent_keeps_higher(self):
        scores = np.zeros((5, 5))
        scores[2, 2], scores[2, 3] = 0.9, 0.8
        assert suppress_non_maxima(scores, 0.5, 1) == [12]

    def test_equal_neighbours_keep_earlier(self):
        scores = np.zeros((5, 5))
        scores[1, 1] = scores[1, 2] = 0.7
        assert suppress_non_maxima(scores, 0.5, 1) == [6]

    def test_distant_peaks_survive(self):
        scores = np.zeros((3, 5))
        scores[0, 0], scores[0, 2] = 0.9, 0.8
        assert suppress_non_maxima(scores, 0.5, 1) == [0, 2]

    def test_below_threshold(self):
        assert suppress_non_maxima(np.full((3, 3), 0.4), 0.5, 1) == []


class TestPredict:
    """End-to-end detection on constructed scenes"""

    def test_nothing_above_threshold(self):
        assert predict(scene((2, 3, 0.1)), dot_detector(), ContextState(), CONFIG, threshold=0.99) == []

    def test_isolated_cell(self):
        detections = predict(scene((2, 3, 0.1)), dot_detector(), ContextState(), CONFIG)
        assert len(detections) == 1
        assert detections[0].center == (28.0, 20.0)
        assert detections[0].confidence == pytest.approx(1 / (1 + np.exp(-4.0)))
        assert detections[0].box.w == 2 * CONFIG.object_radius

    def test_offset_adjusted_center(self):
        detections = predict(scene((2, 3, 0.1)), dot_detector(off_b=(0.25, -0.25)), ContextState(), CONFIG)
        assert detections[0].center == (30.0, 18.0)

    def test_adjacent_cells_suppressed(self):
        detections = predict(scene((2, 3, 0.1), (2, 4, 0.3)), dot_detector(), ContextState(), CONFIG, nms_radius=8.0)
        assert [d.center for d in detections] == [(28.0, 20.0)]

    def test_sorted_by_confidence(self):
        detections = predict(scene((1, 1, 0.3), (6, 6, 0.1)), dot_detector(), ContextState(), CONFIG)
        assert [d.center for d in detections] == [(52.0, 52.0), (12.0, 12.0)]
        assert detections[0].confidence > detections[1].confidence

    def test_centers_clipped_to_image(self):
        _, centers = score_map(scene(), dot_detector(off_b=(-10.0, 20.0)), ContextState(), CONFIG)
        assert centers[:, 0].min() == 0.0
        assert centers[:, 1].max() == np.nextafter(64.0, 0.0)
        assert centers[:, 1].max() < 64.0

    def test_unseeded_context_scores_with_zero_reference(self):
        config = TrainConfig(embedding_dim=1, use_cr=True)
        scores, _ = score_map(scene((2, 3, 0.1)), dot_detector(), ContextState(), config)
        np.testing.assert_array_equal(scores, 0.5)


class TestScorer:
    """Plain and merged cell scorers"""

    def test_scoring_context_off_without_refinement(self):
        assert scoring_context(ContextState(), CONFIG) is None

    def test_scoring_context_keeps_seeded_reference(self):
        config = TrainConfig(embedding_dim=1, use_cr=True)
        state = ContextState(ref=np.arange(4.0), initialized=True)
        assert scoring_context(state, config) is state

    def test_merged_logits_match_concatenation(self, rng):
        config = TrainConfig(embedding_dim=3, use_cr=True)
        params = ModelParams.initialize(config, rng)
        params.merged_w = rng.normal(size=params.merged_w.shape)
        embeddings = rng.normal(size=(5, 3))
        ref = rng.normal(size=config.context_dim)
        logits = cell_logits(embeddings, params, ContextState(ref=ref, initialized=True))
        expected = embeddings @ params.merged_w[:3] + ref @ params.merged_w[3:] + params.merged_b[0]
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_detections_fall_inside_the_grid(self):
        detections = predict(scene((7, 7, 0.1)), dot_detector(off_b=(5.0, 5.0)), ContextState(), CONFIG)
        assert detections
        assert all(0.0 <= d.cx < 64.0 and 0.0 <= d.cy < 64.0 for d in detections)
        assert all(int(d.cx // 8) < 8 and int(d.cy // 8) < 8 for d in detections)
